"""Inference serving primitives: request queue, greedy batching, profiles, ensembles.

Model profiles give the simulated latency ``c(m, b)`` of one batch of size
``b``.  An ensemble ``v`` is a nonzero bit mask over the model list; bit
``i`` selects model ``i``.  A batch sent to an ensemble occupies every
selected model until the slowest one finishes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySelection, EmptyStats

DEFAULT_BATCHES = (16, 32, 48, 64)
GUARD_EPS = 1e-9


# -- queue ----------------------------------------------------------------------


class RequestQueue:
    """FIFO of request arrival times with a fixed capacity.

    Backed by one growing numpy buffer and a head pointer, so the oldest
    ``n`` waits are a slice.
    """

    def __init__(self, capacity: int, reserve: int = 1024):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._buf = np.empty(max(reserve, 16))
        self._ids = np.empty(max(reserve, 16), dtype=np.int64)
        self.head = 0
        self.tail = 0
        self._next_id = 0
        self.accepted = 0
        self.dropped = 0

    def __len__(self) -> int:
        return self.tail - self.head

    def enqueue(self, arrival_times) -> tuple[int, int]:
        """Append up to capacity; returns (accepted, dropped)."""
        times = np.atleast_1d(np.asarray(arrival_times, dtype=float))
        room = self.capacity - len(self)
        n = min(len(times), max(room, 0))
        if n:
            if self.tail + n > len(self._buf):
                self._compact(n)
            self._buf[self.tail:self.tail + n] = times[:n]
            self._ids[self.tail:self.tail + n] = np.arange(self._next_id, self._next_id + n)
            self.tail += n
        self._next_id += len(times)
        self.accepted += n
        self.dropped += len(times) - n
        return n, len(times) - n

    def _compact(self, extra: int) -> None:
        live = len(self)
        size = max(2 * len(self._buf), live + extra + 16)
        buf = np.empty(size)
        ids = np.empty(size, dtype=np.int64)
        buf[:live] = self._buf[self.head:self.tail]
        ids[:live] = self._ids[self.head:self.tail]
        self._buf, self._ids = buf, ids
        self.head, self.tail = 0, live

    def oldest(self, n: int | None = None) -> np.ndarray:
        n = len(self) if n is None else min(n, len(self))
        return self._buf[self.head:self.head + n]

    def ids(self, n: int | None = None) -> np.ndarray:
        n = len(self) if n is None else min(n, len(self))
        return self._ids[self.head:self.head + n]

    def front(self) -> float:
        if not len(self):
            raise IndexError("empty queue")
        return float(self._buf[self.head])

    def pop(self, n: int) -> np.ndarray:
        if n > len(self):
            raise ValueError(f"cannot pop {n} from a queue of {len(self)}")
        out = self._buf[self.head:self.head + n].copy()
        self.head += n
        return out

    def waits(self, clock: float, n: int | None = None) -> np.ndarray:
        return clock - self.oldest(n)


def enqueue(queue: RequestQueue, requests) -> tuple[int, int]:
    return queue.enqueue(requests)


# -- profiles -------------------------------------------------------------------


@dataclass(frozen=True)
class ModelProfile:
    name: str
    family: str
    accuracy: float
    latency: dict  # batch size -> seconds
    memory_mb: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"{self.name}: accuracy must lie in [0, 1]")
        bs = sorted(self.latency)
        cs = [self.latency[b] for b in bs]
        if any(c <= 0 for c in cs) or any(b <= a for a, b in zip(cs, cs[1:])):
            raise ValueError(f"{self.name}: latency must be positive and strictly increasing in batch size")

    def c(self, b: int) -> float:
        return self.latency[b]

    def throughput(self, b: int) -> float:
        return b / self.latency[b]

    def max_throughput(self) -> float:
        return max(self.throughput(b) for b in self.latency)

    def min_throughput(self) -> float:
        return min(self.throughput(b) for b in self.latency)


def interpolated_latency(c_lo: float, c_hi: float, batches=DEFAULT_BATCHES) -> dict:
    """Latency table linear in batch size between the smallest and largest batch."""
    b0, b1 = batches[0], batches[-1]
    return {b: c_lo + (c_hi - c_lo) * (b - b0) / (b1 - b0) for b in batches}


C16, C64 = 0.07, 0.23


def inception_v3(batches=DEFAULT_BATCHES) -> ModelProfile:
    return ModelProfile("inception_v3", "inception_v3", 0.78, interpolated_latency(C16, C64, batches), 92.0)


def scaled_profile(name: str, accuracy: float, c_max: float, batches=DEFAULT_BATCHES, memory_mb=0.0) -> ModelProfile:
    """A profile with the single-model curve shape stretched to ``c(max B) = c_max``."""
    f = c_max / C64
    return ModelProfile(name, name, accuracy, interpolated_latency(C16 * f, C64 * f, batches), memory_mb)


def serving_trio(r_upper: float = 572.0, r_lower: float = 128.0, batches=DEFAULT_BATCHES) -> list[ModelProfile]:
    """Three models whose async and sync throughputs hit ``r_upper`` and ``r_lower``.

    The slowest model alone sets the sync throughput, so its peak rate is
    ``r_lower``; the middle model takes what the other two leave of
    ``r_upper``.
    """
    v3 = inception_v3(batches)
    bmax = max(batches)
    c_slow = bmax / r_lower
    c_mid = bmax / (r_upper - r_lower - v3.max_throughput())
    return [
        v3,
        scaled_profile("inception_v4", 0.802, c_mid, batches, 163.0),
        scaled_profile("inception_resnet_v2", 0.804, c_slow, batches, 214.0),
    ]


def async_throughput(profiles) -> float:
    return sum(p.max_throughput() for p in profiles)


def sync_throughput(profiles) -> float:
    return min(p.max_throughput() for p in profiles)


# -- ensembles ------------------------------------------------------------------


def mask_members(v: int, n_models: int) -> list[int]:
    if v <= 0 or v >= 1 << n_models:
        raise EmptySelection(f"mask {v} selects no valid model set of {n_models}")
    return [i for i in range(n_models) if v >> i & 1]


def ensemble_cost(profiles, v: int, b: int) -> float:
    """Straggler latency of batch size ``b`` on ensemble ``v``."""
    return max(profiles[i].c(b) for i in mask_members(v, len(profiles)))


@dataclass
class EnsembleTable:
    accuracy: dict  # mask -> accuracy
    n_models: int

    def __getitem__(self, v: int) -> float:
        mask_members(v, self.n_models)
        return self.accuracy[v]


def ensemble_accuracy(table: EnsembleTable, v: int) -> float:
    return table[v]


def vote(preds: np.ndarray, order: list[int]) -> np.ndarray:
    """Majority vote per column of ``preds`` (models x examples).

    Ties go to the label predicted by the most accurate tied member;
    ``order`` lists model rows from most to least accurate.
    """
    n_models, n = preds.shape
    labels = np.unique(preds)
    counts = np.stack([(preds == l).sum(0) for l in labels])
    top = counts.max(0)
    out = np.empty(n, dtype=preds.dtype)
    decided = np.zeros(n, dtype=bool)
    for row in order:
        lab = preds[row]
        c = counts[np.searchsorted(labels, lab), np.arange(n)]
        take = ~decided & (c == top)
        out[take] = lab[take]
        decided |= take
    return out


def simulate_predictions(profiles, n_examples: int, rng: np.random.Generator, n_labels: int = 10, rho: float = 0.3):
    """Per-model predicted labels on a synthetic validation set (true label 0).

    Each model is right with probability a(m).  A wrong model answers the
    example's shared confuser label with probability rho, otherwise a
    uniformly random wrong label, so errors are correlated across models.
    """
    if n_labels < 2:
        raise ValueError("need at least two labels")
    confuser = rng.integers(1, n_labels, n_examples)
    preds = np.zeros((len(profiles), n_examples), dtype=np.int64)
    for i, p in enumerate(profiles):
        right = rng.random(n_examples) < p.accuracy
        shared = rng.random(n_examples) < rho
        own = rng.integers(1, n_labels, n_examples)
        preds[i] = np.where(right, 0, np.where(shared, confuser, own))
    return preds


def build_ensemble_table(profiles, rng: np.random.Generator, n_examples: int = 20000, n_labels: int = 10, rho: float = 0.3) -> EnsembleTable:
    preds = simulate_predictions(profiles, n_examples, rng, n_labels, rho)
    return table_from_predictions(preds)


def table_from_predictions(preds: np.ndarray) -> EnsembleTable:
    n_models = preds.shape[0]
    emp = (preds == 0).mean(1)
    acc = {}
    for v in range(1, 1 << n_models):
        rows = mask_members(v, n_models)
        order = sorted(range(len(rows)), key=lambda j: (-emp[rows[j]], rows[j]))
        acc[v] = float((vote(preds[rows], order) == 0).mean())
    return EnsembleTable(acc, n_models)


def table_from_records(records: dict, names: list[str]) -> EnsembleTable:
    """Table from ``{"m1+m2": acc, ...}`` keyed by member names."""
    acc = {}
    for key, a in records.items():
        v = 0
        for part in key.split("+"):
            v |= 1 << names.index(part.strip())
        acc[v] = float(a)
    missing = [v for v in range(1, 1 << len(names)) if v not in acc]
    if missing:
        raise ValueError(f"ensemble table misses masks {missing}")
    return EnsembleTable(acc, len(names))


# -- model selection ---------------------------------------------------------------


def select_models(registry, k: int, eps: float = 0.03) -> list[ModelProfile]:
    """Best model plus near-best models of families not yet admitted."""
    if not registry:
        raise ValueError("empty registry")
    ranked = sorted(registry, key=lambda p: -p.accuracy)
    best = ranked[0].accuracy
    out, families = [], set()
    for p in ranked:
        if len(out) >= k:
            break
        if best - p.accuracy <= eps and p.family not in families:
            out.append(p)
            families.add(p.family)
    return out


# -- SLO accounting ---------------------------------------------------------------


def exceed_time(latencies, tau: float) -> float:
    lat = np.asarray(latencies, dtype=float)
    if lat.size == 0:
        raise EmptyStats("no requests")
    return float(np.maximum(lat - tau, 0.0).mean())


# -- greedy batching ------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    size: int


@dataclass(frozen=True)
class Wait:
    """No dispatch now.

    ``wake_at`` is when the guard will fire if nothing else changes (None
    if only new arrivals can help); ``wake_len`` is the queue length at
    which a larger batch becomes admissible.
    """

    wake_at: float | None = None
    wake_len: int | None = None


def greedy_step(queue, cost, clock: float, tau: float, delta: float, batches=DEFAULT_BATCHES) -> Batch | Wait:
    """Largest admissible batch, or wait while the oldest request has slack.

    ``cost(b)`` is the latency of a batch of size ``b``; ``queue`` is a
    :class:`RequestQueue` or a sequence of arrival times.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    n = len(queue)
    bmax = batches[-1]
    if n >= bmax:
        return Batch(bmax)
    fit = [b for b in batches if b <= n]
    bigger = next((b for b in batches if b > n), None)
    if not fit:
        return Wait(None, bigger)
    b = fit[-1]
    q0 = queue.front() if hasattr(queue, "front") else float(queue[0])
    # tolerance so a wake scheduled at the computed time passes the guard
    if cost(b) + (clock - q0) + delta >= tau - GUARD_EPS:
        return Batch(b)
    return Wait(q0 + tau - delta - cost(b), bigger)


# -- dispatch decisions ---------------------------------------------------------------


@dataclass(frozen=True)
class Dispatch:
    mask: int
    n: int
    b: int  # batch size the cost is charged for


@dataclass
class ServingView:
    """What a dispatcher sees of the simulation at a consult."""

    clock: float
    queue: RequestQueue
    busy_until: np.ndarray
    profiles: list
    tau: float
    batches: tuple

    def free(self) -> list[int]:
        return [i for i, t in enumerate(self.busy_until) if t <= self.clock]


@dataclass
class GreedyDispatcher:
    """Greedy batching on one model, or per model with round-robin (async)."""

    delta: float | None = None
    _next: int = 0
    name: str = "greedy"

    def decide(self, view: ServingView):
        delta = 0.1 * view.tau if self.delta is None else self.delta
        out = []
        wake = None
        free = set(view.free())
        n_models = len(view.profiles)
        taken = 0
        start = self._next
        for k in range(n_models):
            i = (start + k) % n_models
            if i not in free:
                continue
            prof = view.profiles[i]
            pending = _ShiftedQueue(view.queue, taken)
            step = greedy_step(pending, prof.c, view.clock, view.tau, delta, view.batches)
            if isinstance(step, Batch):
                out.append(Dispatch(1 << i, step.size, step.size))
                taken += step.size
                self._next = (i + 1) % n_models
            else:
                wake = step.wake_at
                break
        return out, wake


@dataclass
class SyncDispatcher:
    """Every batch goes to all models; greedy batching on the straggler cost."""

    delta: float | None = None
    name: str = "sync"

    def decide(self, view: ServingView):
        delta = 0.1 * view.tau if self.delta is None else self.delta
        if len(view.free()) < len(view.profiles):
            return [], None
        full = (1 << len(view.profiles)) - 1
        step = greedy_step(view.queue, lambda b: ensemble_cost(view.profiles, full, b), view.clock, view.tau, delta, view.batches)
        if isinstance(step, Batch):
            return [Dispatch(full, step.size, step.size)], None
        return [], step.wake_at


def async_dispatcher(delta=None) -> GreedyDispatcher:
    return GreedyDispatcher(delta, name="async")


class _ShiftedQueue:
    """The queue minus the ``skip`` oldest requests already promised to a batch."""

    def __init__(self, queue: RequestQueue, skip: int):
        self.queue = queue
        self.skip = skip

    def __len__(self):
        return max(len(self.queue) - self.skip, 0)

    def front(self) -> float:
        return float(self.queue.oldest(self.skip + 1)[self.skip])


def padded_batch(n: int, batches) -> int:
    """Smallest configured batch size that holds ``n`` requests."""
    for b in batches:
        if b >= n:
            return b
    raise ValueError(f"{n} requests exceed the largest batch {batches[-1]}")
