"""Sine-modulated request arrivals and the serving event loop.

The arrival rate is ``rate(t) = k * sin(2 pi t / T) + b`` with ``k`` and
``b`` chosen so that the rate tops out at ``1.1 * ref`` and exceeds ``ref``
for exactly 20% of every period.  Arrivals are generated on a fixed grid
of step ``dt``: every step lands one burst of requests, all stamped with
the step's start time.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .inference import RequestQueue, ServingView, ensemble_cost, mask_members

EXCEED_FRACTION = 0.2
PEAK_FACTOR = 1.1


@dataclass(frozen=True)
class RateParams:
    k: float
    b: float
    T: float
    ref: float

    def rate(self, t):
        return self.k * np.sin(2.0 * np.pi * np.asarray(t, dtype=float) / self.T) + self.b

    @property
    def peak(self) -> float:
        return self.k + self.b

    @property
    def trough(self) -> float:
        return self.b - self.k


def solve_rate_params(ref: float, T: float) -> RateParams:
    """Amplitude and offset meeting the peak and exceedance constraints."""
    if ref <= 0 or T <= 0:
        raise ValueError("ref and T must be > 0")
    # rate > ref on an arc of width 0.2 T centred on the peak, i.e. where sin > sin(0.3 pi)
    s0 = math.sin(math.pi * (0.5 - EXCEED_FRACTION))
    k = (PEAK_FACTOR - 1.0) * ref / (1.0 - s0)
    return RateParams(k, PEAK_FACTOR * ref - k, T, ref)


def exceedance_fraction(params: RateParams, n: int = 2_000_001) -> float:
    """Fraction of one period with rate above ``ref`` (midpoint quadrature)."""
    t = (np.arange(n) + 0.5) / n * params.T
    return float(np.mean(params.rate(t) > params.ref))


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5).astype(np.int64)


def arrivals(params: RateParams, t: float, dt: float, rng: np.random.Generator | None, noise_sd: float = 0.1) -> int:
    """Request count for one grid step starting at ``t``."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    phi = rng.normal(0.0, noise_sd) if rng is not None and noise_sd > 0 else 0.0
    return int(round_half_up(max(0.0, dt * float(params.rate(t)) * (1.0 + phi))))


def arrival_counts(params: RateParams, times, dt: float, rng: np.random.Generator | None, noise_sd: float = 0.1) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    phi = rng.normal(0.0, noise_sd, len(times)) if rng is not None and noise_sd > 0 else 0.0
    return round_half_up(np.maximum(0.0, dt * params.rate(times) * (1.0 + phi)))


# -- metrics ------------------------------------------------------------------------

WINDOW_FIELDS = ("t", "arriving", "completed", "overdue", "dropped", "mean_accuracy", "mean_latency", "queued", "in_flight")


@dataclass
class EpisodeMetrics:
    window: float
    duration: float
    arriving: np.ndarray
    completed: np.ndarray
    overdue: np.ndarray
    dropped: np.ndarray
    acc_sum: np.ndarray
    served: np.ndarray
    lat_sum: np.ndarray
    queued: np.ndarray
    in_flight: np.ndarray
    rate: np.ndarray
    trace: list | None = None
    batches: int = 0

    @property
    def n_windows(self) -> int:
        return len(self.arriving)

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n_windows) * self.window

    def accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.served > 0, self.acc_sum / np.maximum(self.served, 1), np.nan)

    def latency(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.served > 0, self.lat_sum / np.maximum(self.served, 1), np.nan)

    def mean_accuracy(self, mask=None) -> float:
        """Time average of per-window accuracy over windows that served requests."""
        acc = self.accuracy()
        keep = self.served > 0
        if mask is not None:
            keep &= mask
        return float(acc[keep].mean()) if keep.any() else 0.0

    def overdue_per_s(self, mask=None) -> float:
        if mask is None:
            return float(self.overdue.sum() / self.duration)
        return float(self.overdue[mask].sum() / (mask.sum() * self.window)) if mask.any() else 0.0

    def dropped_per_s(self) -> float:
        return float(self.dropped.sum() / self.duration)

    def arriving_per_s(self) -> float:
        return float(self.arriving.sum() / self.duration)

    def low_rate_mask(self, quantile: float = 0.25) -> np.ndarray:
        return self.rate <= np.quantile(self.rate, quantile)

    def conservation_errors(self) -> np.ndarray:
        """Per-window residual of arrivals against all outflows and stock changes."""
        dq = np.diff(np.concatenate([[0], self.queued]))
        df = np.diff(np.concatenate([[0], self.in_flight]))
        return self.arriving - (self.completed + self.overdue + self.dropped + dq + df)

    def summary(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy(),
            "overdue_per_s": self.overdue_per_s(),
            "dropped_per_s": self.dropped_per_s(),
            "arriving_per_s": self.arriving_per_s(),
            "batches": self.batches,
        }

    def rows(self) -> list[dict]:
        acc, lat = self.accuracy(), self.latency()
        out = []
        for i in range(self.n_windows):
            out.append({
                "t": round(i * self.window, 9),
                "arriving": int(self.arriving[i]),
                "completed": int(self.completed[i]),
                "overdue": int(self.overdue[i]),
                "dropped": int(self.dropped[i]),
                "mean_accuracy": "" if np.isnan(acc[i]) else float(acc[i]),
                "mean_latency": "" if np.isnan(lat[i]) else float(lat[i]),
                "queued": int(self.queued[i]),
                "in_flight": int(self.in_flight[i]),
            })
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=WINDOW_FIELDS)
            w.writeheader()
            w.writerows(self.rows())

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.trace or []:
                fh.write(json.dumps(ev) + "\n")


# -- event loop ------------------------------------------------------------------------


@dataclass
class ServingConf:
    tau: float
    batches: tuple = (16, 32, 48, 64)
    period: float | None = None  # defaults to 500 tau
    duration: float | None = None  # defaults to one period
    window: float | None = None  # defaults to tau
    dt: float | None = None  # defaults to min(tau / 10, 0.01 T)
    capacity: int | None = None  # defaults to 4 max(B) |M|
    noise_sd: float = 0.1

    @property
    def T(self) -> float:
        return self.period if self.period is not None else 500.0 * self.tau

    def resolved(self, n_models: int) -> "ServingConf":
        T = self.T
        return ServingConf(
            self.tau, tuple(self.batches), T,
            self.duration if self.duration is not None else T,
            self.window if self.window is not None else self.tau,
            self.dt if self.dt is not None else min(self.tau / 10.0, 0.01 * T),
            self.capacity if self.capacity is not None else 4 * max(self.batches) * n_models,
            self.noise_sd,
        )


def check_serving(conf: ServingConf, profiles) -> None:
    problems = []
    if conf.tau <= 0:
        problems.append("tau must be > 0")
    if not conf.batches or list(conf.batches) != sorted(set(conf.batches)) or conf.batches[0] < 1:
        problems.append("batch sizes must be positive, distinct and ascending")
    if not profiles:
        problems.append("no model profiles")
    for p in profiles:
        missing = [b for b in conf.batches if b not in p.latency]
        if missing:
            problems.append(f"{p.name} has no latency for batch sizes {missing}")
    if conf.duration is not None and conf.duration < conf.T:
        problems.append("duration must cover at least one period")
    if problems:
        raise ConfigError("; ".join(problems))


def run_episode(dispatcher, profiles, params: RateParams, conf: ServingConf, rng: np.random.Generator,
                table=None, trace: bool = False) -> EpisodeMetrics:
    """Simulate one episode of arrivals, dispatch decisions and batch completions.

    The dispatcher is consulted after every arrival burst, every batch
    completion and every wake-up time it asked for.  Its ``decide(view)``
    returns ``(dispatches, wake_at)``; the loop keeps consulting at the same
    instant while it keeps dispatching.  If it has an ``on_dispatch``
    method, that is called with the dispatch, the number of overdue
    requests in it and the ensemble accuracy.
    """
    check_serving(conf, profiles)
    conf = conf.resolved(len(profiles))
    n_models = len(profiles)
    tau, dt, window = conf.tau, conf.dt, conf.window
    n_steps = int(math.floor(conf.duration / dt + 1e-9))
    n_win = int(math.ceil(conf.duration / window - 1e-9))
    step_t = np.arange(n_steps) * dt
    counts = arrival_counts(params, step_t, dt, rng, conf.noise_sd)

    def acc_of(v):
        if table is not None:
            return table[v]
        return max(profiles[i].accuracy for i in mask_members(v, n_models))

    z = lambda dtype=np.int64: np.zeros(n_win, dtype=dtype)
    arriving, completed, overdue, dropped = z(), z(), z(), z()
    queued, in_flight, served = z(), z(), z()
    acc_sum, lat_sum = z(float), z(float)
    rate = params.rate((np.arange(n_win) + 0.5) * window)
    events = [] if trace else None

    queue = RequestQueue(conf.capacity, reserve=int(counts.sum()) + 16)
    busy_until = np.zeros(n_models)
    view = ServingView(0.0, queue, busy_until, profiles, tau, conf.batches)
    heap: list = []  # (time, seq, kind, payload)
    wakes: set = set()
    seq = 0
    flight = 0
    cur_win = 0
    n_batches = 0
    on_dispatch = getattr(dispatcher, "on_dispatch", None)

    def close_windows(t):
        nonlocal cur_win
        w = min(int(t / window + 1e-9), n_win)
        while cur_win < w:
            queued[cur_win] = len(queue)
            in_flight[cur_win] = flight
            cur_win += 1

    def win(t):
        return min(int(t / window + 1e-9), n_win - 1)

    def consult(t):
        nonlocal seq, flight, n_batches
        view.clock = t
        while True:
            if not len(queue):
                return
            ds, wake = dispatcher.decide(view)
            if wake is not None and wake > t and wake not in wakes:
                wakes.add(wake)
                heapq.heappush(heap, (wake, seq, 1, None))
                seq += 1
            if not ds:
                return
            for d in ds:
                if d.n < 1 or d.n > len(queue) or d.b not in conf.batches or d.n > d.b:
                    raise ConfigError(f"invalid dispatch {d}")
                members = mask_members(d.mask, n_models)
                if any(busy_until[i] > t for i in members):
                    raise ConfigError(f"dispatch {d} uses a busy model")
                cost = ensemble_cost(profiles, d.mask, d.b)
                arr = queue.pop(d.n)
                lat = t - arr + cost
                n_over = int((lat > tau).sum())
                a = acc_of(d.mask)
                busy_until[members] = t + cost
                flight += d.n
                n_batches += 1
                heapq.heappush(heap, (t + cost, seq, 0, (d.n, n_over, a, float(lat.sum()))))
                seq += 1
                if on_dispatch is not None:
                    on_dispatch(d, n_over, a)
                if events is not None:
                    events.append({"t": t, "ev": "dispatch", "mask": d.mask, "n": d.n, "b": d.b,
                                   "cost": cost, "overdue": n_over})

    def drain_until(t_limit, inclusive):
        nonlocal flight
        while heap and (heap[0][0] < t_limit or (inclusive and heap[0][0] <= t_limit)):
            t_ev, _, kind, payload = heapq.heappop(heap)
            close_windows(t_ev)
            if kind == 0:
                n, n_over, a, ls = payload
                w = win(t_ev)
                flight -= n
                completed[w] += n - n_over
                overdue[w] += n_over
                served[w] += n
                acc_sum[w] += a * n
                lat_sum[w] += ls
                if events is not None:
                    events.append({"t": t_ev, "ev": "complete", "n": n, "overdue": n_over})
            else:
                wakes.discard(t_ev)
            consult(t_ev)

    for k in range(n_steps):
        t = float(step_t[k])
        drain_until(t, inclusive=True)
        close_windows(t)
        c = int(counts[k])
        if c:
            acc_n, drop_n = queue.enqueue(np.full(c, t))
            w = win(t)
            arriving[w] += c
            dropped[w] += drop_n
            if events is not None:
                events.append({"t": t, "ev": "arrive", "n": c, "dropped": drop_n})
        consult(t)
    drain_until(conf.duration, inclusive=False)
    close_windows(conf.duration + window)
    return EpisodeMetrics(window, conf.duration, arriving, completed, overdue, dropped, acc_sum, served,
                          lat_sum, queued, in_flight, rate, events, n_batches)
