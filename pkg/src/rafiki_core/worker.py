"""Simulated tuning workers.

A :class:`SyntheticTask` stands in for training a ConvNet: each trial's
validation performance follows a saturating learning curve whose asymptote
``p_max(h)`` is a smooth unimodal function of the encoded trial and whose
time constant ``kappa(h)`` is the number of epochs needed to reach 63% of
it.  Starting from a checkpoint shifts the curve forward by ``warm_e0``
epochs.

Worker logic is written once as a generator (:func:`worker_process`) that
yields scheduling requests.  :class:`SimCluster` runs many of them on one
thread under a virtual clock; :func:`run_blocking` runs one of them against
a real transport.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import hyperspace as hs
from . import messages as m
from .advisor import plateaued
from .errors import NoProgress, TransportClosed
from .paramstore import Layer, ParamBlob, ParamStore, ShapeSig
from .rng import make_rng

ARCH_KNOBS = ("n_layers", "kernel_size", "filters")
ARCH_DEFAULTS = {"n_layers": 8, "kernel_size": 3, "filters": 16}
N_CLASSES = 10


@dataclass
class SyntheticTask:
    """Seeded family of learning curves over a hyper-parameter space."""

    space: hs.HyperSpace
    seed: int = 0
    p_cap: float = 0.95
    noise_sd: float = 0.005
    lam: float = 0.5
    kappa_min: float = 2.0
    kappa_max: float = 20.0
    width: float = 0.4
    mu: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)
    w: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.p_cap <= 1.0:
            raise ValueError("p_cap must lie in (0, 1]")
        if self.noise_sd < 0 or self.lam < 0:
            raise ValueError("noise_sd and lam must be >= 0")
        if not 1.0 <= self.kappa_min <= self.kappa_max:
            raise ValueError("need 1 <= kappa_min <= kappa_max")
        if self.width <= 0:
            raise ValueError("width must be > 0")
        rng = make_rng(self.seed, "task")
        d = self.space.dim
        self.mu = rng.uniform(0.2, 0.8, d)
        # one-hot coordinates only take values 0 and 1, so they get a wider bump
        sig = []
        for k in self.space.knobs:
            sig += [self.width * 2.0 if k.width > 1 else self.width] * k.width
        self.sigma = np.array(sig)
        self.w = rng.uniform(0.5, 1.5, d)

    def encode(self, assignment) -> np.ndarray:
        return hs.encode(self.space, assignment)

    def p_max(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.p_cap * np.exp(-0.5 * np.sum(((x - self.mu) / self.sigma) ** 2)))

    def kappa(self, x) -> float:
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        frac = float(self.w @ x / self.w.sum())
        return self.kappa_max - (self.kappa_max - self.kappa_min) * frac

    def noise(self, trial_id: int, epoch: int) -> float:
        if self.noise_sd == 0:
            return 0.0
        return float(make_rng(self.seed, "epoch-noise", trial_id, epoch).normal(0.0, self.noise_sd))


def learning_curve(task: SyntheticTask, h, e: int, warm_e0: float = 0.0, deficit: float = 0.0, eta: float = 0.0) -> float:
    """Performance after ``e`` epochs; ``eta`` is the additive noise draw."""
    if e < 1:
        raise ValueError("epoch must be >= 1")
    if warm_e0 < 0:
        raise ValueError("warm_e0 must be >= 0")
    x = task.encode(h) if isinstance(h, dict) else np.asarray(h, dtype=float)
    p_eff = task.p_max(x) * (1.0 - task.lam * max(0.0, deficit))
    p = p_eff * (1.0 - math.exp(-(e + warm_e0) / task.kappa(x))) + eta
    return min(max(p, 0.0), task.p_cap)


def warm_start_credit(task: SyntheticTask, h, donor_perf: float, running_best: float = 0.0) -> tuple[float, float]:
    """Epochs of head start granted by a donor checkpoint, and the donor's deficit."""
    if not 0.0 <= donor_perf <= task.p_cap:
        raise ValueError("donor_perf must lie in [0, p_cap]")
    x = task.encode(h) if isinstance(h, dict) else np.asarray(h, dtype=float)
    pm = task.p_max(x)
    k = task.kappa(x)
    if pm <= 0.0:
        e0 = 0.0
    else:
        e0 = -k * math.log(1.0 - min(donor_perf, 0.9 * pm) / pm)
    e0 = min(max(e0, 0.0), 10.0 * k)
    return e0, max(0.0, running_best - donor_perf)


def signature(assignment) -> ShapeSig:
    """Layer signature implied by the architecture knobs of a trial."""
    arch = {k: int(assignment.get(k, v)) for k, v in ARCH_DEFAULTS.items()}
    k, f = arch["kernel_size"], arch["filters"]
    layers = []
    cin = 3
    for _ in range(arch["n_layers"]):
        layers.append(Layer("conv", (k, k, cin, f)))
        cin = f
    layers.append(Layer("dense", (f, N_CLASSES)))
    return ShapeSig(tuple(layers))


# -- worker ---------------------------------------------------------------------


@dataclass(frozen=True)
class WorkerConf:
    max_epochs: int = 10
    epoch_s: float = 1.0
    patience: int = 5
    min_improve: float = 1e-3
    local_early_stop: bool = True

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.epoch_s < 0:
            raise ValueError("epoch_s must be >= 0")


@dataclass(frozen=True)
class EpochReport:
    worker: str
    trial_id: int
    epoch: int
    p: float


@dataclass
class TrialRun:
    """A worker's state for the trial it is training."""

    trial: hs.Trial
    warm_e0: float = 0.0
    deficit: float = 0.0
    donor: int | None = None
    history: list = field(default_factory=list)
    best_p: float = -math.inf
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.history)


def checkpoint(run: TrialRun) -> ParamBlob:
    """Blob holding the trial's best-epoch weights."""
    if run.epochs == 0:
        raise NoProgress(f"trial {run.trial.trial_id} has run no epochs")
    sig = signature(run.trial.assignment)
    n = sig.nbytes // 8
    payload = make_rng(0, "checkpoint", run.trial.trial_id, run.best_epoch).standard_normal(n).tobytes()
    return ParamBlob(sig, payload, float(run.best_p), run.trial.trial_id)


class Sleep:
    __slots__ = ("dt",)

    def __init__(self, dt: float):
        self.dt = dt


RECV = "recv"
POLL = "poll"


def start_trial(task: SyntheticTask, trial: hs.Trial, store: ParamStore | None) -> TrialRun:
    run = TrialRun(trial)
    if trial.origin.is_warm and store is not None:
        blob = store.compose(signature(trial.assignment))
        if blob is not None:
            donor = min(max(blob.perf, 0.0), task.p_cap)
            run.warm_e0, run.deficit = warm_start_credit(task, trial.assignment, donor, store.best_perf())
            run.donor = blob.source
    return run


def train_epoch(task: SyntheticTask, run: TrialRun) -> float:
    e = run.epochs + 1
    eta = task.noise(run.trial.trial_id, e)
    p = learning_curve(task, run.trial.assignment, e, run.warm_e0, run.deficit, eta)
    run.history.append(p)
    if p > run.best_p:
        run.best_p, run.best_epoch = p, e
    return p


def worker_process(name: str, endpoint, task: SyntheticTask, conf: WorkerConf, store: ParamStore | None, log=None):
    """Worker protocol as a generator.

    Yields ``RECV`` to block for the next directive, ``POLL`` to collect any
    directives already delivered (as a list), or ``Sleep(dt)`` to spend
    simulated training time.  Returns when told to shut down.
    """
    log = log if log is not None else []
    last: TrialRun | None = None

    def put(run):
        if store is not None and run is not None and run.epochs:
            store.put(checkpoint(run))
            log.append(("put", run.trial.trial_id, run.best_p))

    try:
        while True:
            endpoint.send(m.request(name))
            while True:
                d = yield RECV
                if d.kind == m.K_PUT:
                    # kPut after kFinish refers to the trial just finished
                    put(last)
                elif d.kind in (m.SEND_TRIAL, m.SHUTDOWN):
                    break
            if d.kind == m.SHUTDOWN:
                return log
            run = start_trial(task, d.trial, store)
            last = run
            stopped = shutdown = False
            while run.epochs < conf.max_epochs and not stopped:
                yield Sleep(conf.epoch_s)
                p = train_epoch(task, run)
                endpoint.send(m.report(name, p, run.trial))
                for d in (yield POLL):
                    if d.kind == m.K_PUT:
                        put(run)
                    elif d.kind == m.K_STOP:
                        stopped = True
                    elif d.kind == m.SHUTDOWN:
                        stopped = shutdown = True
                if conf.local_early_stop and plateaued(run.history, conf.patience, conf.min_improve):
                    stopped = True
            log.append(("trial", run.trial.trial_id, run.epochs, run.best_p))
            if shutdown:
                return log
            endpoint.send(m.finish(name))
    except TransportClosed:
        log.append(("closed", None if last is None else last.trial.trial_id))
        return log


class SimCluster:
    """Runs worker generators on one thread under a virtual clock.

    Wraps a :class:`~rafiki_core.transport.MemoryHub` and presents the
    master-side interface.  ``recv`` advances the simulation until a worker
    message is available.  Messages sent at the same virtual time reach the
    master before any worker polls, so a directive answering an epoch
    report is seen before the next epoch starts.
    """

    def __init__(self, hub, procs: dict):
        self.hub = hub
        self.clock = 0.0
        self._seq = 0
        self._heap: list = []
        self._procs = dict(procs)
        self._waiting: set[str] = set()
        self._mode: dict[str, str] = {}
        self.logs: dict[str, list] = {}
        for w in sorted(self._procs):
            self._resume(w, None)

    def _push(self, t, w):
        heapq.heappush(self._heap, (t, self._seq, w))
        self._seq += 1

    def _resume(self, w: str, value):
        gen = self._procs[w]
        try:
            req = next(gen) if value is None and w not in self._mode else gen.send(value)
        except StopIteration as stop:
            self.logs[w] = stop.value
            self._procs.pop(w)
            self._mode.pop(w, None)
            self.hub.endpoints[w].close()
            return
        if isinstance(req, Sleep):
            self._mode[w] = "sleep"
            self._push(self.clock + req.dt, w)
        elif req == POLL:
            self._mode[w] = "poll"
            self._push(self.clock, w)
        elif req == RECV:
            self._mode[w] = "recv"
            self._waiting.add(w)
        else:
            raise TypeError(f"worker {w} yielded {req!r}")

    def step(self) -> bool:
        """Advance by one scheduling action; False when nothing can run."""
        for w in sorted(self._waiting):
            ep = self.hub.endpoints[w]
            if ep.inbox:
                self._waiting.discard(w)
                self._resume(w, ep.recv())
                return True
        if self._heap:
            t, _, w = heapq.heappop(self._heap)
            self.clock = t
            if self._mode.get(w) == "poll":
                self._resume(w, self.hub.endpoints[w].drain())
            else:
                self._resume(w, 0)
            return True
        return False

    def recv(self, timeout=None):
        while not self.hub.pending():
            if not self.step():
                raise TransportClosed("no worker can make progress")
        return self.hub.recv()

    def send(self, worker: str, directive) -> None:
        self.hub.send(worker, directive)

    def workers(self) -> list[str]:
        return self.hub.workers()

    def run_until_idle(self) -> None:
        """Let workers consume outstanding directives (e.g. after Shutdown)."""
        while self.step():
            pass

    def close(self) -> None:
        self.hub.close()


def run_blocking(gen, endpoint, time_scale: float = 0.0):
    """Drive a worker generator against a real (blocking) transport."""
    try:
        req = next(gen)
        while True:
            if isinstance(req, Sleep):
                if time_scale > 0:
                    time.sleep(req.dt * time_scale)
                req = gen.send(0)
            elif req == POLL:
                req = gen.send(endpoint.drain())
            else:
                req = gen.send(endpoint.recv(None))
    except StopIteration as stop:
        return stop.value
    except TransportClosed:
        return None
