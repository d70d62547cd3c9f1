"""Trial advisors: random search and GP-based Bayesian optimisation.

An advisor proposes trials (``next``), absorbs performance reports
(``collect``) and answers the master's questions about the best trial and
about per-worker progress (``best_trial``, ``is_best``, ``early_stopping``).
Reports arrive once per epoch; a trial's performance is the best epoch value
reported for it so far.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import ndtr

from . import hyperspace as hs
from .errors import Empty, Exhausted, NumericalFailure, UnknownTrial, UnknownWorker


@dataclass
class TrialRecord:
    trial: hs.Trial
    p: float
    worker: str
    epochs_used: int = 0
    finished: bool = False


@dataclass(frozen=True)
class EarlyStopConf:
    patience: int = 5
    min_improve: float = 1e-3


def plateaued(history, patience: int, min_improve: float) -> bool:
    """True when the last ``patience`` reports brought no improvement.

    A report improves on the running best only if it beats it by at least
    ``min_improve`` (and strictly, so a zero threshold still needs progress).
    """
    best = -math.inf
    stale = 0
    for p in history:
        if p > best and p - best >= min_improve:
            best = p
            stale = 0
        else:
            stale += 1
    return stale >= patience


class TrialAdvisor:
    """Book-keeping shared by all advisors; subclasses implement ``propose``."""

    def __init__(self, space: hs.HyperSpace, rng: np.random.Generator):
        self.space = space.checked()
        self.rng = rng
        self.issued: dict[int, hs.Trial] = {}
        self.records: dict[int, TrialRecord] = {}
        self.worker_trial: dict[str, int] = {}
        self._history: dict[str, list[float]] = {}
        self._best_id: int | None = None
        self._next_id = 0
        grid = space.enumerate()
        if grid is not None:
            order = self.rng.permutation(len(grid))
            self._grid: list[dict] | None = [grid[i] for i in order]
        else:
            self._grid = None
        self._tried: set = set()

    # -- proposing ------------------------------------------------------------

    def next(self, worker: str) -> hs.Trial:
        """Issue the next trial to ``worker``; raises Exhausted when none remain."""
        prev = self.worker_trial.get(worker)
        if prev is not None and prev in self.records:
            self.records[prev].finished = True
        assignment = self.propose()
        trial = hs.Trial(self._next_id, assignment)
        self._next_id += 1
        self.issued[trial.trial_id] = trial
        self._tried.add(_key(assignment))
        self.worker_trial[worker] = trial.trial_id
        self._history[worker] = []
        return trial

    def propose(self) -> dict:
        raise NotImplementedError

    def _untried_grid(self) -> list[dict]:
        assert self._grid is not None
        return [a for a in self._grid if _key(a) not in self._tried]

    # -- reporting ------------------------------------------------------------

    def collect(self, worker: str, p: float, trial: hs.Trial) -> None:
        if trial.trial_id not in self.issued:
            raise UnknownTrial(trial.trial_id)
        p = float(p)
        if not math.isfinite(p):
            raise ValueError(f"non-finite performance {p!r}")
        rec = self.records.get(trial.trial_id)
        if rec is None:
            rec = TrialRecord(self.issued[trial.trial_id], p, worker, 0)
            self.records[trial.trial_id] = rec
        rec.p = max(rec.p, p)
        rec.epochs_used += 1
        if self.worker_trial.get(worker) == trial.trial_id:
            self._history.setdefault(worker, []).append(p)
        if self._best_id is None or _better(rec, self.records[self._best_id]):
            self._best_id = trial.trial_id

    def best_trial(self) -> tuple[hs.Trial, float]:
        """Record with the highest p; ties go to the earliest trial_id."""
        if self._best_id is None:
            raise Empty("no trials collected")
        rec = self.records[self._best_id]
        return rec.trial, rec.p

    def is_best(self, worker: str) -> bool:
        tid = self.worker_trial.get(worker)
        if tid is None:
            raise UnknownWorker(worker)
        return self._best_id == tid

    def early_stopping(self, worker: str, conf) -> bool:
        if worker not in self._history:
            raise UnknownWorker(worker)
        return plateaued(self._history[worker], conf.patience, conf.min_improve)

    def completed(self) -> list[TrialRecord]:
        return [r for r in self.records.values() if r.finished]


def _better(a: TrialRecord, b: TrialRecord) -> bool:
    return a.p > b.p or (a.p == b.p and a.trial.trial_id < b.trial.trial_id)


def _key(assignment: dict):
    return tuple(sorted((k, repr(v)) for k, v in assignment.items()))


class RandomSearch(TrialAdvisor):
    def propose(self) -> dict:
        if self._grid is not None:
            left = self._untried_grid()
            if not left:
                raise Exhausted("every point of the finite domain has been tried")
            return left[0]
        return hs.sample(self.space, self.rng).assignment


# -- Gaussian process -------------------------------------------------------------


@dataclass
class GpModel:
    X: np.ndarray
    y: np.ndarray
    lengthscale: np.ndarray
    signal_var: float
    noise_var: float
    chol: tuple = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)

    def kernel(self, A, B) -> np.ndarray:
        return rbf_kernel(A, B, self.lengthscale, self.signal_var)


def rbf_kernel(A, B, lengthscale, signal_var) -> np.ndarray:
    A = np.atleast_2d(A) / lengthscale
    B = np.atleast_2d(B) / lengthscale
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def fit_gp(X, y, lengthscale=0.2, signal_var=1.0, noise_var=1e-4, retries=3) -> GpModel:
    """Fit a zero-mean GP with fixed kernel hyper-parameters.

    When the Cholesky factorisation fails the jitter is doubled, up to
    ``retries`` times, before giving up with NumericalFailure.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    ls = np.broadcast_to(np.asarray(lengthscale, dtype=float), (X.shape[1],)).copy()
    gp = GpModel(X, y, ls, float(signal_var), float(noise_var))
    K = gp.kernel(X, X)
    jitter = float(noise_var)
    for _ in range(retries + 1):
        try:
            chol = linalg.cho_factor(K + jitter * np.eye(len(X)), lower=True)
            break
        except linalg.LinAlgError:
            jitter *= 2.0
    else:
        raise NumericalFailure(f"covariance not positive definite after {retries} jitter doublings")
    gp.noise_var = jitter
    gp.chol = chol
    gp.alpha = linalg.cho_solve(chol, y)
    return gp


def gp_posterior(gp: GpModel, xstar) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the latent function at ``xstar``."""
    xs = np.atleast_2d(np.asarray(xstar, dtype=float))
    ks = gp.kernel(gp.X, xs)
    mu = ks.T @ gp.alpha
    v = linalg.solve_triangular(gp.chol[0], ks, lower=True)
    var = gp.signal_var - (v * v).sum(0)
    return mu, np.maximum(var, 0.0)


def expected_improvement(mu, sigma, best_y) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    gain = mu - best_y
    ei = np.maximum(gain, 0.0)
    pos = sigma > 0
    # subnormal sigma overflows z to +-inf, where both terms take their correct limits
    with np.errstate(over="ignore"):
        z = gain[pos] / sigma[pos]
        ei[pos] = np.maximum(gain[pos] * ndtr(z) + sigma[pos] * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi), 0.0)
    return ei


def ei_acquire(gp: GpModel, best_y: float, candidates) -> int:
    """Index of the candidate with the largest expected improvement (first on ties)."""
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    if len(cands) == 0:
        raise ValueError("no candidates")
    mu, var = gp_posterior(gp, cands)
    return int(np.argmax(expected_improvement(mu, np.sqrt(var), best_y)))


class BayesOpt(TrialAdvisor):
    """EI-driven search with a fixed-hyper-parameter RBF GP.

    Performances are standardised before fitting.  The first ``n_init``
    trials (counted in completed records) are drawn at random.
    """

    def __init__(self, space, rng, lengthscale=0.2, signal_var=1.0, noise_var=1e-4, n_init=5, n_cand=1000):
        super().__init__(space, rng)
        self.lengthscale = lengthscale
        self.signal_var = signal_var
        self.noise_var = noise_var
        self.n_init = int(n_init)
        self.n_cand = int(n_cand)
        self.gp_fits = 0
        self._gp: GpModel | None = None
        self._gp_n = -1
        self.last_candidates: list[dict] | None = None
        self.last_ei: np.ndarray | None = None

    def propose(self) -> dict:
        done = self.completed()
        if self._grid is not None:
            left = self._untried_grid()
            if not left:
                raise Exhausted("every point of the finite domain has been tried")
            if len(done) < self.n_init:
                return left[0]
            if len(left) > self.n_cand:
                idx = self.rng.choice(len(left), self.n_cand, replace=False)
                left = [left[i] for i in sorted(idx)]
            cands = left
        else:
            if len(done) < self.n_init:
                return hs.sample(self.space, self.rng).assignment
            cands = hs.sample_many(self.space, self.rng, self.n_cand)
        gp, y_best = self._model(done)
        X = hs.encode_many(self.space, cands)
        mu, var = gp_posterior(gp, X)
        ei = expected_improvement(mu, np.sqrt(var), y_best)
        self.last_candidates = cands
        self.last_ei = ei
        return cands[int(np.argmax(ei))]

    def _model(self, done: list[TrialRecord]) -> tuple[GpModel, float]:
        # refit only when the completed set changed since the last fit
        key = (len(done), sum(r.p for r in done))
        if self._gp is None or self._gp_n != key:
            X = np.array([hs.encode(self.space, r.trial.assignment) for r in done])
            y = np.array([r.p for r in done])
            sd = y.std()
            z = (y - y.mean()) / (sd if sd > 0 else 1.0)
            self._gp = fit_gp(X, z, self.lengthscale, self.signal_var, self.noise_var)
            self._gp_n = key
            self.gp_fits += 1
        return self._gp, float(self._gp.y.max())


def make_advisor(kind: str, space: hs.HyperSpace, rng: np.random.Generator, **bayes) -> TrialAdvisor:
    if kind == "random":
        return RandomSearch(space, rng)
    if kind in ("bayes", "bo"):
        return BayesOpt(space, rng, **bayes)
    raise ValueError(f"unknown advisor kind {kind!r}")
