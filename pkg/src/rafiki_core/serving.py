"""Serving scenarios: model sets, workloads, baselines and the RL scheduler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import inference as inf
from . import rl
from .errors import NonFinite
from .rng import make_rng
from .workload import EpisodeMetrics, RateParams, ServingConf, run_episode, solve_rate_params

SINGLE_TAU = 0.56  # SLO of the single-model scenario, in seconds


class RLDispatcher:
    """Consults the agent whenever requests wait and some model is free.

    A chosen batch takes ``min(b, len(queue))`` requests and is charged the
    latency of the smallest configured batch that holds them.  By default the
    policy only chooses among ensembles whose models are all free.  With
    ``mask_busy`` off it may pick a busy ensemble; the action is then kept
    and executed once all its models are free, and no new action is drawn
    meanwhile.
    """

    name = "rl"

    def __init__(self, agent: rl.ActorCritic, table: inf.EnsembleTable, beta: float, rng: np.random.Generator,
                 mode: str = "sample", single: bool = False):
        self.agent = agent
        self.table = table
        self.beta = beta
        self.rng = rng
        self.mode = mode
        self.single = single
        self.pending: rl.Action | None = None
        self.states: list = []
        self.actions: list = []
        self.rewards: list = []
        self.times: list = []
        self.valid: list = []
        self.choices: dict[int, int] = {}

    def decide(self, view: inf.ServingView):
        n_models = len(view.profiles)
        if self.pending is None:
            if not view.free():
                return [], None
            s = rl.featurize(view.queue, view.busy_until, view.clock, view.profiles, view.batches,
                             self.agent.conf.L, view.tau, self.single)
            valid = None
            if self.agent.conf.mask_busy:
                valid = self._valid(view, n_models)
            a = self.agent.act(s, self.rng, self.mode, valid)
            self.valid.append(valid)
            self.states.append(s)
            self.actions.append(a)
            self.pending = rl.action_decode(a, n_models, view.batches)
        act = self.pending
        members = inf.mask_members(act.v, n_models)
        if any(view.busy_until[i] > view.clock for i in members):
            return [], None
        self.pending = None
        self.times.append(view.clock / view.tau)
        n = min(act.b, len(view.queue))
        return [inf.Dispatch(act.v, n, inf.padded_batch(n, view.batches))], None

    @staticmethod
    def _valid(view: inf.ServingView, n_models: int) -> np.ndarray:
        free = 0
        for i in range(n_models):
            if view.busy_until[i] <= view.clock:
                free |= 1 << i
        masks = np.arange(1, 1 << n_models)
        ok = (masks & ~free) == 0
        return np.repeat(ok, len(view.batches))

    def on_dispatch(self, d: inf.Dispatch, n_overdue: int, accuracy: float) -> None:
        self.rewards.append(rl.reward(d.mask, d.n, n_overdue, self.beta, self.table))
        self.choices[d.mask] = self.choices.get(d.mask, 0) + d.n

    def trajectory(self):
        # an action still pending at the end of the episode has no reward
        n = len(self.rewards)
        return np.array(self.states[:n]), np.array(self.actions[:n], dtype=int), np.array(self.rewards)

    def action_masks(self):
        """Masks the rewarded actions were drawn under, or None when masking is off."""
        if not self.agent.conf.mask_busy:
            return None
        return np.array(self.valid[:len(self.rewards)], dtype=bool).reshape(len(self.rewards), -1)

    def dispatch_times(self) -> np.ndarray:
        """Dispatch clock of each rewarded action, in units of tau."""
        return np.array(self.times[:len(self.rewards)])


@dataclass
class Scenario:
    profiles: list
    table: inf.EnsembleTable
    conf: ServingConf
    rates: RateParams

    @property
    def n_models(self) -> int:
        return len(self.profiles)


def trio_scenario(anchor: str = "upper", seed: int = 0, tau: float | None = None, rho: float = 0.3,
                  period: float | None = None) -> Scenario:
    """The three-model set, with the workload anchored at async or sync throughput."""
    profiles = inf.serving_trio()
    tau = 2.0 * max(p.c(64) for p in profiles) if tau is None else tau
    table = inf.build_ensemble_table(profiles, make_rng(seed, "ensemble-table"), rho=rho)
    conf = ServingConf(tau, period=period)
    ref = inf.async_throughput(profiles) if anchor == "upper" else inf.sync_throughput(profiles)
    return Scenario(profiles, table, conf, solve_rate_params(ref, conf.T))


def single_scenario(anchor: str = "upper", tau: float = SINGLE_TAU, period: float | None = None) -> Scenario:
    profiles = [inf.inception_v3()]
    table = inf.EnsembleTable({1: profiles[0].accuracy}, 1)
    conf = ServingConf(tau, period=period)
    p = profiles[0]
    ref = p.max_throughput() if anchor == "upper" else p.min_throughput()
    return Scenario(profiles, table, conf, solve_rate_params(ref, conf.T))


def make_baseline(kind: str, delta: float | None = None):
    if kind in ("greedy", "async"):
        return inf.GreedyDispatcher(delta, name=kind)
    if kind == "sync":
        return inf.SyncDispatcher(delta)
    raise ValueError(f"unknown dispatcher {kind!r}")


def run_baseline(scn: Scenario, kind: str, seed: int, episode: int = 0, trace: bool = False) -> EpisodeMetrics:
    return run_episode(make_baseline(kind), scn.profiles, scn.rates, scn.conf,
                       make_rng(seed, "arrivals", episode), scn.table, trace)


@dataclass
class TrainLog:
    rewards: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    overdue: list = field(default_factory=list)
    value_loss: list = field(default_factory=list)
    failed: int = 0


def new_agent(scn: Scenario, seed: int, conf: rl.RLConf | None = None) -> rl.ActorCritic:
    conf = conf or rl.RLConf()
    single = scn.n_models == 1
    nf = rl.feature_size(scn.n_models, len(scn.conf.batches), conf.L, single)
    na = rl.n_actions(scn.n_models, len(scn.conf.batches))
    return rl.ActorCritic.create(nf, na, make_rng(seed, "agent-init"), conf)


def train_agent(scn: Scenario, seed: int, episodes: int, beta: float = 1.0, conf: rl.RLConf | None = None,
                agent: rl.ActorCritic | None = None, callback=None) -> tuple[rl.ActorCritic, TrainLog]:
    """Train across ``episodes`` workload cycles, updating after each one."""
    agent = agent or new_agent(scn, seed, conf)
    log = TrainLog()
    single = scn.n_models == 1
    for ep in range(episodes):
        disp = RLDispatcher(agent, scn.table, beta, make_rng(seed, "policy-sample", ep), "sample", single)
        met = run_episode(disp, scn.profiles, scn.rates, scn.conf, make_rng(seed, "arrivals", 1 + ep), scn.table)
        S, A, R = disp.trajectory()
        try:
            # per-step rewards scaled to at most 1 keep the critic well conditioned
            stats = agent.update(S, A, R / max(scn.conf.batches), disp.dispatch_times(), disp.action_masks())
            log.value_loss.append(stats.get("value_loss", 0.0))
        except NonFinite:
            log.failed += 1
        log.rewards.append(float(R.sum()))
        log.accuracy.append(met.mean_accuracy())
        log.overdue.append(met.overdue_per_s())
        if callback is not None:
            callback(ep, met, log)
    return agent, log


def evaluate_agent(scn: Scenario, agent: rl.ActorCritic, seed: int, beta: float = 1.0, mode: str = "greedy",
                   trace: bool = False) -> EpisodeMetrics:
    """Frozen-policy episode on the held-out evaluation arrivals (episode 0)."""
    disp = RLDispatcher(agent, scn.table, beta, make_rng(seed, "policy-eval"), mode, scn.n_models == 1)
    met = run_episode(disp, scn.profiles, scn.rates, scn.conf, make_rng(seed, "arrivals", 0), scn.table, trace)
    met.choices = disp.choices
    return met
