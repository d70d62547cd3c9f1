"""Simulated tuning runs: wires advisor, master, store and workers together."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

from . import hyperspace as hs
from . import messages as m
from .advisor import make_advisor
from .paramstore import ParamStore
from .rng import make_rng
from .study import StudyConf, StudyResult, WarmStarter, run_study
from .transport import MemoryHub, SocketEndpoint, SocketHub
from .worker import SimCluster, SyntheticTask, WorkerConf, run_blocking, signature, worker_process


@dataclass(frozen=True)
class TaskConf:
    p_cap: float = 0.95
    noise_sd: float = 0.005
    lam: float = 0.5
    kappa_min: float = 2.0
    kappa_max: float = 20.0
    width: float = 0.4
    seed: int | None = None


@dataclass
class TuneOutcome:
    result: StudyResult
    trials: list = field(default_factory=list)
    progress: list = field(default_factory=list)
    store: ParamStore | None = None

    @property
    def best_p(self) -> float:
        return self.result.best_p

    def time_to(self, target: float) -> float:
        """Simulated time of the first report reaching ``target`` (inf if none)."""
        for row in self.progress:
            if row["p"] >= target:
                return row["time"]
        return math.inf


def simulate_study(
    space: hs.HyperSpace,
    seed: int,
    mode: str = "study",
    advisor: str = "random",
    workers: int = 4,
    conf: StudyConf | None = None,
    task: TaskConf | None = None,
    worker_conf: WorkerConf | None = None,
    bayes: dict | None = None,
    store: ParamStore | None = None,
    transport: str = "sim",
    listen: str = "127.0.0.1:0",
) -> TuneOutcome:
    """Run one Study or CoStudy over simulated workers on a virtual clock.

    The task, advisor, warm-start chooser and epoch noise each draw from
    their own stream of ``seed``, so a study/costudy pair with the same seed
    sees the same task and (for random search) the same trial sequence.

    With ``transport="socket"`` the workers run as threads speaking the
    frame codec over local TCP and times are wall-clock seconds; message
    order, and hence the result, then depends on thread scheduling.
    """
    conf = conf or StudyConf()
    task = task or TaskConf()
    wconf = worker_conf or WorkerConf()
    if mode == "costudy":
        # early stopping is the master's job in collaborative mode
        wconf = WorkerConf(wconf.max_epochs, wconf.epoch_s, conf.patience, conf.min_improve, False)
    else:
        wconf = WorkerConf(wconf.max_epochs, wconf.epoch_s, conf.patience, conf.min_improve, wconf.local_early_stop)
    stask = SyntheticTask(
        space, seed if task.seed is None else task.seed, task.p_cap, task.noise_sd, task.lam,
        task.kappa_min, task.kappa_max, task.width,
    )
    adv = make_advisor(advisor, space, make_rng(seed, "advisor"), **(bayes or {}))
    store = store if store is not None else ParamStore(f"study-{seed}")
    names = [f"w{i}" for i in range(workers)]
    init = None
    if mode == "costudy":
        init = WarmStarter(store, conf.schedule, make_rng(seed, "alpha-greedy"), signature)
    if transport == "sim":
        hub = MemoryHub()
        procs = {w: worker_process(w, hub.connect(w), stask, wconf, store) for w in names}
        cluster = SimCluster(hub, procs)
        result = run_study(conf, adv, cluster, mode, init)
        cluster.run_until_idle()
    elif transport == "socket":
        result = _socket_study(conf, adv, mode, init, names, stask, wconf, store, listen)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    progress = []
    best = -math.inf
    for entry in result.log:
        msg = entry.msg
        if msg.type == m.K_REPORT:
            best = max(best, msg.p)
            progress.append({
                "time": entry.time, "worker": msg.worker, "trial_id": msg.trial.trial_id,
                "p": msg.p, "best_p": best,
            })
    trials = []
    for tid, rec in sorted(adv.records.items()):
        trials.append({
            "trial_id": tid, "worker": rec.worker, "origin": result.origins.get(tid, "random"),
            "p": rec.p, "epochs": rec.epochs_used,
        })
    return TuneOutcome(result, trials, progress, store)


def _socket_study(conf, adv, mode, init, names, stask, wconf, store, listen) -> StudyResult:
    hub = SocketHub(listen)
    threads = []
    try:
        for w in names:
            ep = SocketEndpoint(hub.address, w)
            t = threading.Thread(target=run_blocking, args=(worker_process(w, ep, stask, wconf, store), ep), daemon=True)
            t.start()
            threads.append((t, ep))
        result = run_study(conf, adv, hub, mode, init)
        for t, ep in threads:
            t.join(timeout=10.0)
            ep.close()
    finally:
        hub.close()
    return result
