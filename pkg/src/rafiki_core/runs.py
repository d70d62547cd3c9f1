"""Config-driven runs: build the components, execute, and write a run directory."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from . import __version__
from . import hyperspace as hs
from . import inference as inf
from . import rl
from . import serving as sv
from .config import RunConfig, echo
from .paramstore import AlphaSchedule, ParamStore
from .rng import make_rng
from .study import StudyConf
from .tuning import TaskConf, simulate_study
from .worker import WorkerConf
from .workload import ServingConf, run_episode, solve_rate_params

# -- shared output helpers ---------------------------------------------------------------


def write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def prepare_dir(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(echo(cfg), encoding="utf-8")
    write_json(out / "run.json", {"command": command, "seed": cfg.seed, "repeats": cfg.repeats, "version": __version__})


def seeds_of(cfg: RunConfig) -> list[int]:
    return [cfg.seed + r for r in range(cfg.repeats)]


# -- tuning -----------------------------------------------------------------------------------


def build_space(cfg: RunConfig) -> hs.HyperSpace:
    if cfg.space.knobs:
        return hs.space_from_records(cfg.space.knobs)
    return hs.table1_space() if cfg.space.preset == "table1" else hs.optimizer_space()


def build_task(cfg: RunConfig) -> tuple[TaskConf, WorkerConf]:
    t = cfg.task
    task = TaskConf(t.p_cap, t.noise_sd, t.lam, t.kappa_min, t.kappa_max, t.width, t.seed)
    return task, WorkerConf(max_epochs=t.max_epochs, epoch_s=t.epoch_s)


def build_study_conf(cfg: RunConfig) -> StudyConf:
    s = cfg.study
    sched = AlphaSchedule(s.alpha0, s.alpha_kind, s.alpha_rate, s.alpha_step, s.alpha_floor)
    return StudyConf(s.max_trials, s.delta, s.patience, s.min_improve, s.alpha0, sched, s.stop_at_p, s.time_budget)


TRIAL_FIELDS = ("seed", "workers", "trial_id", "worker", "origin", "p", "epochs")
PROGRESS_FIELDS = ("seed", "workers", "time", "worker", "trial_id", "p", "best_p")
SCALING_FIELDS = ("seed", "workers", "target", "time_to_target", "speedup", "best_p")


def cmd_tune(cfg: RunConfig, out: Path, trace: bool = False) -> dict:
    """Study or CoStudy for each seed (and worker count when swept)."""
    prepare_dir(out, cfg, "tune")
    space = build_space(cfg)
    task, wconf = build_task(cfg)
    conf = build_study_conf(cfg)
    bayes = dict(vars(cfg.advisor.bayes))
    counts = cfg.sweep.workers or [cfg.study.workers]
    target = cfg.sweep.target_frac * cfg.task.p_cap
    shared = ParamStore("shared") if cfg.study.share_store else None
    trials, progress, best, scaling = [], [], [], []
    for seed in seeds_of(cfg):
        base_time = None
        for n in counts:
            res = simulate_study(space, seed, cfg.study.mode, cfg.advisor.kind, n, conf, task, wconf, bayes,
                                 store=shared, transport=cfg.study.transport, listen=cfg.study.listen)
            trials += [{"seed": seed, "workers": n, **row} for row in res.trials]
            progress += [{"seed": seed, "workers": n, **row} for row in res.progress]
            bt = res.result.best_trial
            best.append({"seed": seed, "workers": n, "trial_id": bt.trial_id, "p": res.best_p,
                         "assignment": bt.assignment, "origin": str(bt.origin), "end_time": res.result.end_time})
            if trace:
                with open(out / f"audit_s{seed}_w{n}.jsonl", "w", encoding="utf-8") as fh:
                    for e in res.result.log:
                        fh.write(json.dumps({"t": e.time, "type": e.msg.type, "worker": e.msg.worker,
                                             "directives": [d.kind for d in e.directives]}) + "\n")
            if cfg.sweep.workers:
                tt = res.time_to(target)
                base_time = tt if base_time is None else base_time
                speedup = base_time / tt if math.isfinite(tt) and tt > 0 and math.isfinite(base_time) else ""
                scaling.append({"seed": seed, "workers": n, "target": target,
                                "time_to_target": tt if math.isfinite(tt) else "", "speedup": speedup,
                                "best_p": res.best_p})
    write_csv(out / "trials.csv", TRIAL_FIELDS, trials)
    write_csv(out / "progress.csv", PROGRESS_FIELDS, progress)
    write_json(out / "best.json", best if len(best) > 1 else best[0])
    if scaling:
        write_csv(out / "scaling.csv", SCALING_FIELDS, scaling)
    if cfg.output.plots:
        from .report import plot_tune
        plot_tune(out, progress, scaling)
    return {"best": best, "scaling": scaling}


# -- serving ----------------------------------------------------------------------------------


def build_profiles(cfg: RunConfig) -> list[inf.ModelProfile]:
    m = cfg.models
    batches = tuple(cfg.workload.batches)
    if m.preset == "trio":
        return inf.serving_trio(m.r_upper, m.r_lower, batches)
    if m.preset == "single":
        return [inf.inception_v3(batches)]
    return [
        inf.ModelProfile(r["name"], r.get("family", r["name"]), float(r["accuracy"]),
                         {int(b): float(c) for b, c in r["latency"]}, float(r.get("memory_mb", 0.0)))
        for r in m.records
    ]


def build_table(cfg: RunConfig, profiles, seed: int) -> inf.EnsembleTable:
    e = cfg.ensemble
    if isinstance(e.table, dict):
        return inf.table_from_records(e.table, [p.name for p in profiles])
    if len(profiles) == 1:
        return inf.EnsembleTable({1: profiles[0].accuracy}, 1)
    rng = make_rng(seed if e.seed is None else e.seed, "ensemble-table")
    return inf.build_ensemble_table(profiles, rng, e.n_examples, e.n_labels, e.rho)


def build_scenario(cfg: RunConfig, seed: int) -> sv.Scenario:
    w = cfg.workload
    profiles = build_profiles(cfg)
    bmax = max(w.batches)
    if w.tau is not None:
        tau = w.tau
    elif cfg.models.preset == "single":
        tau = sv.SINGLE_TAU
    else:
        tau = 2.0 * max(p.c(bmax) for p in profiles)
    conf = ServingConf(tau, tuple(w.batches), w.period, w.duration, w.window, w.dt, w.capacity, w.noise_sd)
    if w.ref is not None:
        ref = w.ref
    elif len(profiles) == 1:
        p = profiles[0]
        ref = p.max_throughput() if w.anchor == "upper" else p.min_throughput()
    else:
        ref = inf.async_throughput(profiles) if w.anchor == "upper" else inf.sync_throughput(profiles)
    return sv.Scenario(profiles, build_table(cfg, profiles, seed), conf, solve_rate_params(ref, conf.T))


def build_rl_conf(cfg: RunConfig) -> rl.RLConf:
    r = cfg.rl
    return rl.RLConf(r.hidden, r.gamma, r.lr_policy, r.lr_value, r.momentum, r.normalize_advantage,
                     r.updates_per_episode, r.L, r.discount, r.mask_busy)


SUMMARY_FIELDS = ("seed", "beta", "dispatcher", "mean_accuracy", "overdue_per_s", "dropped_per_s", "arriving_per_s",
                  "low_rate_accuracy", "low_rate_overdue_per_s", "conservation_ok")
TRAIN_FIELDS = ("seed", "beta", "episode", "reward", "mean_accuracy", "overdue_per_s")


def serve_once(cfg: RunConfig, seed: int, beta: float, trace: bool = False):
    """One scenario run: baseline evaluation, or RL training plus frozen evaluation."""
    scn = build_scenario(cfg, seed)
    kind = cfg.workload.dispatcher
    training, agent = [], None
    if kind == "rl":
        agent, log = sv.train_agent(scn, seed, cfg.rl.episodes, beta, build_rl_conf(cfg))
        training = [{"seed": seed, "beta": beta, "episode": i, "reward": r, "mean_accuracy": a, "overdue_per_s": o}
                    for i, (r, a, o) in enumerate(zip(log.rewards, log.accuracy, log.overdue))]
        met = sv.evaluate_agent(scn, agent, seed, beta, cfg.rl.eval_mode, trace)
    else:
        disp = sv.make_baseline(kind, cfg.workload.delta)
        met = run_episode(disp, scn.profiles, scn.rates, scn.conf, make_rng(seed, "arrivals", 0), scn.table, trace)
    return met, training, agent


def summary_row(seed, beta, kind, met) -> dict:
    low = met.low_rate_mask()
    return {
        "seed": seed, "beta": beta, "dispatcher": kind, "mean_accuracy": met.mean_accuracy(),
        "overdue_per_s": met.overdue_per_s(), "dropped_per_s": met.dropped_per_s(),
        "arriving_per_s": met.arriving_per_s(), "low_rate_accuracy": met.mean_accuracy(low),
        "low_rate_overdue_per_s": met.overdue_per_s(low),
        "conservation_ok": int(not met.conservation_errors().any()),
    }


def cmd_serve_sim(cfg: RunConfig, out: Path, trace: bool = False) -> dict:
    prepare_dir(out, cfg, "serve-sim")
    kind = cfg.workload.dispatcher
    betas = cfg.sweep.beta or [cfg.rl.beta]
    summary, training, series = [], [], {}
    for seed in seeds_of(cfg):
        for beta in betas:
            met, tr, agent = serve_once(cfg, seed, beta, trace or cfg.output.trace)
            tag = f"s{seed}_b{beta:g}"
            met.write_csv(out / f"episode_{tag}.csv")
            if met.trace is not None:
                met.write_trace(out / f"trace_{tag}.jsonl")
            if agent is not None:
                (out / f"params_{tag}.bin").write_bytes(agent.to_bytes())
            summary.append(summary_row(seed, beta, kind, met))
            training += tr
            series[tag] = met
    write_csv(out / "summary.csv", SUMMARY_FIELDS, summary)
    if training:
        write_csv(out / "training.csv", TRAIN_FIELDS, training)
    if cfg.output.plots:
        from .report import plot_serve
        plot_serve(out, series, training)
    return {"summary": summary}
