"""Run configuration: TOML (or JSON) sections mapped onto typed dataclasses.

Every section is a dataclass whose fields carry their defaults.  Loading
rejects unknown keys, type-checks each value and collects every violation
before raising, so one run of the loader reports all problems at once.
``echo`` produces a normalized JSON text that loads back to an equal config.
"""

from __future__ import annotations

import dataclasses
import json
import re
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import hyperspace as hs
from . import inference as inf
from .errors import ParseError, RafikiError, ValidationError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

PRESET_DIR = Path(__file__).with_name("presets")


@dataclass
class SpaceSection:
    preset: str = "table1"  # "table1" | "optimizer"; ignored when knobs are given
    knobs: list = field(default_factory=list)


@dataclass
class TaskSection:
    p_cap: float = 0.95
    kappa_min: float = 2.0
    kappa_max: float = 20.0
    noise_sd: float = 0.005
    lam: float = 0.5
    width: float = 0.4
    seed: int | None = None  # defaults to the run seed
    max_epochs: int = 10
    epoch_s: float = 1.0


@dataclass
class BayesSection:
    lengthscale: float = 0.2
    signal_var: float = 1.0
    noise_var: float = 1e-4
    n_init: int = 5
    n_cand: int = 1000


@dataclass
class AdvisorSection:
    kind: str = "random"
    bayes: BayesSection = field(default_factory=BayesSection)


@dataclass
class StudySection:
    mode: str = "study"  # "study" | "costudy"
    workers: int = 4
    max_trials: int = 30
    delta: float = 0.005
    patience: int = 5
    min_improve: float = 1e-3
    alpha0: float = 0.5
    alpha_kind: str = "exponential"
    alpha_rate: float = 0.95
    alpha_step: float = 0.01
    alpha_floor: float = 0.05
    stop_at_p: float | None = None
    time_budget: float | None = None
    share_store: bool = False
    transport: str = "sim"  # "sim" | "socket"
    listen: str = "127.0.0.1:0"


@dataclass
class ModelsSection:
    preset: str = "trio"  # "trio" | "single" | "custom"
    r_upper: float = 572.0
    r_lower: float = 128.0
    records: list = field(default_factory=list)


@dataclass
class EnsembleSection:
    table: typing.Any = "derive"  # "derive" or {"m1+m2": accuracy, ...}
    rho: float = 0.3
    n_examples: int = 20000
    n_labels: int = 10
    seed: int | None = None


@dataclass
class RLSection:
    hidden: int = 64
    gamma: float = 0.9
    lr_policy: float = 0.1
    lr_value: float = 0.001
    momentum: float = 0.9
    normalize_advantage: bool = True
    updates_per_episode: int = 8
    L: int = 64
    discount: str = "step"
    mask_busy: bool = True
    episodes: int = 50
    beta: float = 1.0
    eval_mode: str = "greedy"


@dataclass
class WorkloadSection:
    dispatcher: str = "greedy"  # greedy | sync | async | rl
    anchor: str = "upper"  # "upper" | "lower"
    ref: float | None = None  # explicit reference rate, overrides anchor
    tau: float | None = None  # defaults to 2 * max c(max batch)
    delta: float | None = None  # defaults to 0.1 * tau
    batches: list = field(default_factory=lambda: [16, 32, 48, 64])
    period: float | None = None
    duration: float | None = None
    window: float | None = None
    dt: float | None = None
    capacity: int | None = None
    noise_sd: float = 0.1


@dataclass
class OutputSection:
    dir: str = "runs/default"
    trace: bool = False
    plots: bool = True


@dataclass
class SweepSection:
    workers: list = field(default_factory=list)  # tune: one run per worker count
    beta: list = field(default_factory=list)  # serve-sim: one run per beta
    target_frac: float = 0.9  # time-to-target is measured at target_frac * p_cap


@dataclass
class RunConfig:
    seed: int = 0
    repeats: int = 1
    variable: str = ""  # the axis a comparison is allowed to differ on
    space: SpaceSection = field(default_factory=SpaceSection)
    task: TaskSection = field(default_factory=TaskSection)
    advisor: AdvisorSection = field(default_factory=AdvisorSection)
    study: StudySection = field(default_factory=StudySection)
    models: ModelsSection = field(default_factory=ModelsSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    rl: RLSection = field(default_factory=RLSection)
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    output: OutputSection = field(default_factory=OutputSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


CHOICES = {
    "space.preset": ("table1", "optimizer"),
    "advisor.kind": ("random", "bayes"),
    "study.mode": ("study", "costudy"),
    "study.alpha_kind": ("exponential", "linear"),
    "study.transport": ("sim", "socket"),
    "models.preset": ("trio", "single", "custom"),
    "rl.discount": ("step", "time"),
    "rl.eval_mode": ("greedy", "sample"),
    "workload.dispatcher": ("greedy", "sync", "async", "rl"),
    "workload.anchor": ("upper", "lower"),
}

POSITIVE = {
    "task.p_cap", "task.width", "task.max_epochs", "advisor.bayes.lengthscale", "advisor.bayes.signal_var",
    "advisor.bayes.n_cand", "study.workers", "study.max_trials", "study.patience", "models.r_upper", "models.r_lower",
    "ensemble.n_examples", "ensemble.n_labels", "rl.hidden", "rl.updates_per_episode", "rl.L", "rl.episodes",
    "workload.ref", "workload.tau", "workload.period", "workload.duration", "workload.window", "workload.dt",
    "workload.capacity", "repeats", "sweep.target_frac",
}

NON_NEGATIVE = {
    "task.noise_sd", "task.lam", "task.epoch_s", "advisor.bayes.noise_var", "advisor.bayes.n_init", "study.delta",
    "study.min_improve", "study.alpha_rate", "study.alpha_step", "study.alpha_floor", "study.time_budget",
    "rl.lr_policy", "rl.lr_value", "rl.beta", "workload.delta", "workload.noise_sd", "seed", "ensemble.rho",
}

UNIT_INTERVAL = {"study.alpha0", "ensemble.rho", "rl.momentum", "sweep.target_frac", "study.stop_at_p"}


# -- parsing -------------------------------------------------------------------------------


def _toml_line(err: Exception) -> int | None:
    line = getattr(err, "lineno", None)
    if line is not None:
        return line
    m = re.search(r"line (\d+)", str(err))
    return int(m.group(1)) if m else None


def parse_text(text: str, fmt: str = "toml") -> dict:
    """Raw mapping from TOML or JSON text; ``ParseError`` carries the line."""
    try:
        if fmt == "json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from None
    except tomllib.TOMLDecodeError as e:
        raise ParseError(str(e).split(" (at line")[0], line=_toml_line(e)) from None
    if not isinstance(data, dict):
        raise ParseError("top level must be a table", line=1)
    return data


def _format_of(path: Path, text: str) -> str:
    if path.suffix.lower() == ".json":
        return "json"
    if path.suffix.lower() == ".toml":
        return "toml"
    return "json" if text.lstrip().startswith("{") else "toml"


def read_raw(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    return parse_text(text, _format_of(path, text))


# -- type checking ---------------------------------------------------------------------------


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _optional(hint) -> tuple[typing.Any, bool]:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if len(args) == 1 and len(typing.get_args(hint)) == 2:
            return args[0], True
    return hint, False


def _coerce(value, hint, where: str, problems: list):
    base, optional = _optional(hint)
    if value is None:
        if optional:
            return None
        problems.append(f"{where}: must not be null")
        return None
    if base is typing.Any:
        return value
    if base is bool:
        if not isinstance(value, bool):
            problems.append(f"{where}: expected a boolean, got {value!r}")
        return value
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer, got {value!r}")
        return value
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected a number, got {value!r}")
            return value
        return float(value)
    if base is str:
        if not isinstance(value, str):
            problems.append(f"{where}: expected a string, got {value!r}")
        return value
    if base is list:
        if not isinstance(value, list):
            problems.append(f"{where}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, data, prefix: str, problems: list):
    if not isinstance(data, dict):
        problems.append(f"{prefix or 'config'}: expected a table, got {data!r}")
        return cls()
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            problems.append(f"{prefix + '.' if prefix else ''}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        where = f"{prefix + '.' if prefix else ''}{f.name}"
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, data[f.name], where, problems)
        else:
            kwargs[f.name] = _coerce(data[f.name], hint, where, problems)
    return cls(**kwargs)


def _walk(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        path = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            yield from _walk(v, path + ".")
        else:
            yield path, v


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_ranges(cfg: RunConfig, problems: list) -> None:
    for path, v in _walk(cfg):
        if path in CHOICES and v not in CHOICES[path]:
            problems.append(f"{path}: {v!r} is not one of {list(CHOICES[path])}")
        if not _number(v):
            continue
        if path in POSITIVE and not v > 0:
            problems.append(f"{path}: must be > 0, got {v!r}")
        if path in NON_NEGATIVE and not v >= 0:
            problems.append(f"{path}: must be >= 0, got {v!r}")
        if path in UNIT_INTERVAL and not 0 <= v <= 1:
            problems.append(f"{path}: must lie in [0, 1], got {v!r}")
    t = cfg.task
    if _number(t.kappa_min) and _number(t.kappa_max) and not 1.0 <= t.kappa_min <= t.kappa_max:
        problems.append("task.kappa_min/kappa_max: need 1 <= kappa_min <= kappa_max")
    if _number(cfg.rl.gamma) and not 0.0 <= cfg.rl.gamma < 1.0:
        problems.append("rl.gamma: must lie in [0, 1)")
    if _number(t.p_cap) and t.p_cap > 1:
        problems.append("task.p_cap: must be <= 1")


def _check_space(cfg: RunConfig, problems: list) -> None:
    knobs = cfg.space.knobs
    if not isinstance(knobs, list) or not knobs:
        return
    try:
        space = hs.HyperSpace(tuple(hs.knob_from_record(r) for r in knobs), dict(hs.DEFAULT_HOOKS))
    except (RafikiError, KeyError, TypeError, ValueError) as e:
        problems.append(f"space.knobs: {e}")
        return
    for v in hs.validate(space):
        problems.append(f"space.knobs: {v}")


def _check_models(cfg: RunConfig, problems: list) -> list[str]:
    m = cfg.models
    names: list[str] = []
    if m.preset == "custom":
        if not isinstance(m.records, list) or not m.records:
            problems.append("models.records: a custom model set needs at least one record")
            return names
        for i, rec in enumerate(m.records):
            where = f"models.records[{i}]"
            if not isinstance(rec, dict):
                problems.append(f"{where}: expected a table")
                continue
            extra = set(rec) - {"name", "family", "accuracy", "memory_mb", "latency"}
            for k in sorted(extra):
                problems.append(f"{where}.{k}: unknown key")
            for k in ("name", "accuracy", "latency"):
                if k not in rec:
                    problems.append(f"{where}.{k}: missing")
            name = rec.get("name")
            if isinstance(name, str):
                if name in names:
                    problems.append(f"{where}.name: duplicate model name {name!r}")
                names.append(name)
            acc = rec.get("accuracy")
            if "accuracy" in rec and not (_number(acc) and 0 <= acc <= 1):
                problems.append(f"{where}.accuracy: must lie in [0, 1]")
            rows = rec.get("latency", [])
            if not isinstance(rows, list) or not all(isinstance(r, list) and len(r) == 2 and all(_number(x) for x in r) for r in rows):
                problems.append(f"{where}.latency: expected rows [batch, seconds]")
            else:
                have = {int(b) for b, _ in rows}
                missing = [b for b in cfg.workload.batches if b not in have]
                if missing:
                    problems.append(f"{where}.latency: no row for batch sizes {missing}")
    elif m.preset == "trio":
        names = [p.name for p in inf.serving_trio()]
    else:
        names = ["inception_v3"]
    return names


def _check_ensemble(cfg: RunConfig, names: list[str], problems: list) -> None:
    table = cfg.ensemble.table
    if table == "derive":
        return
    if not isinstance(table, dict):
        problems.append("ensemble.table: expected \"derive\" or a table of member sets")
        return
    for key, acc in table.items():
        for part in str(key).split("+"):
            if part.strip() not in names:
                problems.append(f"ensemble.table.{key}: unknown model {part.strip()!r}")
        if not (_number(acc) and 0 <= acc <= 1):
            problems.append(f"ensemble.table.{key}: accuracy must lie in [0, 1]")
    want = (1 << len(names)) - 1
    if len(table) < want:
        problems.append(f"ensemble.table: {len(table)} entries given, {want} member sets needed")


def _check_workload(cfg: RunConfig, problems: list) -> None:
    w = cfg.workload
    if isinstance(w.batches, list):
        if not w.batches or not all(isinstance(b, int) and not isinstance(b, bool) and b > 0 for b in w.batches):
            problems.append("workload.batches: expected positive integers")
        elif sorted(set(w.batches)) != w.batches:
            problems.append("workload.batches: must be strictly increasing")
    if isinstance(cfg.sweep.workers, list) and not all(isinstance(x, int) and x > 0 for x in cfg.sweep.workers):
        problems.append("sweep.workers: expected positive integers")
    if isinstance(cfg.sweep.beta, list) and not all(_number(x) and x >= 0 for x in cfg.sweep.beta):
        problems.append("sweep.beta: expected non-negative numbers")


def from_dict(data: dict) -> RunConfig:
    """Validated config from a raw mapping; raises ``ValidationError`` with every violation."""
    problems: list[str] = []
    cfg = _build(RunConfig, data, "", problems)
    _check_ranges(cfg, problems)
    _check_space(cfg, problems)
    _check_workload(cfg, problems)
    names = _check_models(cfg, problems)
    _check_ensemble(cfg, names, problems)
    if problems:
        raise ValidationError(problems)
    return cfg


def load_config(path) -> RunConfig:
    return from_dict(read_raw(path))


def loads(text: str, fmt: str = "toml") -> RunConfig:
    return from_dict(parse_text(text, fmt))


def echo(cfg: RunConfig) -> str:
    """Normalized JSON of the effective config (all defaults filled)."""
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def preset_names() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))


def preset_path(name: str) -> Path:
    path = PRESET_DIR / f"{name}.toml"
    if not path.is_file():
        raise ParseError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return path


def apply_overrides(data: dict, overrides) -> dict:
    """``section.key=value`` strings applied on top of a raw mapping; values parse as TOML."""
    out = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ParseError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw.strip()
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ParseError(f"override {item!r} descends into a non-table", field=key)
        node[parts[-1]] = value
    return out
