"""Declarative hyper-parameter spaces.

A space is an ordered list of knobs.  Range knobs cover a half-open interval
``[min, max)``; choice knobs pick one of a list of candidates.  Knobs may
depend on other knobs: dependencies are drawn first, and a knob's hooks see
the partial assignment built so far.

Hook contract
-------------
``post_hook(assignment_so_far, value) -> value`` adjusts a freshly drawn
value.  ``pre_hook(assignment_so_far, domain) -> domain`` may narrow the
domain before drawing.  Hooks must be pure and must stay inside the knob's
declared domain; :func:`sample` checks every hook result and raises
:class:`InvalidDomain` naming the offending hook otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import InvalidDomain, SpaceError

DTYPES = ("float", "int", "str")
_DTYPE_ALIASES = {"float": "float", "real": "float", "int": "int", "integer": "int", "str": "str", "string": "str"}

Hook = Callable[[Mapping[str, Any], Any], Any]


@dataclass(frozen=True)
class Range:
    min: float
    max: float
    dtype: str = "float"
    log: bool = False

    def contains(self, value) -> bool:
        if self.dtype == "float":
            return isinstance(value, (float, int)) and self.min <= value < self.max
        if self.dtype == "str":
            try:
                value = int(value)
            except (TypeError, ValueError):
                return False
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            return False
        return self.min <= value < self.max


@dataclass(frozen=True)
class Choice:
    values: tuple

    def contains(self, value) -> bool:
        return value in self.values


@dataclass(frozen=True)
class KnobDef:
    name: str
    domain: Range | Choice
    depends: tuple[str, ...] = ()
    pre_hook: str | None = None
    post_hook: str | None = None

    @property
    def width(self) -> int:
        """Number of coordinates this knob occupies in the encoded vector."""
        return len(self.domain.values) if isinstance(self.domain, Choice) else 1


@dataclass(frozen=True)
class Origin:
    """How a trial's model parameters are initialised."""

    kind: str = "random"
    source: int | None = None

    @property
    def is_warm(self) -> bool:
        return self.kind == "warm"

    def __str__(self) -> str:
        return "random" if self.kind == "random" else f"warm:{self.source}"


RANDOM_INIT = Origin()


def warm(source: int) -> Origin:
    return Origin("warm", int(source))


@dataclass(frozen=True)
class Trial:
    trial_id: int
    assignment: dict
    origin: Origin = RANDOM_INIT

    def with_origin(self, origin: Origin) -> "Trial":
        return Trial(self.trial_id, self.assignment, origin)


# -- violations reported by validate() ---------------------------------------


@dataclass(frozen=True)
class CycleError:
    knobs: tuple[str, ...]

    def __str__(self):
        return f"dependency cycle: {' -> '.join(self.knobs + self.knobs[:1])}"


@dataclass(frozen=True)
class UnknownKnob:
    name: str
    referenced_by: str = ""

    def __str__(self):
        return f"unknown knob {self.name!r} in depends of {self.referenced_by!r}"


@dataclass(frozen=True)
class MissingHook:
    hook: str
    knob: str

    def __str__(self):
        return f"hook {self.hook!r} used by {self.knob!r} is not registered"


@dataclass(frozen=True)
class DuplicateKnob:
    name: str

    def __str__(self):
        return f"knob {self.name!r} declared twice"


# -- construction -------------------------------------------------------------


def define_range(name, min, max, dtype="float", depends=(), post_hook=None, pre_hook=None, log=False) -> KnobDef:
    kind = _DTYPE_ALIASES.get(dtype if isinstance(dtype, str) else getattr(dtype, "__name__", str(dtype)))
    if kind is None:
        raise InvalidDomain(f"{name}: unknown dtype {dtype!r}")
    if not (min < max):
        raise InvalidDomain(f"{name}: range requires min < max, got [{min}, {max})")
    if kind != "float":
        if int(min) != min or int(max) != max:
            raise InvalidDomain(f"{name}: integer range bounds must be integral")
        min, max = int(min), int(max)
    if log and (kind != "float" or min <= 0):
        raise InvalidDomain(f"{name}: log scale needs a positive float range")
    return KnobDef(name, Range(min, max, kind, bool(log)), tuple(depends), pre_hook, post_hook)


def define_choice(name, values, depends=(), post_hook=None, pre_hook=None) -> KnobDef:
    values = tuple(values)
    if not values:
        raise InvalidDomain(f"{name}: empty choice list")
    if len(set(values)) != len(values):
        raise InvalidDomain(f"{name}: duplicate candidates in {list(values)}")
    return KnobDef(name, Choice(values), tuple(depends), pre_hook, post_hook)


@dataclass(frozen=True)
class HyperSpace:
    knobs: tuple[KnobDef, ...]
    hooks: Mapping[str, Hook] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "knobs", tuple(self.knobs))

    @property
    def names(self) -> list[str]:
        return [k.name for k in self.knobs]

    def knob(self, name: str) -> KnobDef:
        for k in self.knobs:
            if k.name == name:
                return k
        raise KeyError(name)

    @property
    def dim(self) -> int:
        return sum(k.width for k in self.knobs)

    def checked(self) -> "HyperSpace":
        problems = validate(self)
        if problems:
            raise SpaceError(problems)
        return self

    def enumerate(self) -> list[dict] | None:
        """All assignments of a space made only of finite knobs, or None.

        Hooks are ignored; finite enumeration is only offered for hook-free
        spaces.
        """
        axes = []
        for k in self.knobs:
            if k.pre_hook or k.post_hook:
                return None
            d = k.domain
            if isinstance(d, Choice):
                axes.append(list(d.values))
            elif d.dtype == "float":
                return None
            else:
                vals = list(range(d.min, d.max))
                axes.append([str(v) for v in vals] if d.dtype == "str" else vals)
        out = [{}]
        for k, vals in zip(self.knobs, axes):
            out = [dict(a, **{k.name: v}) for a in out for v in vals]
        return out


def validate(space: HyperSpace) -> list:
    """Return every violation in ``space``; an empty list means valid."""
    problems: list = []
    seen: set[str] = set()
    for k in space.knobs:
        if k.name in seen:
            problems.append(DuplicateKnob(k.name))
        seen.add(k.name)
    for k in space.knobs:
        for dep in k.depends:
            if dep not in seen:
                problems.append(UnknownKnob(dep, k.name))
        for hook in (k.pre_hook, k.post_hook):
            if hook is not None and hook not in space.hooks:
                problems.append(MissingHook(hook, k.name))
    problems.extend(_find_cycles(space))
    return problems


def _find_cycles(space: HyperSpace) -> list[CycleError]:
    graph = {k.name: [d for d in k.depends if d in {x.name for x in space.knobs}] for k in space.knobs}
    color = dict.fromkeys(graph, 0)
    stack: list[str] = []
    cycles: list[CycleError] = []
    reported: set[frozenset] = set()

    def visit(node):
        color[node] = 1
        stack.append(node)
        for nxt in graph[node]:
            if color[nxt] == 1:
                cyc = tuple(stack[stack.index(nxt):])
                key = frozenset(cyc)
                if key not in reported:
                    reported.add(key)
                    # report starting from the earliest declared member
                    order = space.names
                    start = min(range(len(cyc)), key=lambda i: order.index(cyc[i]))
                    cycles.append(CycleError(cyc[start:] + cyc[:start]))
            elif color[nxt] == 0:
                visit(nxt)
        stack.pop()
        color[node] = 2

    for name in graph:
        if color[name] == 0:
            visit(name)
    return cycles


def topological_order(space: HyperSpace) -> list[KnobDef]:
    """Knobs with every dependency before its dependents.

    Among knobs that are ready at the same time, declaration order wins, so
    the result is stable.
    """
    remaining = list(space.knobs)
    done: set[str] = set()
    order: list[KnobDef] = []
    while remaining:
        for i, k in enumerate(remaining):
            if all(d in done for d in k.depends):
                order.append(k)
                done.add(k.name)
                del remaining[i]
                break
        else:
            raise SpaceError(_find_cycles(space) or ["unsatisfiable dependencies"])
    return order


# -- sampling -----------------------------------------------------------------


def _draw(domain: Range | Choice, rng: np.random.Generator):
    if isinstance(domain, Choice):
        return domain.values[int(rng.integers(len(domain.values)))]
    if domain.dtype == "float":
        if domain.log:
            lo, hi = math.log(domain.min), math.log(domain.max)
            v = math.exp(rng.uniform(lo, hi))
        else:
            v = float(rng.uniform(domain.min, domain.max))
        # guard against rounding onto the excluded upper bound
        return min(max(v, domain.min), math.nextafter(domain.max, -math.inf))
    v = int(rng.integers(domain.min, domain.max))
    return str(v) if domain.dtype == "str" else v


def _narrower(inner: Range | Choice, outer: Range | Choice) -> bool:
    if isinstance(outer, Choice):
        return isinstance(inner, Choice) and len(inner.values) > 0 and set(inner.values) <= set(outer.values)
    return (
        isinstance(inner, Range)
        and inner.dtype == outer.dtype
        and outer.min <= inner.min < inner.max <= outer.max
    )


def sample(space: HyperSpace, rng: np.random.Generator, trial_id: int = 0, order=None) -> Trial:
    """Draw one trial, knobs in dependency order, hooks applied as drawn."""
    assignment: dict[str, Any] = {}
    for k in order if order is not None else topological_order(space):
        domain = k.domain
        if k.pre_hook is not None:
            narrowed = space.hooks[k.pre_hook](dict(assignment), domain)
            if not _narrower(narrowed, domain):
                raise InvalidDomain(f"pre_hook {k.pre_hook!r} widened the domain of {k.name!r}")
            domain = narrowed
        value = _draw(domain, rng)
        if k.post_hook is not None:
            value = space.hooks[k.post_hook](dict(assignment), value)
            if not k.domain.contains(value):
                raise InvalidDomain(f"post_hook {k.post_hook!r} produced {value!r} outside the domain of {k.name!r}")
        assignment[k.name] = value
    # report assignments in declaration order
    return Trial(trial_id, {name: assignment[name] for name in space.names})


def _draw_many(domain: Range | Choice, rng: np.random.Generator, n: int) -> list:
    if isinstance(domain, Choice):
        return [domain.values[i] for i in rng.integers(len(domain.values), size=n)]
    if domain.dtype == "float":
        if domain.log:
            v = np.exp(rng.uniform(math.log(domain.min), math.log(domain.max), n))
        else:
            v = rng.uniform(domain.min, domain.max, n)
        return np.clip(v, domain.min, math.nextafter(domain.max, -math.inf)).tolist()
    v = rng.integers(domain.min, domain.max, size=n).tolist()
    return [str(x) for x in v] if domain.dtype == "str" else v


def sample_many(space: HyperSpace, rng: np.random.Generator, n: int) -> list[dict]:
    """``n`` independent assignments, drawn column-wise for speed.

    Same distribution as :func:`sample` but a different use of the stream.
    """
    rows: list[dict[str, Any]] = [{} for _ in range(n)]
    for k in topological_order(space):
        if k.pre_hook is None:
            col = _draw_many(k.domain, rng, n)
        else:
            col = []
            for row in rows:
                narrowed = space.hooks[k.pre_hook](dict(row), k.domain)
                if not _narrower(narrowed, k.domain):
                    raise InvalidDomain(f"pre_hook {k.pre_hook!r} widened the domain of {k.name!r}")
                col.append(_draw(narrowed, rng))
        hook = space.hooks[k.post_hook] if k.post_hook is not None else None
        for row, v in zip(rows, col):
            if hook is not None:
                v = hook(dict(row), v)
                if not k.domain.contains(v):
                    raise InvalidDomain(f"post_hook {k.post_hook!r} produced {v!r} outside the domain of {k.name!r}")
            row[k.name] = v
    return [{name: row[name] for name in space.names} for row in rows]


def in_domain(space: HyperSpace, assignment: Mapping[str, Any]) -> bool:
    if set(assignment) != set(space.names):
        return False
    return all(k.domain.contains(assignment[k.name]) for k in space.knobs)


# -- encoding -----------------------------------------------------------------


def _encode_range(d: Range, value) -> float:
    if d.dtype == "float":
        if d.log:
            return (math.log(value) - math.log(d.min)) / (math.log(d.max) - math.log(d.min))
        return (value - d.min) / (d.max - d.min)
    top = d.max - 1
    return 0.0 if top == d.min else (int(value) - d.min) / (top - d.min)


def encode(space: HyperSpace, assignment: Mapping[str, Any]) -> np.ndarray:
    """Map an assignment into ``[0, 1]^d``.

    Ranges are min-max normalised (in log space for log knobs; integers
    against their largest admissible value ``max - 1``); choices are
    one-hot.
    """
    out = np.empty(space.dim)
    i = 0
    for k in space.knobs:
        d = k.domain
        if isinstance(d, Choice):
            out[i:i + k.width] = 0.0
            out[i + d.values.index(assignment[k.name])] = 1.0
        else:
            out[i] = _encode_range(d, assignment[k.name])
        i += k.width
    return out


def encode_many(space: HyperSpace, assignments: Sequence[Mapping[str, Any]]) -> np.ndarray:
    """Row-wise :func:`encode` of many assignments."""
    out = np.zeros((len(assignments), space.dim))
    i = 0
    for k in space.knobs:
        d = k.domain
        col = [a[k.name] for a in assignments]
        if isinstance(d, Choice):
            idx = [d.values.index(v) for v in col]
            out[np.arange(len(col)), i + np.asarray(idx, dtype=int)] = 1.0
        elif d.dtype == "float":
            v = np.asarray(col, dtype=float)
            if d.log:
                out[:, i] = (np.log(v) - math.log(d.min)) / (math.log(d.max) - math.log(d.min))
            else:
                out[:, i] = (v - d.min) / (d.max - d.min)
        else:
            top = d.max - 1
            v = np.asarray([int(x) for x in col], dtype=float)
            out[:, i] = 0.0 if top == d.min else (v - d.min) / (top - d.min)
        i += k.width
    return out


def decode(space: HyperSpace, vector: Sequence[float]) -> dict:
    x = np.asarray(vector, dtype=float)
    out: dict[str, Any] = {}
    i = 0
    for k in space.knobs:
        d = k.domain
        if isinstance(d, Choice):
            out[k.name] = d.values[int(np.argmax(x[i:i + k.width]))]
        elif d.dtype == "float":
            u = float(x[i])
            if d.log:
                v = math.exp(math.log(d.min) + u * (math.log(d.max) - math.log(d.min)))
            else:
                v = d.min + u * (d.max - d.min)
            out[k.name] = min(max(v, d.min), math.nextafter(d.max, -math.inf))
        else:
            top = d.max - 1
            v = d.min + int(round(float(x[i]) * (top - d.min)))
            v = min(max(v, d.min), top)
            out[k.name] = str(v) if d.dtype == "str" else v
        i += k.width
    return out


# -- built-in hooks and spaces --------------------------------------------------


def cap_decay(assignment: Mapping[str, Any], value):
    """Keep the learning-rate decay no larger than the learning rate."""
    lr = assignment.get("lr")
    return value if lr is None else min(value, lr)


DEFAULT_HOOKS: dict[str, Hook] = {"cap_decay": cap_decay}


def knob_from_record(rec: Mapping[str, Any]) -> KnobDef:
    kind = rec.get("kind", "choice" if "values" in rec else "range")
    depends = tuple(rec.get("depends", ()))
    if kind == "choice":
        return define_choice(rec["name"], rec["values"], depends, rec.get("post_hook"), rec.get("pre_hook"))
    if kind == "range":
        return define_range(
            rec["name"], rec["min"], rec["max"], rec.get("dtype", "float"), depends,
            rec.get("post_hook"), rec.get("pre_hook"), rec.get("log", False),
        )
    raise InvalidDomain(f"{rec.get('name')}: unknown knob kind {kind!r}")


def space_from_records(records: Sequence[Mapping[str, Any]], hooks: Mapping[str, Hook] | None = None) -> HyperSpace:
    return HyperSpace(tuple(knob_from_record(r) for r in records), dict(DEFAULT_HOOKS if hooks is None else hooks)).checked()


def knob_to_record(k: KnobDef) -> dict:
    rec: dict[str, Any] = {"name": k.name}
    if isinstance(k.domain, Choice):
        rec.update(kind="choice", values=list(k.domain.values))
    else:
        rec.update(kind="range", min=k.domain.min, max=k.domain.max, dtype=k.domain.dtype, log=k.domain.log)
    rec["depends"] = list(k.depends)
    if k.pre_hook:
        rec["pre_hook"] = k.pre_hook
    if k.post_hook:
        rec["post_hook"] = k.post_hook
    return rec


OPTIMIZER_KNOBS = [
    {"name": "lr", "kind": "range", "min": 1e-4, "max": 1.0, "log": True},
    {"name": "decay", "kind": "range", "min": 1e-6, "max": 1e-2, "log": True, "depends": ["lr"], "post_hook": "cap_decay"},
    {"name": "momentum", "kind": "range", "min": 0.5, "max": 0.99},
    {"name": "dropout", "kind": "range", "min": 0.0, "max": 0.7},
    {"name": "init_std", "kind": "range", "min": 1e-3, "max": 1e-1, "log": True},
]

# The three knob groups: data preprocessing, model architecture, training.
TABLE1_KNOBS = [
    {"name": "rotation", "kind": "range", "min": 0.0, "max": 30.0},
    {"name": "cropping", "kind": "range", "min": 0, "max": 33, "dtype": "int"},
    {"name": "whitening", "kind": "choice", "values": ["PCA", "ZCA"]},
    {"name": "n_layers", "kind": "range", "min": 1, "max": 17, "dtype": "int"},
    {"name": "n_cluster", "kind": "range", "min": 2, "max": 33, "dtype": "int"},
    {"name": "kernel", "kind": "choice", "values": ["Linear", "RBF", "Poly"]},
    {"name": "lr", "kind": "range", "min": 1e-4, "max": 1.0, "log": True},
    {"name": "decay", "kind": "range", "min": 1e-6, "max": 1e-2, "log": True, "depends": ["lr"], "post_hook": "cap_decay"},
    {"name": "momentum", "kind": "range", "min": 0.0, "max": 0.99},
]


def optimizer_space() -> HyperSpace:
    """Five optimisation knobs tuned with a fixed ConvNet architecture."""
    return space_from_records(OPTIMIZER_KNOBS)


def table1_space() -> HyperSpace:
    return space_from_records(TABLE1_KNOBS)
