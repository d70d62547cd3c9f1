"""Master event loops for independent (Study) and collaborative (CoStudy) tuning.

Both loops are pure step functions over ``(state, message)`` returning the
next state and the directives to send.  The advisor is the only mutable
collaborator; given the same advisor state and message, a step produces
the same output, so the audit log written by :func:`run_study` is a full
replay witness.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import messages as m
from .advisor import TrialAdvisor
from .errors import Exhausted, ProtocolViolation, TransportClosed, UnknownTrial, UnknownWorker
from .hyperspace import Trial, warm
from .paramstore import AlphaSchedule, ParamStore, alpha_at

RUNNING, DRAINING, DONE = "running", "draining", "done"


@dataclass(frozen=True)
class StudyConf:
    max_trials: int = 30
    delta: float = 0.005
    patience: int = 5
    min_improve: float = 1e-3
    alpha0: float = 0.5
    alpha_decay: AlphaSchedule = field(default_factory=AlphaSchedule)
    stop_at_p: float | None = None
    time_budget: float | None = None

    def __post_init__(self):
        if self.max_trials < 1:
            raise ValueError("max_trials must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ValueError("alpha0 must lie in [0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    @property
    def schedule(self) -> AlphaSchedule:
        return replace(self.alpha_decay, alpha0=self.alpha0)


@dataclass(frozen=True)
class StudyState:
    advisor: TrialAdvisor
    num: int = 0
    best_p: float = 0.0
    phase: str = RUNNING
    issued: int = 0
    in_flight: frozenset = frozenset()


def _check(msg) -> None:
    if not isinstance(msg, m.WireMessage):
        raise ProtocolViolation(f"not a worker message: {msg!r}")
    if msg.type == m.K_REQUEST:
        if msg.p is not None or msg.trial is not None:
            raise ProtocolViolation("kRequest carries neither p nor trial")
    elif msg.type == m.K_REPORT:
        if msg.p is None or msg.trial is None:
            raise ProtocolViolation("kReport needs p and trial")
        if not math.isfinite(msg.p):
            raise ProtocolViolation(f"non-finite p {msg.p!r}")
    elif msg.type == m.K_FINISH:
        if msg.p is not None or msg.trial is not None:
            raise ProtocolViolation("kFinish carries the worker only")
    else:
        raise ProtocolViolation(f"unknown message type {msg.type!r}")


def _on_request(state: StudyState, msg) -> tuple[StudyState, list]:
    if state.phase == DRAINING:
        return state, [m.MasterDirective(msg.worker, m.SHUTDOWN)]
    try:
        trial = state.advisor.next(msg.worker)
    except Exhausted:
        state = replace(state, phase=DRAINING)
        return _settle(state), [m.MasterDirective(msg.worker, m.SHUTDOWN)]
    state = replace(state, issued=state.issued + 1, in_flight=state.in_flight | {msg.worker})
    return state, [m.MasterDirective(msg.worker, m.SEND_TRIAL, trial)]


def _collect(state: StudyState, msg) -> None:
    try:
        state.advisor.collect(msg.worker, msg.p, msg.trial)
    except UnknownTrial as exc:
        raise ProtocolViolation(f"report for unknown trial {msg.trial.trial_id}") from exc


def _settle(state: StudyState, conf: StudyConf | None = None, p: float | None = None) -> StudyState:
    done = False
    if conf is not None:
        done = state.num >= conf.max_trials
        if p is not None and conf.stop_at_p is not None and p >= conf.stop_at_p:
            done = True
    if state.phase == DRAINING and not state.in_flight:
        done = True
    return replace(state, phase=DONE) if done else state


def _finish(state: StudyState, msg) -> StudyState:
    if msg.worker not in state.in_flight:
        raise ProtocolViolation(f"kFinish from {msg.worker!r}, which holds no trial")
    return replace(state, num=state.num + 1, in_flight=state.in_flight - {msg.worker})


def study_step(state: StudyState, msg, conf: StudyConf) -> tuple[StudyState, list]:
    """One iteration of the independent tuning loop."""
    if state.phase == DONE:
        raise ProtocolViolation("study already finished")
    _check(msg)
    if msg.type == m.K_REQUEST:
        return _on_request(state, msg)
    if msg.type == m.K_REPORT:
        _collect(state, msg)
        return _settle(state, conf, msg.p), []
    state = _finish(state, msg)
    try:
        best = state.advisor.is_best(msg.worker)
    except UnknownWorker as exc:
        raise ProtocolViolation(str(exc)) from exc
    out = [m.MasterDirective(msg.worker, m.K_PUT)] if best else []
    return _settle(state, conf), out


def costudy_step(state: StudyState, msg, conf: StudyConf) -> tuple[StudyState, list]:
    """One iteration of the collaborative tuning loop.

    Parameters are put only when a report beats the best so far by more than
    ``delta``; kFinish just counts the trial.
    """
    if state.phase == DONE:
        raise ProtocolViolation("study already finished")
    _check(msg)
    if msg.type == m.K_REQUEST:
        return _on_request(state, msg)
    if msg.type == m.K_REPORT:
        _collect(state, msg)
        out = []
        if msg.p - state.best_p > conf.delta:
            out.append(m.MasterDirective(msg.worker, m.K_PUT))
            state = replace(state, best_p=msg.p)
        elif state.advisor.early_stopping(msg.worker, conf):
            out.append(m.MasterDirective(msg.worker, m.K_STOP))
        return _settle(state, conf, msg.p), out
    return _settle(_finish(state, msg), conf), []


STEPS = {"study": study_step, "costudy": costudy_step}


@dataclass
class AuditEntry:
    time: float
    msg: m.WireMessage
    directives: list


@dataclass
class StudyResult:
    best_trial: Trial
    best_p: float
    log: list
    state: StudyState
    origins: dict = field(default_factory=dict)
    end_time: float = 0.0


class WarmStarter:
    """Applies α-greedy initialisation to outgoing trials."""

    def __init__(self, store: ParamStore, schedule: AlphaSchedule, rng: np.random.Generator, sig_of):
        self.store = store
        self.schedule = schedule
        self.rng = rng
        self.sig_of = sig_of

    def __call__(self, trial: Trial, num: int) -> Trial:
        alpha = alpha_at(self.schedule, num)
        blob = self.store.choose_init(self.sig_of(trial.assignment), alpha, self.rng)
        return trial if blob is None else trial.with_origin(warm(blob.source))


def run_study(conf: StudyConf, advisor: TrialAdvisor, transport, mode: str = "study", init=None) -> StudyResult:
    """Drive a step function over ``transport`` until the study stops.

    ``init(trial, num) -> trial`` may rewrite outgoing trials (used for
    warm starts in collaborative mode).  On exit every connected worker is
    sent Shutdown.
    """
    step = STEPS[mode]
    state = StudyState(advisor)
    log: list[AuditEntry] = []
    origins: dict[int, str] = {}
    clock = getattr(transport, "clock", None)
    t0 = time.monotonic()

    def now():
        return transport.clock if clock is not None else time.monotonic() - t0

    while state.phase != DONE:
        if conf.time_budget is not None and now() >= conf.time_budget:
            break
        msg = transport.recv()
        if msg is None:
            continue
        state, directives = step(state, msg, conf)
        if init is not None:
            directives = [
                replace(d, trial=init(d.trial, state.num)) if d.kind == m.SEND_TRIAL else d for d in directives
            ]
        for d in directives:
            if d.kind == m.SEND_TRIAL:
                origins[d.trial.trial_id] = str(d.trial.origin)
            transport.send(d.target, d)
        log.append(AuditEntry(now(), msg, directives))
    end = now()
    for w in transport.workers():
        try:
            transport.send(w, m.MasterDirective(w, m.SHUTDOWN))
        except TransportClosed:
            pass
    best, p = advisor.best_trial()
    return StudyResult(best, p, log, state, origins, end)
