"""Messages exchanged between the tuning master and its workers."""

from __future__ import annotations

from dataclasses import dataclass

from .hyperspace import Trial

K_REQUEST = "kRequest"
K_REPORT = "kReport"
K_FINISH = "kFinish"
WORKER_TYPES = (K_REQUEST, K_REPORT, K_FINISH)

SEND_TRIAL = "SendTrial"
K_PUT = "kPut"
K_STOP = "kStop"
SHUTDOWN = "Shutdown"
DIRECTIVE_KINDS = (SEND_TRIAL, K_PUT, K_STOP, SHUTDOWN)


@dataclass(frozen=True)
class WireMessage:
    type: str
    worker: str
    p: float | None = None
    trial: Trial | None = None


@dataclass(frozen=True)
class MasterDirective:
    target: str
    kind: str
    trial: Trial | None = None


def request(worker: str) -> WireMessage:
    return WireMessage(K_REQUEST, worker)


def report(worker: str, p: float, trial: Trial) -> WireMessage:
    return WireMessage(K_REPORT, worker, float(p), trial)


def finish(worker: str) -> WireMessage:
    return WireMessage(K_FINISH, worker)
