"""Actor-critic scheduler for ensemble serving.

State: the waits of the oldest ``L`` queued requests, the remaining busy time
of each model and the flattened latency table, all divided by the SLO so
they are O(1).  Action: a nonzero model mask ``v`` and a batch size ``b``,
encoded as ``(v - 1) * |B| + index(b)``.  Policy and value are separate
one-hidden-layer tanh perceptrons; gradients are written out by hand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySelection, NonFinite, OutOfRange
from .inference import EnsembleTable, RequestQueue

# -- state ---------------------------------------------------------------------


def feature_size(n_models: int, n_batches: int, L: int, single: bool = False) -> int:
    return L if single else L + n_models + n_models * n_batches


def featurize(queue: RequestQueue, busy_until, clock: float, profiles, batches, L: int, tau: float, single: bool = False) -> np.ndarray:
    """Scheduler state vector; times are in units of ``tau``.

    Single-model mode keeps only the queue waits.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    out = np.zeros(feature_size(len(profiles), len(batches), L, single))
    w = clock - queue.oldest(L)
    out[:len(w)] = w / tau
    if not single:
        busy = np.maximum(np.asarray(busy_until, dtype=float) - clock, 0.0)
        out[L:L + len(profiles)] = busy / tau
        costs = [p.c(b) for p in profiles for b in batches]
        out[L + len(profiles):] = np.asarray(costs) / tau
    return out


# -- actions -------------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    v: int
    b: int


def n_actions(n_models: int, n_batches: int) -> int:
    return ((1 << n_models) - 1) * n_batches


def action_decode(index: int, n_models: int, batches) -> Action:
    if not 0 <= index < n_actions(n_models, len(batches)):
        raise OutOfRange(f"action index {index} outside [0, {n_actions(n_models, len(batches))})")
    v, j = divmod(int(index), len(batches))
    return Action(v + 1, batches[j])


def action_encode(action: Action, n_models: int, batches) -> int:
    if not 0 < action.v < 1 << n_models:
        raise EmptySelection(f"mask {action.v} is not a nonzero subset of {n_models} models")
    if action.b not in batches:
        raise OutOfRange(f"batch size {action.b} not in {list(batches)}")
    return (action.v - 1) * len(batches) + list(batches).index(action.b)


# -- reward and returns -----------------------------------------------------------


def reward(v: int, n: int, overdue: int, beta: float, table: EnsembleTable) -> float:
    """Ensemble accuracy times served requests, with overdue ones discounted by beta."""
    if not 0 <= overdue <= n:
        raise ValueError("need 0 <= overdue <= n")
    return table[v] * (n - beta * overdue)


def discounted_returns(rewards, gamma: float, times=None) -> np.ndarray:
    """Backward discounted sums.

    With ``times`` the discount between consecutive rewards is
    ``gamma ** (times[t+1] - times[t])``, so idle time costs value.
    """
    r = np.asarray(rewards, dtype=float)
    if times is None:
        factors = np.full(len(r), gamma)
    else:
        gaps = np.diff(np.asarray(times, dtype=float), append=times[-1] if len(r) else 0.0)
        factors = gamma ** np.maximum(gaps, 0.0)
    g = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + factors[t] * acc
        g[t] = acc
    return g


def episode_return(rewards, t: int, gamma: float) -> float:
    if not 0 <= t < len(rewards):
        raise IndexError("t outside the trajectory")
    return float(discounted_returns(rewards[t:], gamma)[0])


# -- networks ----------------------------------------------------------------------


@dataclass
class MLP:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    NAMES = ("W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator, out_scale: float = 0.0) -> "MLP":
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_hidden, n_in)),
            np.zeros(n_hidden),
            rng.normal(0.0, 1.0, (n_out, n_hidden)) * out_scale / np.sqrt(n_hidden),
            np.zeros(n_out),
        )

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "MLP":
        return MLP(*(p.copy() for p in self.params()))

    def hidden(self, X) -> np.ndarray:
        return np.tanh(np.atleast_2d(X) @ self.W1.T + self.b1)

    def forward(self, X) -> tuple[np.ndarray, np.ndarray]:
        h = self.hidden(X)
        return h @ self.W2.T + self.b2, h

    def backward(self, X, h, dout) -> list[np.ndarray]:
        """Gradients of ``sum(dout * output)`` with respect to the parameters."""
        X = np.atleast_2d(X)
        gW2 = dout.T @ h
        gb2 = dout.sum(0)
        dh = (dout @ self.W2) * (1.0 - h * h)
        return [dh.T @ X, dh.sum(0), gW2, gb2]

    # flat binary record: u32 count of dims, the dims, then float64 weights
    def to_bytes(self) -> bytes:
        dims = [*self.W1.shape, self.W2.shape[0]]
        head = struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
        return head + b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params())

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["MLP", int]:
        (k,) = struct.unpack_from("<I", data, 0)
        hid, n_in, n_out = struct.unpack_from(f"<{k}I", data, 4)
        pos = 4 + 4 * k
        shapes = [(hid, n_in), (hid,), (n_out, hid), (n_out,)]
        arrs = []
        for s in shapes:
            n = int(np.prod(s))
            arrs.append(np.frombuffer(data, "<f8", n, pos).reshape(s).copy())
            pos += 8 * n
        return cls(*arrs), pos


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _masked(logits: np.ndarray, valid) -> np.ndarray:
    if valid is None:
        return logits
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=-1).all():
        raise EmptySelection("no valid action")
    return np.where(valid, logits, -np.inf)


def policy_forward(theta: MLP, state, valid=None) -> np.ndarray:
    """Action probabilities; ``valid`` (boolean, per action) renormalizes over allowed actions."""
    logits, _ = theta.forward(state)
    if not np.all(np.isfinite(logits)):
        raise NonFinite("policy logits overflowed")
    p = softmax(_masked(logits, valid))
    return p[0] if np.ndim(state) == 1 else p


def log_prob(theta: MLP, states, actions, valid=None) -> np.ndarray:
    logits, _ = theta.forward(states)
    logits = _masked(logits, valid)
    z = logits - logits.max(1, keepdims=True)
    lse = np.log(np.exp(z).sum(1))
    return z[np.arange(len(z)), np.asarray(actions)] - lse


def policy_gradient(theta: MLP, states, actions, advantages, valid=None) -> list[np.ndarray]:
    """Gradient of ``sum_t A_t log pi(a_t | s_t)``."""
    S = np.atleast_2d(states)
    logits, h = theta.forward(S)
    p = softmax(_masked(logits, valid))
    d = -p
    d[np.arange(len(S)), np.asarray(actions)] += 1.0
    d *= np.asarray(advantages, dtype=float)[:, None]
    return theta.backward(S, h, d)


def value_forward(phi: MLP, states) -> np.ndarray:
    out, _ = phi.forward(states)
    return out[:, 0]


def value_gradient(phi: MLP, states, targets) -> list[np.ndarray]:
    """Gradient of ``mean_t (V(s_t) - G_t)^2``."""
    S = np.atleast_2d(states)
    out, h = phi.forward(S)
    d = 2.0 * (out[:, 0] - np.asarray(targets, dtype=float))[:, None] / len(S)
    return phi.backward(S, h, d)


# -- agent -----------------------------------------------------------------------------


@dataclass
class RLConf:
    hidden: int = 64
    gamma: float = 0.9
    lr_policy: float = 0.1
    lr_value: float = 0.001
    momentum: float = 0.9
    normalize_advantage: bool = True
    updates_per_episode: int = 8
    L: int = 64
    discount: str = "step"  # or "time": gamma per tau of simulated time
    mask_busy: bool = True  # restrict choices to ensembles whose models are all free

    def __post_init__(self):
        if self.discount not in ("step", "time"):
            raise ValueError(f"unknown discount {self.discount!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class ActorCritic:
    theta: MLP
    phi: MLP
    conf: RLConf = field(default_factory=RLConf)
    _vt: list = field(default=None, repr=False)
    _vp: list = field(default=None, repr=False)
    failed_updates: int = 0

    @classmethod
    def create(cls, n_features: int, n_act: int, rng: np.random.Generator, conf: RLConf | None = None) -> "ActorCritic":
        conf = conf or RLConf()
        return cls(MLP.init(n_features, conf.hidden, n_act, rng), MLP.init(n_features, conf.hidden, 1, rng), conf)

    def act(self, state, rng: np.random.Generator, mode: str = "sample", valid=None) -> int:
        p = policy_forward(self.theta, state, valid)
        if mode == "greedy":
            return int(np.argmax(p))
        if mode != "sample":
            raise ValueError(f"unknown mode {mode!r}")
        return int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"), len(p) - 1))

    def update(self, states, actions, rewards, times=None, valid=None) -> dict:
        """Actor-critic step over one trajectory.

        Returns are computed over the whole trajectory; the gradient steps
        are taken on ``updates_per_episode`` consecutive chunks of it.
        ``times`` (in units of tau) is used when ``conf.discount == "time"``;
        ``valid`` holds the per-step action masks the choices were drawn under.
        """
        S = np.atleast_2d(np.asarray(states, dtype=float))
        A = np.asarray(actions, dtype=int)
        M = None if valid is None else np.atleast_2d(np.asarray(valid, dtype=bool))
        if self.conf.discount == "time" and times is None:
            raise ValueError("time discounting needs the decision times")
        G = discounted_returns(rewards, self.conf.gamma, times if self.conf.discount == "time" else None)
        if len(S) == 0:
            return {"steps": 0}
        chunks = np.array_split(np.arange(len(S)), max(1, min(self.conf.updates_per_episode, len(S))))
        stats = {"steps": len(S), "value_loss": 0.0}
        for idx in chunks:
            stats["value_loss"] += self.step(S[idx], A[idx], G[idx], None if M is None else M[idx])
        return stats

    def step(self, S, A, G, valid=None) -> float:
        """One gradient step; parameters are left unchanged on non-finite values."""
        with np.errstate(all="ignore"):
            V = value_forward(self.phi, S)
            adv = G - V
            if self.conf.normalize_advantage and len(adv) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            gp = policy_gradient(self.theta, S, A, adv / len(S), valid)
            gv = value_gradient(self.phi, S, G)
        if not all(np.all(np.isfinite(g)) for g in gp + gv):
            self.failed_updates += 1
            raise NonFinite("non-finite gradient; update skipped")
        mu = self.conf.momentum
        if self._vt is None:
            self._vt = [np.zeros_like(p) for p in self.theta.params()]
            self._vp = [np.zeros_like(p) for p in self.phi.params()]
        for p, v, g in zip(self.theta.params(), self._vt, gp):
            v *= mu
            v += g
            p += self.conf.lr_policy * v
        for p, v, g in zip(self.phi.params(), self._vp, gv):
            v *= mu
            v += g
            p -= self.conf.lr_value * v
        return float(np.mean((V - G) ** 2))

    def to_bytes(self) -> bytes:
        return self.theta.to_bytes() + self.phi.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes, conf: RLConf | None = None) -> "ActorCritic":
        theta, pos = MLP.from_bytes(data)
        phi, _ = MLP.from_bytes(data[pos:])
        return cls(theta, phi, conf or RLConf())


def update(theta: MLP, phi: MLP, states, actions, rewards, gamma: float, lr_policy: float, lr_value: float) -> tuple[MLP, MLP]:
    """Functional single-step actor-critic update (no momentum, raw advantages)."""
    conf = RLConf(hidden=theta.W1.shape[0], gamma=gamma, lr_policy=lr_policy, lr_value=lr_value,
                  momentum=0.0, normalize_advantage=False, updates_per_episode=1)
    agent = ActorCritic(theta.copy(), phi.copy(), conf)
    try:
        agent.update(states, actions, rewards)
    except NonFinite:
        return theta, phi
    return agent.theta, agent.phi
