"""Shape-keyed parameter store with overwrite-if-better semantics.

Blobs are whole-model checkpoints keyed by their layer signature.  Reads can
match whole signatures or individual layers: layer ``i`` of a query matches
layer ``i`` of a stored blob when kind and dimensions are identical.

On-disk format (optional, append-only): each record is a little-endian
``u32`` length followed by that many bytes of frame payload.  The payload is
a ``u32`` header length, a UTF-8 JSON header ``{"sig": [[kind, [dims]],
...], "perf": float, "source": int}``, then the raw parameter bytes.
"""

from __future__ import annotations

import json
import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MalformedBlob

BYTES_PER_WEIGHT = 8


@dataclass(frozen=True)
class Layer:
    kind: str
    dims: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 0


@dataclass(frozen=True)
class ShapeSig:
    layers: tuple[Layer, ...]

    @classmethod
    def of(cls, *layers) -> "ShapeSig":
        return cls(tuple(l if isinstance(l, Layer) else Layer(l[0], tuple(l[1])) for l in layers))

    @property
    def nbytes(self) -> int:
        return sum(l.size for l in self.layers) * BYTES_PER_WEIGHT

    def offsets(self) -> list[tuple[int, int]]:
        out, pos = [], 0
        for l in self.layers:
            n = l.size * BYTES_PER_WEIGHT
            out.append((pos, pos + n))
            pos += n
        return out


@dataclass(frozen=True)
class ParamBlob:
    sig: ShapeSig
    payload: bytes
    perf: float
    source: int

    def check(self) -> "ParamBlob":
        if not isinstance(self.sig, ShapeSig):
            raise MalformedBlob("signature missing")
        if not math.isfinite(self.perf):
            raise MalformedBlob(f"non-finite perf {self.perf!r}")
        if len(self.payload) != self.sig.nbytes:
            raise MalformedBlob(f"payload has {len(self.payload)} bytes, signature needs {self.sig.nbytes}")
        return self

    def layer_bytes(self, i: int) -> bytes:
        a, b = self.sig.offsets()[i]
        return self.payload[a:b]


@dataclass(frozen=True)
class Stored:
    pass


@dataclass(frozen=True)
class Rejected:
    existing_perf: float


@dataclass(frozen=True)
class AlphaSchedule:
    """Probability of random initialisation as trials finish."""

    alpha0: float = 0.5
    kind: str = "exponential"
    rate: float = 0.95
    step: float = 0.01
    floor: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ValueError("alpha0 must lie in [0, 1]")
        if self.floor < 0.0:
            raise ValueError("floor must be >= 0")
        if self.kind not in ("exponential", "linear"):
            raise ValueError(f"unknown alpha schedule {self.kind!r}")


def alpha_at(schedule: AlphaSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    # a floor above alpha0 would break monotonicity; it is clipped to alpha0
    floor = min(schedule.floor, schedule.alpha0)
    if schedule.kind == "exponential":
        return max(floor, schedule.alpha0 * schedule.rate ** t)
    return max(floor, schedule.alpha0 - schedule.step * t)


class ParamStore:
    """In-memory parameter server.

    Mutations take a lock so worker threads in socket mode can share one
    store; the simulator drives it from a single thread.
    """

    def __init__(self, namespace: str = "default"):
        self.namespace = namespace
        self._blobs: dict[ShapeSig, ParamBlob] = {}
        self._lock = threading.Lock()
        self.reads = 0

    def __len__(self):
        return len(self._blobs)

    def blobs(self) -> list[ParamBlob]:
        return list(self._blobs.values())

    def put(self, blob: ParamBlob) -> Stored | Rejected:
        blob.check()
        with self._lock:
            old = self._blobs.get(blob.sig)
            if old is not None and not blob.perf > old.perf:
                return Rejected(old.perf)
            self._blobs[blob.sig] = blob
            return Stored()

    def get_matching(self, sig: ShapeSig) -> ParamBlob | None:
        self.reads += 1
        return self._blobs.get(sig)

    def match_layers(self, sig: ShapeSig) -> dict[int, tuple[ParamBlob, bytes]]:
        """Per-layer matches, each layer from the best-perf blob that has it."""
        self.reads += 1
        out: dict[int, tuple[ParamBlob, bytes]] = {}
        for blob in self._blobs.values():
            for i, layer in enumerate(sig.layers):
                if i < len(blob.sig.layers) and blob.sig.layers[i] == layer:
                    cur = out.get(i)
                    if cur is None or blob.perf > cur[0].perf:
                        out[i] = (blob, blob.layer_bytes(i))
        return out

    def compose(self, sig: ShapeSig) -> ParamBlob | None:
        """A blob for ``sig`` assembled from matching layers.

        An exact match is returned as is.  Otherwise unmatched layers are
        zero-filled and the composite's perf is the weakest contributing
        perf scaled by the fraction of weights covered.
        """
        exact = self.get_matching(sig)
        if exact is not None:
            return exact
        parts = self.match_layers(sig)
        if not parts:
            return None
        chunks = []
        covered = 0
        for i, (a, b) in enumerate(sig.offsets()):
            if i in parts:
                chunks.append(parts[i][1])
                covered += b - a
            else:
                chunks.append(bytes(b - a))
        weakest = min(parts.values(), key=lambda x: x[0].perf)[0]
        biggest = max(parts.items(), key=lambda kv: len(kv[1][1]))[1][0]
        frac = covered / sig.nbytes if sig.nbytes else 0.0
        return ParamBlob(sig, b"".join(chunks), weakest.perf * frac, biggest.source)

    def choose_init(self, sig: ShapeSig, alpha: float, rng: np.random.Generator) -> ParamBlob | None:
        """Random initialisation (None) with probability alpha, else the best match."""
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if rng.random() < alpha:
            return None
        return self.compose(sig)

    def best_perf(self) -> float:
        return max((b.perf for b in self._blobs.values()), default=0.0)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "ab") as fh:
            for blob in self._blobs.values():
                fh.write(encode_record(blob))

    @classmethod
    def load(cls, path, namespace="default") -> "ParamStore":
        store = cls(namespace)
        for blob in read_records(Path(path).read_bytes()):
            store.put(blob)
        return store


def encode_record(blob: ParamBlob) -> bytes:
    header = json.dumps(
        {"sig": [[l.kind, list(l.dims)] for l in blob.sig.layers], "perf": blob.perf, "source": blob.source}
    ).encode("utf-8")
    body = struct.pack("<I", len(header)) + header + blob.payload
    return struct.pack("<I", len(body)) + body


def read_records(data: bytes) -> list[ParamBlob]:
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise MalformedBlob(f"truncated record length at byte {pos}")
        (n,) = struct.unpack_from("<I", data, pos)
        body = data[pos + 4:pos + 4 + n]
        if len(body) != n:
            raise MalformedBlob(f"truncated record at byte {pos}")
        (h,) = struct.unpack_from("<I", body, 0)
        header = json.loads(body[4:4 + h].decode("utf-8"))
        sig = ShapeSig.of(*[(k, d) for k, d in header["sig"]])
        out.append(ParamBlob(sig, bytes(body[4 + h:]), float(header["perf"]), int(header["source"])).check())
        pos += 4 + n
    return out
