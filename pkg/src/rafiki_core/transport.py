"""Frame codec and transports between the tuning master and its workers.

A frame is a little-endian ``u32`` byte length followed by UTF-8 JSON text
holding one message.  Worker messages and master directives share the
field names ``type``, ``worker``, ``p`` and ``trial``; ``type`` tells them
apart.  A trial is ``{"trial_id", "assignment", "origin"}`` with origin
either ``"random"`` or ``{"warm": <source trial_id>}``.

Two transports speak the codec: :class:`MemoryHub`, an in-process duplex
channel, and :class:`SocketHub`, a local TCP stream.  On the master side
both expose ``recv`` / ``send`` / ``close`` and deliver messages from all
workers as one ordered stream; on the worker side endpoints expose
``send`` / ``recv`` / ``close``.  Delivery is per-peer FIFO.
"""

from __future__ import annotations

import json
import queue
import socket
import struct
import threading
from collections import deque

from . import messages as m
from .errors import CodecError, TransportClosed
from .hyperspace import RANDOM_INIT, Origin, Trial, warm

HEADER = struct.Struct("<I")
MAX_FRAME = 1 << 24

_MSG_FIELDS = {"type", "worker", "p", "trial"}
_TRIAL_FIELDS = {"trial_id", "assignment", "origin"}


# -- codec -------------------------------------------------------------------


def trial_to_wire(trial: Trial) -> dict:
    origin = "random" if not trial.origin.is_warm else {"warm": trial.origin.source}
    return {"trial_id": trial.trial_id, "assignment": dict(trial.assignment), "origin": origin}


def trial_from_wire(obj) -> Trial:
    if not isinstance(obj, dict):
        raise CodecError("trial must be an object", 4)
    extra = set(obj) - _TRIAL_FIELDS
    if extra:
        raise CodecError(f"unknown trial fields {sorted(extra)}", 4)
    tid = obj.get("trial_id")
    if not isinstance(tid, int) or isinstance(tid, bool):
        raise CodecError("trial_id must be an integer", 4)
    assignment = obj.get("assignment")
    if not isinstance(assignment, dict) or not all(isinstance(k, str) for k in assignment):
        raise CodecError("assignment must be an object", 4)
    for v in assignment.values():
        if isinstance(v, bool) or not isinstance(v, (int, float, str)):
            raise CodecError("assignment values must be numbers or strings", 4)
    origin = obj.get("origin", "random")
    if origin == "random":
        org: Origin = RANDOM_INIT
    elif isinstance(origin, dict) and set(origin) == {"warm"} and isinstance(origin["warm"], int) and not isinstance(origin["warm"], bool):
        org = warm(origin["warm"])
    else:
        raise CodecError(f"bad origin {origin!r}", 4)
    return Trial(tid, assignment, org)


def to_wire(msg) -> dict:
    if isinstance(msg, m.WireMessage):
        out = {"type": msg.type, "worker": msg.worker}
        if msg.p is not None:
            out["p"] = msg.p
    elif isinstance(msg, m.MasterDirective):
        out = {"type": msg.kind, "worker": msg.target}
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    if msg.trial is not None:
        out["trial"] = trial_to_wire(msg.trial)
    return out


def from_wire(obj):
    if not isinstance(obj, dict):
        raise CodecError("frame must hold a JSON object", 4)
    extra = set(obj) - _MSG_FIELDS
    if extra:
        raise CodecError(f"unknown fields {sorted(extra)}", 4)
    kind = obj.get("type")
    worker = obj.get("worker")
    if not isinstance(worker, str):
        raise CodecError("worker must be a string", 4)
    p = obj.get("p")
    if p is not None and (isinstance(p, bool) or not isinstance(p, (int, float))):
        raise CodecError("p must be a number", 4)
    trial = trial_from_wire(obj["trial"]) if obj.get("trial") is not None else None
    if kind in m.WORKER_TYPES:
        return m.WireMessage(kind, worker, None if p is None else float(p), trial)
    if kind in m.DIRECTIVE_KINDS:
        if p is not None:
            raise CodecError("directives carry no p", 4)
        return m.MasterDirective(worker, kind, trial)
    raise CodecError(f"unknown message type {kind!r}", 4)


def encode_frame(msg) -> bytes:
    body = json.dumps(to_wire(msg), separators=(",", ":"), allow_nan=False).encode("utf-8")
    return HEADER.pack(len(body)) + body


def decode_frame(data: bytes):
    """Decode exactly one complete frame."""
    data = bytes(data)
    if len(data) < HEADER.size:
        raise CodecError("truncated header", len(data))
    (n,) = HEADER.unpack_from(data)
    if n > MAX_FRAME:
        raise CodecError(f"frame length {n} exceeds limit", 0)
    if len(data) != HEADER.size + n:
        raise CodecError(f"frame declares {n} bytes but carries {len(data) - HEADER.size}", HEADER.size)
    try:
        text = data[HEADER.size:].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CodecError("invalid UTF-8", HEADER.size + exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CodecError(f"invalid JSON: {exc.msg}", HEADER.size + exc.pos) from None
    except RecursionError:
        raise CodecError("JSON nested too deeply", HEADER.size) from None
    return from_wire(obj)


class FrameDecoder:
    """Reassembles frames from a byte stream; never yields partial frames."""

    def __init__(self):
        self._buf = bytearray()
        self._consumed = 0

    def feed(self, chunk: bytes) -> list:
        self._buf += chunk
        out = []
        while len(self._buf) >= HEADER.size:
            (n,) = HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise CodecError(f"frame length {n} exceeds limit", self._consumed)
            if len(self._buf) < HEADER.size + n:
                break
            frame = bytes(self._buf[:HEADER.size + n])
            del self._buf[:HEADER.size + n]
            try:
                out.append(decode_frame(frame))
            except CodecError as exc:
                raise CodecError(str(exc), self._consumed + exc.offset) from None
            self._consumed += len(frame)
        return out


# -- in-memory transport -------------------------------------------------------


class MemoryEndpoint:
    """Worker side of a :class:`MemoryHub` connection."""

    def __init__(self, hub: "MemoryHub", worker: str):
        self.hub = hub
        self.worker = worker
        self.inbox: deque[bytes] = deque()
        self.closed = False

    def send(self, msg) -> None:
        if self.closed or self.hub.closed:
            raise TransportClosed(self.worker)
        self.hub._inbound.append((self.worker, encode_frame(msg)))

    def recv(self, timeout=None):
        if self.inbox:
            return decode_frame(self.inbox.popleft())
        if self.closed or self.hub.closed:
            raise TransportClosed(self.worker)
        return None

    def drain(self) -> list:
        out = []
        while self.inbox:
            out.append(decode_frame(self.inbox.popleft()))
        return out

    def close(self) -> None:
        self.closed = True


class MemoryHub:
    """Master side of the in-process transport.

    ``recv`` is non-blocking and returns None when nothing is queued.
    """

    def __init__(self):
        self._inbound: deque[tuple[str, bytes]] = deque()
        self.endpoints: dict[str, MemoryEndpoint] = {}
        self.closed = False

    def connect(self, worker: str) -> MemoryEndpoint:
        ep = MemoryEndpoint(self, worker)
        self.endpoints[worker] = ep
        return ep

    def pending(self) -> int:
        return len(self._inbound)

    def recv(self, timeout=None):
        if self._inbound:
            _, frame = self._inbound.popleft()
            return decode_frame(frame)
        if self.closed or (self.endpoints and all(ep.closed for ep in self.endpoints.values())):
            raise TransportClosed("all workers disconnected")
        return None

    def send(self, worker: str, directive) -> None:
        ep = self.endpoints.get(worker)
        if ep is None or ep.closed:
            raise TransportClosed(worker)
        ep.inbox.append(encode_frame(directive))

    def workers(self) -> list[str]:
        return [w for w, ep in self.endpoints.items() if not ep.closed]

    def close(self) -> None:
        self.closed = True


# -- socket transport ------------------------------------------------------------


def _parse_address(listen) -> tuple[str, int]:
    if isinstance(listen, tuple):
        return listen
    host, _, port = str(listen).rpartition(":")
    return host or "127.0.0.1", int(port)


class SocketHub:
    """Master side of the local stream-socket transport.

    A worker is identified by the ``worker`` field of the first frame it
    sends.  Each connection gets a reader thread; decoded messages go into
    one queue, whose arrival order is the master's total order.
    """

    def __init__(self, listen="127.0.0.1:0"):
        self._server = socket.create_server(_parse_address(listen))
        self.address = self._server.getsockname()[:2]
        self._queue: queue.Queue = queue.Queue()
        self._conns: dict[str, socket.socket] = {}
        self._live = 0
        self._seen_any = False
        self._lock = threading.Lock()
        self.closed = False
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        self._acceptor.start()

    def _accept_loop(self):
        while not self.closed:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._live += 1
                self._seen_any = True
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket):
        decoder = FrameDecoder()
        try:
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    break
                for msg in decoder.feed(chunk):
                    with self._lock:
                        self._conns.setdefault(msg.worker, conn)
                    self._queue.put(msg)
        except (OSError, CodecError):
            pass
        finally:
            with self._lock:
                self._live -= 1
                for w, c in list(self._conns.items()):
                    if c is conn:
                        del self._conns[w]
            self._queue.put(None)

    def recv(self, timeout=None):
        while True:
            with self._lock:
                dead = self._seen_any and self._live == 0
            if dead and self._queue.empty():
                raise TransportClosed("all workers disconnected")
            try:
                msg = self._queue.get(timeout=timeout if timeout is not None else 0.5)
            except queue.Empty:
                if timeout is not None:
                    return None
                continue
            if msg is not None:
                return msg

    def send(self, worker: str, directive) -> None:
        with self._lock:
            conn = self._conns.get(worker)
        if conn is None:
            raise TransportClosed(worker)
        try:
            conn.sendall(encode_frame(directive))
        except OSError as exc:
            raise TransportClosed(worker) from exc

    def workers(self) -> list[str]:
        with self._lock:
            return list(self._conns)

    def close(self) -> None:
        self.closed = True
        try:
            self._server.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns.values())
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()


class SocketEndpoint:
    """Worker side of the socket transport."""

    def __init__(self, address, worker: str, timeout: float = 10.0):
        self.worker = worker
        self.sock = socket.create_connection(_parse_address(address), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._decoder = FrameDecoder()
        self._ready: deque = deque()
        self.closed = False

    def send(self, msg) -> None:
        if self.closed:
            raise TransportClosed(self.worker)
        try:
            self.sock.sendall(encode_frame(msg))
        except OSError as exc:
            self.closed = True
            raise TransportClosed(self.worker) from exc

    def recv(self, timeout=None):
        """Next directive; ``timeout=0`` polls, ``None`` blocks."""
        while not self._ready:
            if self.closed:
                raise TransportClosed(self.worker)
            self.sock.settimeout(timeout if timeout is None or timeout > 0 else 0.0)
            try:
                chunk = self.sock.recv(65536)
            except (BlockingIOError, socket.timeout):
                return None
            except OSError as exc:
                self.closed = True
                raise TransportClosed(self.worker) from exc
            if not chunk:
                self.closed = True
                raise TransportClosed(self.worker)
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.popleft()

    def drain(self) -> list:
        out = []
        while True:
            try:
                msg = self.recv(timeout=0)
            except TransportClosed:
                break
            if msg is None:
                break
            out.append(msg)
        return out

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
