"""Length-prefixed binary RPC for knowledge bank operations.

Frame layout (little-endian)::

    magic "CRLS" | version u8 | msg_type u8 | request_id u64 | payload_len u32 | payload

Responses reuse the request's msg_type and request_id; failures come back as
msg_type 255 with ``u16 code, u16-prefixed message``. A single connection may
carry pipelined requests and the server may answer them out of order.
"""

from __future__ import annotations

import itertools
import logging
import signal
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bank import KnnResult, KnowledgeBank, ShardStats
from .core import (
    CarlsError,
    ConfigError,
    DimensionMismatch,
    EmbeddingEntry,
    FeatureRecord,
    KnowledgeKey,
    MalformedPayload,
    MalformedRecord,
    NonFinite,
    Reader,
    UnknownMessageType,
    UnknownNamespace,
    VersionMismatch,
    Writer,
    read_entry,
    read_record,
    write_entry,
    write_record,
)

log = logging.getLogger(__name__)

MAGIC = b"CRLS"
PROTOCOL_VERSION = 1
HEADER = struct.Struct("<4sBBQI")
HEADER_SIZE = HEADER.size  # 18
MAX_FRAME = 16 * 1024 * 1024
METRICS = ("cosine", "neg_l2")


class MsgType(IntEnum):
    LOOKUP_EMB = 1
    SET_EMB = 2
    UPDATE_GRAD = 3
    LOOKUP_FEAT = 4
    SET_FEAT = 5
    KNN = 6
    STATS = 7
    TICK = 8
    ERROR = 255


class Timeout(CarlsError, TimeoutError):
    code = 10


class ConnectionLost(CarlsError, ConnectionError):
    code = 11


class RemoteError(CarlsError):
    """An Error frame returned by the server."""

    def __init__(self, code: int, message: str) -> None:
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.message = message


_ERROR_CLASSES = {
    cls.code: cls
    for cls in (
        MalformedPayload, VersionMismatch, UnknownMessageType, UnknownNamespace,
        DimensionMismatch, NonFinite, MalformedRecord, ConfigError,
    )
}


# --------------------------------------------------------------------------
# messages


@dataclass
class LookupEmb:
    keys: List[KnowledgeKey]
    create: bool = True
    msg_type = MsgType.LOOKUP_EMB

    def pack(self, w: Writer) -> None:
        w.u8(int(self.create)).u32(len(self.keys))
        for k in self.keys:
            w.key(k)

    @classmethod
    def unpack(cls, r: Reader) -> "LookupEmb":
        create = _flag(r)
        return cls(_keys(r), create)


@dataclass
class SetEmb:
    key: KnowledgeKey
    vector: np.ndarray
    version: int = 0
    msg_type = MsgType.SET_EMB

    def pack(self, w: Writer) -> None:
        w.key(self.key).vector(self.vector).u64(self.version)

    @classmethod
    def unpack(cls, r: Reader) -> "SetEmb":
        return cls(r.key(), r.vector(), r.u64())


@dataclass
class UpdateGrad:
    key: KnowledgeKey
    gradient: np.ndarray
    learning_rate: float
    source: str = ""
    msg_type = MsgType.UPDATE_GRAD

    def pack(self, w: Writer) -> None:
        w.key(self.key).vector(self.gradient).f32(self.learning_rate).str16(self.source)

    @classmethod
    def unpack(cls, r: Reader) -> "UpdateGrad":
        return cls(r.key(), r.vector(), r.f32(), r.str16())


@dataclass
class LookupFeat:
    keys: List[KnowledgeKey]
    msg_type = MsgType.LOOKUP_FEAT

    def pack(self, w: Writer) -> None:
        w.u32(len(self.keys))
        for k in self.keys:
            w.key(k)

    @classmethod
    def unpack(cls, r: Reader) -> "LookupFeat":
        return cls(_keys(r))


@dataclass
class SetFeat:
    key: KnowledgeKey
    record: FeatureRecord
    msg_type = MsgType.SET_FEAT

    def pack(self, w: Writer) -> None:
        write_record(w.key(self.key), self.record)

    @classmethod
    def unpack(cls, r: Reader) -> "SetFeat":
        return cls(r.key(), read_record(r))


@dataclass
class Knn:
    namespace: str
    query: np.ndarray
    k: int
    metric: str = "cosine"
    msg_type = MsgType.KNN

    def pack(self, w: Writer) -> None:
        w.str16(self.namespace).vector(self.query).u32(self.k).u8(METRICS.index(self.metric))

    @classmethod
    def unpack(cls, r: Reader) -> "Knn":
        ns, q, k, m = r.str16(), r.vector(), r.u32(), r.u8()
        if m >= len(METRICS):
            raise MalformedPayload(f"unknown metric id {m}")
        return cls(ns, q, k, METRICS[m])


@dataclass
class Stats:
    msg_type = MsgType.STATS

    def pack(self, w: Writer) -> None:
        pass

    @classmethod
    def unpack(cls, r: Reader) -> "Stats":
        return cls()


@dataclass
class Tick:
    msg_type = MsgType.TICK

    def pack(self, w: Writer) -> None:
        pass

    @classmethod
    def unpack(cls, r: Reader) -> "Tick":
        return cls()


REQUESTS = {c.msg_type: c for c in (LookupEmb, SetEmb, UpdateGrad, LookupFeat, SetFeat, Knn, Stats, Tick)}


def _flag(r: Reader) -> bool:
    b = r.u8()
    if b > 1:
        raise MalformedPayload(f"bad boolean {b}")
    return bool(b)


def _keys(r: Reader) -> List[KnowledgeKey]:
    n = r.u32()
    if n * 5 > r.remaining:
        raise MalformedPayload(f"truncated key list of length {n}")
    return [r.key() for _ in range(n)]


# response payloads, keyed by the request type they answer


def pack_response(msg_type: MsgType, result, w: Writer) -> None:
    if msg_type is MsgType.LOOKUP_EMB:
        w.u32(len(result))
        for e in result:
            if e is None:
                w.u8(0)
            else:
                write_entry(w.u8(1), e)
    elif msg_type is MsgType.LOOKUP_FEAT:
        w.u32(len(result))
        for rec in result:
            if rec is None:
                w.u8(0)
            else:
                write_record(w.u8(1), rec)
    elif msg_type is MsgType.KNN:
        w.u32(len(result.hits))
        for key, score in result.hits:
            w.key(key).f32(score)
    elif msg_type is MsgType.STATS:
        w.u32(len(result))
        for s in result:
            w.u32(s.index).u64(s.entries).u64(s.features).u64(s.pending_keys).u64(s.clock).u64(s.bytes)
    elif msg_type is MsgType.TICK:
        w.u32(result)
    elif msg_type is MsgType.ERROR:
        code, message = result
        w.u16(code).str16(message[:4096])
    # SetEmb / UpdateGrad / SetFeat acknowledge with an empty payload


def unpack_response(msg_type: int, r: Reader):
    if msg_type == MsgType.LOOKUP_EMB:
        n = r.u32()
        return [read_entry(r) if _flag(r) else None for _ in range(n)]
    if msg_type == MsgType.LOOKUP_FEAT:
        n = r.u32()
        return [read_record(r) if _flag(r) else None for _ in range(n)]
    if msg_type == MsgType.KNN:
        n = r.u32()
        return KnnResult([(r.key(), r.f32()) for _ in range(n)])
    if msg_type == MsgType.STATS:
        n = r.u32()
        return [ShardStats(r.u32(), r.u64(), r.u64(), r.u64(), r.u64(), r.u64()) for _ in range(n)]
    if msg_type == MsgType.TICK:
        return r.u32()
    if msg_type == MsgType.ERROR:
        return RemoteError(r.u16(), r.str16())
    if msg_type in (MsgType.SET_EMB, MsgType.UPDATE_GRAD, MsgType.SET_FEAT):
        return None
    raise UnknownMessageType(f"unknown msg_type {msg_type}")


# --------------------------------------------------------------------------
# frames


@dataclass(frozen=True)
class Header:
    magic: bytes
    version: int
    msg_type: int
    request_id: int
    payload_len: int


def frame(msg_type: int, request_id: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, PROTOCOL_VERSION, msg_type, request_id, len(payload)) + payload


def parse_header(data: bytes) -> Header:
    if len(data) < HEADER_SIZE:
        raise MalformedPayload("truncated frame header")
    return Header(*HEADER.unpack_from(data))


def check_header(h: Header, max_frame: int = MAX_FRAME) -> None:
    if h.magic != MAGIC:
        raise MalformedPayload(f"bad magic {h.magic!r}")
    if h.version != PROTOCOL_VERSION:
        raise VersionMismatch(f"protocol version {h.version}, expected {PROTOCOL_VERSION}")
    if HEADER_SIZE + h.payload_len > max_frame:
        raise MalformedPayload(f"frame of {h.payload_len} bytes exceeds limit {max_frame}")


def encode_request(req, request_id: int) -> bytes:
    w = Writer()
    req.pack(w)
    return frame(req.msg_type, request_id, w.getvalue())


def decode_request(data: bytes, max_frame: int = MAX_FRAME):
    """Parse one complete request frame into ``(request_id, message)``."""
    h = parse_header(data)
    check_header(h, max_frame)
    payload = data[HEADER_SIZE:]
    if len(payload) != h.payload_len:
        raise MalformedPayload("payload length does not match header")
    return h.request_id, decode_payload(h.msg_type, payload)


def decode_payload(msg_type: int, payload: bytes):
    cls = REQUESTS.get(msg_type)
    if cls is None:
        raise UnknownMessageType(f"unknown msg_type {msg_type}")
    r = Reader(payload)
    msg = cls.unpack(r)
    r.expect_end()
    return msg


def encode_response(msg_type: int, result, request_id: int) -> bytes:
    w = Writer()
    pack_response(MsgType(msg_type), result, w)
    return frame(msg_type, request_id, w.getvalue())


def encode_error(exc: BaseException, request_id: int) -> bytes:
    code = getattr(exc, "code", 8) if isinstance(exc, CarlsError) else 8
    return encode_response(MsgType.ERROR, (code, f"{type(exc).__name__}: {exc}"), request_id)


def decode_response(data: bytes):
    """Parse one complete response frame into ``(request_id, msg_type, result)``."""
    h = parse_header(data)
    check_header(h)
    r = Reader(data[HEADER_SIZE:])
    result = unpack_response(h.msg_type, r)
    r.expect_end()
    return h.request_id, h.msg_type, result


# --------------------------------------------------------------------------
# server side


class Dispatcher:
    """Maps decoded requests onto knowledge bank calls."""

    def __init__(self, bank: KnowledgeBank, max_frame: int = MAX_FRAME) -> None:
        self.bank = bank
        self.max_frame = max_frame

    def execute(self, msg):
        bank = self.bank
        if isinstance(msg, LookupEmb):
            return bank.lookup_embeddings(msg.keys, msg.create)
        if isinstance(msg, SetEmb):
            return bank.set_embedding(msg.key, msg.vector, msg.version)
        if isinstance(msg, UpdateGrad):
            return bank.update_gradient(msg.key, msg.gradient, msg.learning_rate, msg.source)
        if isinstance(msg, LookupFeat):
            return bank.lookup_features(msg.keys)
        if isinstance(msg, SetFeat):
            return bank.set_features(msg.key, msg.record)
        if isinstance(msg, Knn):
            return bank.knn_search(msg.namespace, msg.query, msg.k, msg.metric)
        if isinstance(msg, Stats):
            return bank.stats()
        if isinstance(msg, Tick):
            return bank.tick_expiry()
        raise UnknownMessageType(type(msg).__name__)

    def handle(self, h: Header, payload: bytes) -> bytes:
        """Answer one framed request; never raises."""
        try:
            check_header(h, self.max_frame)
            msg = decode_payload(h.msg_type, payload)
            return encode_response(h.msg_type, self.execute(msg), h.request_id)
        except Exception as exc:  # every failure becomes an Error frame
            if not isinstance(exc, CarlsError):
                log.exception("request %d failed", h.request_id)
            return encode_error(exc, h.request_id)


def _recv_exact(sock, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


class _Connection:
    def __init__(self, server: "BankServer", sock: socket.socket) -> None:
        self.server = server
        self.sock = sock
        self.write_lock = threading.Lock()
        self.inflight = 0
        self.idle = threading.Condition()

    def send(self, data: bytes) -> None:
        with self.write_lock:
            try:
                self.sock.sendall(data)
            except OSError:
                pass  # peer went away; the reader notices and closes

    def _run(self, h: Header, payload: bytes) -> None:
        try:
            self.send(self.server.dispatcher.handle(h, payload))
        finally:
            with self.idle:
                self.inflight -= 1
                self.idle.notify_all()

    def serve(self) -> None:
        try:
            while True:
                head = _recv_exact(self.sock, HEADER_SIZE)
                if head is None:
                    break
                h = parse_header(head)
                if HEADER_SIZE + h.payload_len > self.server.max_frame:
                    # cannot skip an oversized payload safely: answer and drop the stream
                    self.send(encode_error(MalformedPayload("frame exceeds size limit"), h.request_id))
                    break
                payload = _recv_exact(self.sock, h.payload_len)
                if payload is None:
                    break
                with self.idle:
                    self.inflight += 1
                self.server.pool.submit(self._run, h, payload)
        except OSError:
            pass
        finally:
            with self.idle:
                self.idle.wait_for(lambda: self.inflight == 0, timeout=30)
            try:
                self.sock.close()
            except OSError:
                pass
            self.server._forget(self)


class BankServer:
    """Threaded TCP server; one reader thread per connection plus a shared worker pool."""

    def __init__(
        self,
        bank: KnowledgeBank,
        host: str = "127.0.0.1",
        port: int = 0,
        max_frame: int = MAX_FRAME,
        workers: int = 8,
        expiry_ms: Optional[float] = None,
    ) -> None:
        self.bank = bank
        self.dispatcher = Dispatcher(bank, max_frame)
        self.max_frame = max_frame
        self.pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="bank")
        self.expiry_ms = expiry_ms
        self._sock = socket.create_server((host, port), reuse_port=False)
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._conns: set = set()
        self._lock = threading.Lock()
        self._threads: List[threading.Thread] = []

    @property
    def address(self) -> Tuple[str, int]:
        return self._sock.getsockname()[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    @property
    def running(self) -> bool:
        """True while the accept loop is alive."""
        return not self._stop.is_set() and any(t.is_alive() for t in self._threads)

    def _forget(self, conn: _Connection) -> None:
        with self._lock:
            self._conns.discard(conn)

    def _expiry_loop(self) -> None:
        period = self.expiry_ms / 1000.0
        while not self._stop.wait(max(period / 2, 0.001)):
            self.bank.flush_older_than(period)

    def serve_forever(self) -> None:
        if self.expiry_ms is not None:
            t = threading.Thread(target=self._expiry_loop, daemon=True)
            t.start()
            self._threads.append(t)
        while not self._stop.is_set():
            try:
                sock, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(self, sock)
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=conn.serve, daemon=True).start()

    def start(self) -> "BankServer":
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=2)
        self.pool.shutdown(wait=False, cancel_futures=True)

    def __enter__(self) -> "BankServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(bank: KnowledgeBank, endpoint: str, ready=None, **kwargs) -> None:
    """Serve ``bank`` on ``host:port`` until SIGINT/SIGTERM.

    ``ready`` is called with the bound endpoint once the socket listens.
    """
    host, port = parse_endpoint(endpoint)
    server = BankServer(bank, host, port, **kwargs)

    def _shutdown(signum, _frame):
        log.info("signal %d, shutting down", signum)
        server._stop.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, _shutdown)
    if ready is not None:
        ready(server.endpoint)
    try:
        server.serve_forever()
    finally:
        server.stop()


def parse_endpoint(endpoint: str) -> Tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


# --------------------------------------------------------------------------
# client side


class LoopbackTransport:
    """In-process stand-in for a socket: frames are answered synchronously."""

    def __init__(self, dispatcher: Dispatcher) -> None:
        self.dispatcher = dispatcher
        self._inbox = bytearray()
        self._outbox = bytearray()
        self.closed = False

    def sendall(self, data: bytes) -> None:
        if self.closed:
            raise BrokenPipeError("loopback closed")
        self._inbox.extend(data)
        while len(self._inbox) >= HEADER_SIZE:
            h = parse_header(self._inbox)
            if len(self._inbox) < HEADER_SIZE + h.payload_len:
                break
            payload = bytes(self._inbox[HEADER_SIZE : HEADER_SIZE + h.payload_len])
            del self._inbox[: HEADER_SIZE + h.payload_len]
            self._outbox.extend(self.dispatcher.handle(h, payload))

    def recv(self, n: int) -> bytes:
        if not self._outbox:
            if self.closed:
                return b""
            raise socket.timeout("loopback has no pending response")
        out = bytes(self._outbox[:n])
        del self._outbox[:n]
        return out

    def settimeout(self, t) -> None:
        pass

    def close(self) -> None:
        self.closed = True


class Client:
    """Blocking client for one connection; use one per thread.

    Calls are at-most-once: a timed-out request is never resent, and its late
    response is discarded when it arrives.
    """

    def __init__(self, endpoint=None, timeout: float = 5.0, transport=None, connect_timeout: float = 5.0) -> None:
        self.timeout = timeout
        self._ids = itertools.count(1)
        self._abandoned: set = set()
        self._buf = bytearray()
        if transport is not None:
            self._sock = transport
        else:
            host, port = parse_endpoint(endpoint)
            try:
                self._sock = socket.create_connection((host, port), timeout=connect_timeout)
            except OSError as exc:
                raise ConnectionLost(f"cannot connect to {endpoint}: {exc}") from None
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def loopback(cls, bank: KnowledgeBank, **kwargs) -> "Client":
        return cls(transport=LoopbackTransport(Dispatcher(bank)), **kwargs)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _read_frame(self, deadline: float) -> bytes:
        while True:
            if len(self._buf) >= HEADER_SIZE:
                h = parse_header(self._buf)
                check_header(h)
                total = HEADER_SIZE + h.payload_len
                if len(self._buf) >= total:
                    out = bytes(self._buf[:total])
                    del self._buf[:total]
                    return out
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise Timeout("timed out waiting for response")
            self._sock.settimeout(remaining)
            try:
                chunk = self._sock.recv(1 << 16)
            except socket.timeout:
                raise Timeout("timed out waiting for response") from None
            except OSError as exc:
                raise ConnectionLost(str(exc)) from None
            if not chunk:
                raise ConnectionLost("server closed the connection")
            self._buf.extend(chunk)

    def call_batch(self, requests: Sequence, return_exceptions: bool = False) -> list:
        """Pipeline ``requests`` on this connection; results come back in request order."""
        ids = [next(self._ids) for _ in requests]
        data = b"".join(encode_request(req, rid) for req, rid in zip(requests, ids))
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise ConnectionLost(str(exc)) from None
        results: Dict[int, object] = {}
        wanted = set(ids)
        deadline = time.monotonic() + self.timeout
        try:
            while wanted:
                rid, _, result = decode_response(self._read_frame(deadline))
                if rid in wanted:
                    wanted.discard(rid)
                    results[rid] = result
                else:
                    self._abandoned.discard(rid)
        except Timeout:
            self._abandoned |= wanted
            raise
        out = [results[rid] for rid in ids]
        if not return_exceptions:
            for r in out:
                if isinstance(r, RemoteError):
                    raise r
        return out

    def call(self, request):
        return self.call_batch([request])[0]


def _raise_local(err: RemoteError):
    cls = _ERROR_CLASSES.get(err.code)
    if cls is None:
        raise err
    raise cls(err.message) from err


class RemoteBank:
    """Knowledge bank API over an rpc Client (same method names as KnowledgeBank)."""

    def __init__(self, client: Client) -> None:
        self.client = client

    @classmethod
    def connect(cls, endpoint: str, timeout: float = 5.0) -> "RemoteBank":
        return cls(Client(endpoint, timeout=timeout))

    def _call(self, req):
        try:
            return self.client.call(req)
        except RemoteError as err:
            _raise_local(err)

    def _batch(self, reqs):
        if not reqs:
            return []
        try:
            return self.client.call_batch(reqs)
        except RemoteError as err:
            _raise_local(err)

    def set_embedding(self, key, vector, version: int = 0) -> None:
        self._call(SetEmb(key, np.asarray(vector, np.float32), version))

    def set_embeddings(self, items) -> None:
        self._batch([SetEmb(k, np.asarray(v, np.float32), ver) for k, v, ver in items])

    def lookup_embeddings(self, keys, create: bool = True) -> List[Optional[EmbeddingEntry]]:
        return self._call(LookupEmb(list(keys), create))

    def update_gradient(self, key, gradient, learning_rate: float, source: str = "") -> None:
        self._call(UpdateGrad(key, np.asarray(gradient, np.float32), learning_rate, source))

    def update_gradients(self, items, source: str = "") -> None:
        self._batch([UpdateGrad(k, np.asarray(g, np.float32), lr, source) for k, g, lr in items])

    def set_features(self, key, record: FeatureRecord) -> None:
        self._call(SetFeat(key, record))

    def set_features_many(self, items) -> None:
        self._batch([SetFeat(k, rec) for k, rec in items])

    def lookup_features(self, keys) -> List[Optional[FeatureRecord]]:
        return self._call(LookupFeat(list(keys)))

    def knn_search(self, namespace: str, query, k: int, metric: str = "cosine") -> KnnResult:
        return self._call(Knn(namespace, np.asarray(query, np.float32), k, metric))

    def stats(self) -> List[ShardStats]:
        return self._call(Stats())

    def tick_expiry(self) -> int:
        return self._call(Tick())

    def close(self) -> None:
        self.client.close()
