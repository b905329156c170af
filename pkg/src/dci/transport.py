"""Framed JSON RPC over TCP or an in-process loopback.

A frame is a 4-byte big-endian length followed by that many bytes of
canonical JSON. One :class:`Channel` runs over one duplex pipe and carries
any number of concurrent requests, matched to replies by id. Either end of a
channel may call the other; events are one-way and are handled in arrival
order on the reader thread.

Addresses are strings: ``tcp://host:port`` or ``loop://name``.
"""

from __future__ import annotations

import contextvars
import inspect
import itertools
import json
import logging
import queue
import socket
import struct
import threading
import uuid
from collections.abc import Callable
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from enum import Enum
from typing import Any, BinaryIO

from dci.errors import (
    BadRequest,
    ConnectionClosed,
    DciError,
    FrameTooLarge,
    MalformedJson,
    Timeout,
    Truncated,
    UnknownOp,
    error_from_code,
)
from dci.model import canonical_json

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0


class MessageKind(str, Enum):
    REQUEST = "request"
    REPLY = "reply"
    EVENT = "event"


@dataclass(frozen=True)
class Message:
    id: str
    kind: MessageKind
    op: str
    args: Any = None
    value: Any = None
    ok: bool | None = None
    error: tuple[str, str] | None = None
    error_data: dict[str, str] | None = None

    def to_json(self) -> dict:
        body: dict[str, Any] = {"id": self.id, "kind": self.kind.value, "op": self.op}
        if self.kind is MessageKind.REPLY:
            body["ok"] = bool(self.ok)
            if self.ok:
                body["value"] = self.value
            else:
                code, detail = self.error or ("InternalError", "")
                body["error"] = {"code": code, "detail": detail}
                if self.error_data:
                    body["error"]["data"] = self.error_data
        else:
            body["args"] = {} if self.args is None else self.args
        return body

    @classmethod
    def from_json(cls, body: Any) -> Message:
        if not isinstance(body, dict):
            raise MalformedJson("message must be a JSON object")
        try:
            mid, kind, op = body["id"], MessageKind(body["kind"]), body["op"]
        except (KeyError, ValueError) as exc:
            raise MalformedJson(f"bad message header: {exc}") from exc
        if not isinstance(mid, str) or not isinstance(op, str):
            raise MalformedJson("id and op must be strings")
        if kind is MessageKind.REPLY:
            ok = body.get("ok")
            if not isinstance(ok, bool):
                raise MalformedJson("reply needs boolean ok")
            if ok:
                if set(body) != {"id", "kind", "op", "ok", "value"}:
                    raise MalformedJson(f"bad reply fields {sorted(body)}")
                return cls(mid, kind, op, value=body["value"], ok=True)
            err = body.get("error")
            if set(body) != {"id", "kind", "op", "ok", "error"} or not isinstance(err, dict):
                raise MalformedJson("failed reply needs an error object")
            code, detail, data = err.get("code"), err.get("detail", ""), err.get("data")
            if not isinstance(code, str) or not isinstance(detail, str) or set(err) - {"code", "detail", "data"}:
                raise MalformedJson("bad error object")
            if data is not None and not (
                isinstance(data, dict) and all(isinstance(k, str) and isinstance(v, str) for k, v in data.items())
            ):
                raise MalformedJson("error data must map strings to strings")
            return cls(mid, kind, op, ok=False, error=(code, detail), error_data=data)
        if set(body) != {"id", "kind", "op", "args"} or not isinstance(body["args"], dict):
            raise MalformedJson("request/event needs an args object")
        return cls(mid, kind, op, args=body["args"])


def encode_message(msg: Message) -> bytes:
    return canonical_json(msg.to_json())


def decode_message(body: bytes) -> Message:
    try:
        raw = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedJson(str(exc)) from exc
    return Message.from_json(raw)


def frame_encode(msg: Message) -> bytes:
    body = encode_message(msg)
    if len(body) > MAX_FRAME:
        raise FrameTooLarge(f"{len(body)} bytes")
    return HEADER.pack(len(body)) + body


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def frame_decode(stream: BinaryIO) -> Message:
    """Read one frame from a binary stream positioned at a frame boundary."""
    header = _read_exact(stream, HEADER.size)
    if len(header) < HEADER.size:
        raise Truncated(f"header: got {len(header)} of {HEADER.size} bytes")
    (n,) = HEADER.unpack(header)
    if n > MAX_FRAME:
        raise FrameTooLarge(f"{n} bytes")
    body = _read_exact(stream, n)
    if len(body) < n:
        raise Truncated(f"body: got {len(body)} of {n} bytes")
    return decode_message(body)


# pipes: move message bodies between the two ends of a connection


class SocketPipe:
    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._rfile = sock.makefile("rb")
        self._wlock = threading.Lock()
        self._closed = False

    def send(self, body: bytes) -> None:
        frame = HEADER.pack(len(body)) + body
        with self._wlock:
            if self._closed:
                raise ConnectionClosed("socket closed")
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc

    def recv(self) -> bytes:
        try:
            header = _read_exact(self._rfile, HEADER.size)
            if len(header) < HEADER.size:
                raise ConnectionClosed("peer closed")
            (n,) = HEADER.unpack(header)
            if n > MAX_FRAME:
                raise FrameTooLarge(f"{n} bytes")
            body = _read_exact(self._rfile, n)
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from exc
        if len(body) < n:
            raise ConnectionClosed("peer closed mid-frame")
        return body

    def close(self) -> None:
        with self._wlock:
            if self._closed:
                return
            self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


_EOF = object()


class LoopbackPipe:
    """One end of an in-memory pipe; FIFO per direction."""

    def __init__(self, inbox: queue.SimpleQueue, outbox: queue.SimpleQueue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False
        self.peer: LoopbackPipe | None = None

    def send(self, body: bytes) -> None:
        if self._closed or (self.peer is not None and self.peer._closed):
            raise ConnectionClosed("loopback closed")
        self._outbox.put(body)

    def recv(self) -> bytes:
        item = self._inbox.get()
        if item is _EOF:
            self._inbox.put(_EOF)
            raise ConnectionClosed("loopback closed")
        return item

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._outbox.put(_EOF)
        self._inbox.put(_EOF)


def pipe_pair() -> tuple[LoopbackPipe, LoopbackPipe]:
    a_to_b: queue.SimpleQueue = queue.SimpleQueue()
    b_to_a: queue.SimpleQueue = queue.SimpleQueue()
    a = LoopbackPipe(b_to_a, a_to_b)
    b = LoopbackPipe(a_to_b, b_to_a)
    a.peer, b.peer = b, a
    return a, b


# dispatch


_current = contextvars.ContextVar("dci_current_call", default=None)


@dataclass(frozen=True)
class CallContext:
    channel: Channel
    message: Message


def current_call() -> CallContext | None:
    """The request being served on this thread, if any."""
    return _current.get()


class Dispatcher:
    """Maps op names to handlers called as ``handler(**args)``."""

    def __init__(self):
        self._ops: dict[str, Callable[..., Any]] = {}

    def register(self, op: str, fn: Callable[..., Any]) -> None:
        if op in self._ops:
            raise ValueError(f"op {op!r} registered twice")
        self._ops[op] = fn

    def include(self, other: Dispatcher) -> None:
        for op, fn in other._ops.items():
            self.register(op, fn)

    def ops(self) -> list[str]:
        return sorted(self._ops)

    def handler(self, op: str) -> Callable[..., Any]:
        fn = self._ops.get(op)
        if fn is None:
            raise UnknownOp(op)
        return fn

    def dispatch(self, op: str, args: dict) -> Any:
        fn = self.handler(op)
        try:
            inspect.signature(fn).bind(**args)
        except TypeError as exc:
            raise BadRequest(f"{op}: {exc}") from exc
        return fn(**args)

    def describe(self) -> list[tuple[str, str, str]]:
        """(op, parameter list, first doc line) for every registered op."""
        rows = []
        for op in self.ops():
            fn = self._ops[op]
            params = []
            for p in inspect.signature(fn).parameters.values():
                ann = p.annotation
                if ann is inspect.Parameter.empty:
                    ann = ""
                elif not isinstance(ann, str):
                    ann = getattr(ann, "__name__", str(ann))
                text = f"{p.name}: {ann}" if ann else p.name
                if p.default is not inspect.Parameter.empty:
                    text += f" = {p.default!r}"
                params.append(text)
            doc = (inspect.getdoc(fn) or "").splitlines()
            rows.append((op, ", ".join(params), doc[0] if doc else ""))
        return rows


class Channel:
    """RPC endpoint over a pipe. Thread-safe; calls may be issued from any thread."""

    def __init__(self, pipe, dispatcher: Dispatcher | None = None, name: str = ""):
        self._pipe = pipe
        self.dispatcher = dispatcher
        self.name = name
        self._pending: dict[str, Future] = {}
        self._answered: set[str] = set()
        self._lock = threading.Lock()
        self._prefix = uuid.uuid4().hex[:8]
        self._ids = itertools.count(1)
        self._closed = threading.Event()
        self.duplicate_replies = 0
        self.on_close: list[Callable[[Channel], None]] = []
        self._reader = threading.Thread(target=self._read_loop, name=f"chan-{name or self._prefix}", daemon=True)
        self._reader.start()

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def _send(self, msg: Message) -> None:
        body = encode_message(msg)
        if len(body) > MAX_FRAME:
            raise FrameTooLarge(f"{len(body)} bytes")
        self._pipe.send(body)

    def call(self, op: str, args: dict | None = None, timeout: float | None = DEFAULT_TIMEOUT) -> Any:
        if self.closed:
            raise ConnectionClosed(f"channel {self.name} closed")
        mid = f"{self._prefix}-{next(self._ids)}"
        fut: Future = Future()
        with self._lock:
            self._pending[mid] = fut
        try:
            self._send(Message(mid, MessageKind.REQUEST, op, args=args or {}))
        except DciError:
            with self._lock:
                self._pending.pop(mid, None)
            raise
        try:
            reply: Message = fut.result(timeout=timeout)
        except FutureTimeout:
            with self._lock:
                self._pending.pop(mid, None)
            raise Timeout(f"{op} after {timeout}s") from None
        if reply.ok:
            return reply.value
        code, detail = reply.error or ("InternalError", "")
        raise error_from_code(code, detail, reply.error_data)

    def notify(self, op: str, args: dict | None = None) -> None:
        mid = f"{self._prefix}-{next(self._ids)}"
        self._send(Message(mid, MessageKind.EVENT, op, args=args or {}))

    def _read_loop(self) -> None:
        try:
            while True:
                body = self._pipe.recv()
                try:
                    msg = decode_message(body)
                except MalformedJson as exc:
                    log.warning("%s: dropping malformed frame: %s", self.name, exc)
                    continue
                if msg.kind is MessageKind.REPLY:
                    self._on_reply(msg)
                elif msg.kind is MessageKind.EVENT:
                    self._on_event(msg)
                else:
                    threading.Thread(target=self._on_request, args=(msg,), daemon=True).start()
        except ConnectionClosed:
            pass
        except FrameTooLarge as exc:
            log.warning("%s: %s; closing", self.name, exc)
        finally:
            self._shutdown()

    def _on_reply(self, msg: Message) -> None:
        with self._lock:
            fut = self._pending.pop(msg.id, None)
            if msg.id in self._answered:
                self.duplicate_replies += 1
                log.error("%s: second reply for request %s", self.name, msg.id)
                return
            self._answered.add(msg.id)
        if fut is not None:
            fut.set_result(msg)

    def _on_event(self, msg: Message) -> None:
        if self.dispatcher is None:
            return
        token = _current.set(CallContext(self, msg))
        try:
            self.dispatcher.dispatch(msg.op, msg.args)
        except Exception:
            log.exception("%s: event handler %s failed", self.name, msg.op)
        finally:
            _current.reset(token)

    def _on_request(self, msg: Message) -> None:
        _current.set(CallContext(self, msg))
        try:
            if self.dispatcher is None:
                raise UnknownOp(msg.op)
            value = self.dispatcher.dispatch(msg.op, msg.args)
            reply = Message(msg.id, MessageKind.REPLY, msg.op, value=value, ok=True)
        except DciError as exc:
            reply = Message(msg.id, MessageKind.REPLY, msg.op, ok=False, error=(exc.code, exc.detail),
                            error_data=exc.data() or None)
        except Exception as exc:
            log.exception("%s: handler %s crashed", self.name, msg.op)
            reply = Message(msg.id, MessageKind.REPLY, msg.op, ok=False, error=("InternalError", repr(exc)))
        try:
            self._send(reply)
        except FrameTooLarge as exc:
            self._send(Message(msg.id, MessageKind.REPLY, msg.op, ok=False, error=(exc.code, exc.detail)))
        except ConnectionClosed:
            pass

    def _shutdown(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        with self._lock:
            pending, self._pending = self._pending, {}
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(ConnectionClosed(f"channel {self.name} closed"))
        for cb in list(self.on_close):
            try:
                cb(self)
            except Exception:
                log.exception("close callback failed")

    def close(self) -> None:
        self._pipe.close()
        self._shutdown()


def attach(pipe, dispatcher: Dispatcher, name: str = "") -> Channel:
    """Serve ``dispatcher`` on one end of a pipe."""
    return Channel(pipe, dispatcher, name=name)


def loopback_pair(dispatcher: Dispatcher | None = None) -> tuple[Channel, LoopbackPipe]:
    """A client channel plus the pipe end a server attaches to."""
    client_end, server_end = pipe_pair()
    return Channel(client_end, dispatcher, name="loopback-client"), server_end


# services


class Service:
    """A running listener. ``address`` is the address peers should connect to."""

    def __init__(self, address: str, dispatcher: Dispatcher):
        self.address = address
        self.dispatcher = dispatcher
        self._channels: set[Channel] = set()
        self._lock = threading.Lock()
        self._closed = False

    def _adopt(self, pipe) -> Channel:
        chan = Channel(pipe, self.dispatcher, name=self.address)
        with self._lock:
            if self._closed:
                chan.close()
                raise ConnectionClosed(self.address)
            self._channels.add(chan)
        chan.on_close.append(self._forget)
        return chan

    def _forget(self, chan: Channel) -> None:
        with self._lock:
            self._channels.discard(chan)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            chans = list(self._channels)
        for c in chans:
            c.close()


class TcpService(Service):
    def __init__(self, host: str, port: int, dispatcher: Dispatcher):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(64)
        self._sock = sock
        super().__init__(f"tcp://{host}:{sock.getsockname()[1]}", dispatcher)
        self._thread = threading.Thread(target=self._accept_loop, name=f"accept-{self.address}", daemon=True)
        self._thread.start()

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            try:
                self._adopt(SocketPipe(conn))
            except ConnectionClosed:
                return

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
        super().close()


class LoopbackHub:
    """Registry of in-process services addressed as ``loop://name``."""

    def __init__(self):
        self._services: dict[str, LoopbackService] = {}
        self._lock = threading.Lock()

    def serve(self, name: str, dispatcher: Dispatcher) -> LoopbackService:
        with self._lock:
            if name in self._services:
                raise OSError(f"loop://{name} already bound")
            svc = LoopbackService(self, name, dispatcher)
            self._services[name] = svc
            return svc

    def _unbind(self, name: str) -> None:
        with self._lock:
            self._services.pop(name, None)

    def connect(self, name: str, dispatcher: Dispatcher | None = None) -> Channel:
        with self._lock:
            svc = self._services.get(name)
        if svc is None:
            raise ConnectionClosed(f"nothing listening on loop://{name}")
        client_end, server_end = pipe_pair()
        svc._adopt(server_end)
        return Channel(client_end, dispatcher, name=f"loop://{name}")


class LoopbackService(Service):
    def __init__(self, hub: LoopbackHub, name: str, dispatcher: Dispatcher):
        super().__init__(f"loop://{name}", dispatcher)
        self._hub = hub
        self._name = name

    def close(self) -> None:
        self._hub._unbind(self._name)
        super().close()


DEFAULT_HUB = LoopbackHub()


def parse_address(address: str) -> tuple[str, str, int]:
    scheme, sep, rest = address.partition("://")
    if not sep:
        scheme, rest = "tcp", address
    if scheme == "loop":
        return scheme, rest, 0
    if scheme != "tcp":
        raise ValueError(f"unsupported address scheme {scheme!r}")
    host, _, port = rest.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad tcp address {address!r}")
    return scheme, host, int(port)


def serve(address: str, dispatcher: Dispatcher, hub: LoopbackHub | None = None) -> Service:
    scheme, host, port = parse_address(address)
    if scheme == "loop":
        return (hub or DEFAULT_HUB).serve(host, dispatcher)
    return TcpService(host, port, dispatcher)


def connect(
    address: str,
    dispatcher: Dispatcher | None = None,
    hub: LoopbackHub | None = None,
    timeout: float = 10.0,
) -> Channel:
    scheme, host, port = parse_address(address)
    if scheme == "loop":
        return (hub or DEFAULT_HUB).connect(host, dispatcher)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectionClosed(f"{address}: {exc}") from exc
    sock.settimeout(None)
    return Channel(SocketPipe(sock), dispatcher, name=address)


class Connector:
    """Caches one channel per address and reconnects when a channel drops."""

    def __init__(self, hub: LoopbackHub | None = None, dispatcher: Dispatcher | None = None):
        self.hub = hub or DEFAULT_HUB
        self.dispatcher = dispatcher
        self._channels: dict[str, Channel] = {}
        self._lock = threading.Lock()

    def get(self, address: str) -> Channel:
        with self._lock:
            chan = self._channels.get(address)
            if chan is not None and not chan.closed:
                return chan
            chan = connect(address, self.dispatcher, hub=self.hub)
            self._channels[address] = chan
            return chan

    def drop(self, address: str) -> None:
        with self._lock:
            chan = self._channels.pop(address, None)
        if chan is not None:
            chan.close()

    def close(self) -> None:
        with self._lock:
            chans, self._channels = list(self._channels.values()), {}
        for c in chans:
            c.close()
