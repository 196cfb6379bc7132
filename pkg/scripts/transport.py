"""
Framed wire protocol between client and server.

Frame layout (little-endian):
    [4 bytes  - magic "CHTA"]
    [1 byte   - version (1)]
    [1 byte   - message type]
    [4 bytes  - payload length]
    [N bytes  - payload]
    [4 bytes  - CRC-32 over type byte + payload]

Payloads:
    HELLO                                   params digest (8) | network digest (8)
    CT_UPLOAD, BLINDED_LINEAR, RESULT,
    MASKED_SHARE                            layer u16 | seq u32 | ciphertext
    INDICATORS, NONLINEAR_SHARE             layer u16 | which/part u8 | seq u32 | ciphertext
    ERROR                                   code u16 | utf-8 text

Channels carry whole frames: SocketChannel over TCP, QueueChannel for the
in-process loopback. Both count every byte they move.
"""
from __future__ import annotations

import logging
import queue
import socket
import socketserver
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional, Tuple

log = logging.getLogger(__name__)

MAGIC = b"CHTA"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 256 * 1024 * 1024
DEFAULT_PORT = 7462

_HELLO = struct.Struct("<8s8s")
_CT = struct.Struct("<HI")
_TAGGED = struct.Struct("<HBI")
_ERROR = struct.Struct("<H")


class MsgType(IntEnum):
    HELLO = 1
    CT_UPLOAD = 2
    BLINDED_LINEAR = 3
    INDICATORS = 4
    NONLINEAR_SHARE = 5
    RESULT = 6
    ERROR = 7
    MASKED_SHARE = 8


class Which(IntEnum):
    ID1 = 1
    ID2 = 2
    E_R1 = 3
    V_VEC = 4
    R2 = 5


OFFLINE_TYPES = frozenset({MsgType.HELLO, MsgType.INDICATORS})
_CT_TYPES = frozenset({MsgType.CT_UPLOAD, MsgType.BLINDED_LINEAR, MsgType.RESULT, MsgType.MASKED_SHARE})
_TAGGED_TYPES = frozenset({MsgType.INDICATORS, MsgType.NONLINEAR_SHARE})
# bytes a CT_UPLOAD / BLINDED_LINEAR frame adds around one serialized ciphertext
CT_FRAME_OVERHEAD = HEADER.size + _CT.size + CRC.size


class TransportError(Exception):
    pass


class FrameError(TransportError):
    pass


class BadMagic(FrameError):
    pass


class BadCrc(FrameError):
    pass


class LengthError(FrameError):
    pass


class UnknownMessage(FrameError):
    pass


class TransportClosed(TransportError):
    pass


class ProtocolViolation(TransportError):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


class PeerError(TransportError):
    def __init__(self, code: int, text: str):
        super().__init__(f"peer reported error {code}: {text}")
        self.code = code
        self.text = text


@dataclass
class Message:
    type: MsgType
    layer: int = 0
    seq: int = 0
    which: int = 0
    data: bytes = b""
    code: int = 0

    @classmethod
    def hello(cls, params_digest: bytes, net_digest: bytes) -> "Message":
        return cls(MsgType.HELLO, data=bytes(params_digest) + bytes(net_digest))

    @classmethod
    def error(cls, code: int, text: str) -> "Message":
        return cls(MsgType.ERROR, code=code, data=text.encode("utf-8"))

    @property
    def digests(self) -> Tuple[bytes, bytes]:
        return self.data[:8], self.data[8:16]

    @property
    def text(self) -> str:
        return self.data.decode("utf-8", errors="replace")

    def describe(self) -> str:
        if self.type == MsgType.ERROR:
            return f"ERROR({self.code})"
        if self.type in _TAGGED_TYPES:
            return f"{self.type.name}(layer={self.layer}, which={self.which}, seq={self.seq})"
        if self.type in _CT_TYPES:
            return f"{self.type.name}(layer={self.layer}, seq={self.seq})"
        return self.type.name


def encode_payload(msg: Message) -> bytes:
    t = MsgType(msg.type)
    if t == MsgType.HELLO:
        if len(msg.data) != 16:
            raise FrameError("HELLO carries two 8-byte digests")
        return _HELLO.pack(msg.data[:8], msg.data[8:])
    if t in _CT_TYPES:
        return _CT.pack(msg.layer, msg.seq) + msg.data
    if t in _TAGGED_TYPES:
        return _TAGGED.pack(msg.layer, msg.which, msg.seq) + msg.data
    return _ERROR.pack(msg.code) + msg.data


def decode_payload(msg_type: int, payload: bytes) -> Message:
    try:
        t = MsgType(msg_type)
    except ValueError:
        raise UnknownMessage(f"unknown message type {msg_type}") from None
    try:
        if t == MsgType.HELLO:
            if len(payload) != _HELLO.size:
                raise LengthError(f"HELLO payload is {len(payload)} bytes")
            pd, nd = _HELLO.unpack(payload)
            return Message.hello(pd, nd)
        if t in _CT_TYPES:
            layer, seq = _CT.unpack_from(payload, 0)
            return Message(t, layer=layer, seq=seq, data=payload[_CT.size:])
        if t in _TAGGED_TYPES:
            layer, which, seq = _TAGGED.unpack_from(payload, 0)
            return Message(t, layer=layer, seq=seq, which=which, data=payload[_TAGGED.size:])
        (code,) = _ERROR.unpack_from(payload, 0)
        return Message(t, code=code, data=payload[_ERROR.size:])
    except struct.error as e:
        raise LengthError(f"{t.name} payload too short") from e


def _crc(msg_type: int, payload: bytes) -> int:
    return zlib.crc32(payload, zlib.crc32(bytes([msg_type]))) & 0xFFFFFFFF


def frame_encode(msg: Message) -> bytes:
    payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise LengthError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    t = int(msg.type)
    return HEADER.pack(MAGIC, VERSION, t, len(payload)) + payload + CRC.pack(_crc(t, payload))


def parse_header(header: bytes) -> Tuple[int, int]:
    if len(header) < HEADER.size:
        raise LengthError("truncated frame header")
    magic, version, msg_type, length = HEADER.unpack_from(header, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if length > MAX_PAYLOAD:
        raise LengthError(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return msg_type, length


def _finish_frame(msg_type: int, body: bytes) -> Message:
    payload, (crc,) = body[:-CRC.size], CRC.unpack(body[-CRC.size:])
    if _crc(msg_type, payload) != crc:
        raise BadCrc("frame checksum mismatch")
    return decode_payload(msg_type, payload)


def frame_decode(data: bytes) -> Message:
    """Exactly one frame -> Message."""
    msg_type, length = parse_header(data)
    total = HEADER.size + length + CRC.size
    if len(data) != total:
        raise LengthError(f"frame is {len(data)} bytes, header declares {total}")
    return _finish_frame(msg_type, data[HEADER.size:])


# --------------------------------------------------------------------------
# Byte accounting
# --------------------------------------------------------------------------

@dataclass
class ByteCounters:
    sent: int = 0
    received: int = 0
    offline: int = 0
    online: int = 0
    by_type: Counter = field(default_factory=Counter)
    by_layer_type: Counter = field(default_factory=Counter)

    def record(self, outgoing: bool, msg: Message, nbytes: int):
        if outgoing:
            self.sent += nbytes
        else:
            self.received += nbytes
        name = MsgType(msg.type).name
        self.by_type[name] += nbytes
        if msg.type in OFFLINE_TYPES:
            self.offline += nbytes
        else:
            self.online += nbytes
        if msg.type not in (MsgType.HELLO, MsgType.ERROR):
            self.by_layer_type[(msg.layer, name)] += nbytes

    @property
    def by_layer(self) -> Counter:
        out = Counter()
        for (layer, name), nbytes in self.by_layer_type.items():
            if name != MsgType.INDICATORS.name:
                out[layer] += nbytes
        return out

    def layer_bytes(self, layer: int, *names: str) -> int:
        return sum(self.by_layer_type.get((layer, name), 0) for name in names)

    def snapshot(self) -> "ByteCounters":
        return ByteCounters(self.sent, self.received, self.offline, self.online,
                            Counter(self.by_type), Counter(self.by_layer_type))

    def __sub__(self, other: "ByteCounters") -> "ByteCounters":
        by_type = Counter(self.by_type)
        by_type.subtract(other.by_type)
        by_layer_type = Counter(self.by_layer_type)
        by_layer_type.subtract(other.by_layer_type)
        return ByteCounters(self.sent - other.sent, self.received - other.received,
                            self.offline - other.offline, self.online - other.online,
                            +by_type, +by_layer_type)

    def as_dict(self) -> dict:
        return {"sent": self.sent, "received": self.received, "offline": self.offline,
                "online": self.online, "by_type": dict(self.by_type),
                "by_layer": {str(k): v for k, v in sorted(self.by_layer.items())}}


# --------------------------------------------------------------------------
# Channels
# --------------------------------------------------------------------------

class Channel:
    """One session's duplex message stream with ordering checks."""

    name = "channel"

    def __init__(self):
        self.counters = ByteCounters()
        self.closed = False

    def send(self, msg: Message):
        frame = frame_encode(msg)
        self._send_frame(frame)
        self.counters.record(True, msg, len(frame))
        log.debug("%s -> %s (%d bytes)", self.name, msg.describe(), len(frame))

    def recv(self) -> Message:
        msg, nbytes = self._recv_frame()
        self.counters.record(False, msg, nbytes)
        log.debug("%s <- %s (%d bytes)", self.name, msg.describe(), nbytes)
        if msg.type == MsgType.ERROR:
            raise PeerError(msg.code, msg.text)
        return msg

    def expect(self, msg_type: MsgType, layer: Optional[int] = None, which: Optional[int] = None) -> Message:
        msg = self.recv()
        if msg.type != msg_type:
            raise ProtocolViolation(f"expected {MsgType(msg_type).name}, got {msg.describe()}")
        if layer is not None and msg.layer != layer:
            raise ProtocolViolation(f"expected {MsgType(msg_type).name} for layer {layer}, got layer {msg.layer}")
        if which is not None and msg.which != which:
            raise ProtocolViolation(f"expected part {which} of {MsgType(msg_type).name}, got {msg.which}")
        return msg

    def send_error(self, code: int, text: str):
        try:
            self.send(Message.error(code, text))
        except (TransportError, OSError) as e:
            log.debug("could not deliver error frame: %s", e)

    def close(self):
        if not self.closed:
            self.closed = True
            log.info("%s closed: sent %d bytes, received %d bytes", self.name,
                     self.counters.sent, self.counters.received)

    def _send_frame(self, frame: bytes):
        raise NotImplementedError

    def _recv_frame(self) -> Tuple[Message, int]:
        raise NotImplementedError


class SocketChannel(Channel):
    name = "socket"

    def __init__(self, sock: socket.socket, timeout: Optional[float] = None):
        super().__init__()
        self.sock = sock
        if timeout is not None:
            sock.settimeout(timeout)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as e:
                raise TransportClosed(f"connection lost: {e}") from e
            if not chunk:
                raise TransportClosed("connection closed by peer")
            buf.extend(chunk)
        return bytes(buf)

    def _send_frame(self, frame: bytes):
        try:
            self.sock.sendall(frame)
        except OSError as e:
            raise TransportClosed(f"connection lost: {e}") from e

    def _recv_frame(self):
        header = self._recv_exact(HEADER.size)
        msg_type, length = parse_header(header)
        body = self._recv_exact(length + CRC.size)
        return _finish_frame(msg_type, body), HEADER.size + len(body)

    def close(self):
        if not self.closed:
            try:
                self.sock.close()
            finally:
                super().close()


class QueueChannel(Channel):
    """In-process end of a loopback pair; frames cross as bytes."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, name: str, timeout: float):
        super().__init__()
        self.inbox, self.outbox, self.name, self.timeout = inbox, outbox, name, timeout

    def _send_frame(self, frame: bytes):
        self.outbox.put(frame)

    def _recv_frame(self):
        try:
            frame = self.inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportClosed(f"{self.name}: no message within {self.timeout}s") from None
        if frame is None:
            raise TransportClosed(f"{self.name}: peer closed the loopback")
        return frame_decode(frame), len(frame)

    def close(self):
        if not self.closed:
            self.outbox.put(None)
            super().close()


def loopback_pair(timeout: float = 600.0) -> Tuple[QueueChannel, QueueChannel]:
    """(client end, server end)."""
    a, b = queue.Queue(), queue.Queue()
    return QueueChannel(a, b, "client", timeout), QueueChannel(b, a, "server", timeout)


def parse_endpoint(endpoint: str) -> Tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep:
        return endpoint or "127.0.0.1", DEFAULT_PORT
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ValueError(f"bad endpoint {endpoint!r} (expected host:port)") from None


def connect(endpoint: str, timeout: Optional[float] = 600.0) -> SocketChannel:
    host, port = parse_endpoint(endpoint)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise TransportClosed(f"cannot connect to {host}:{port}: {e}") from e
    ch = SocketChannel(sock, timeout)
    ch.name = f"client@{host}:{port}"
    return ch


class _SessionServer(socketserver.ThreadingTCPServer):
    # server_close waits for running sessions
    daemon_threads = False
    block_on_close = True
    allow_reuse_address = True


def make_server(endpoint: str, session_handler: Callable[[Channel], None],
                timeout: Optional[float] = 600.0) -> socketserver.ThreadingTCPServer:
    """TCP server running session_handler(channel) on its own thread per connection."""

    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            ch = SocketChannel(self.request, timeout)
            ch.name = "server@{}:{}".format(*self.client_address[:2])
            try:
                session_handler(ch)
            except Exception:
                log.exception("session from %s:%s failed", *self.client_address[:2])
            finally:
                ch.close()

    return _SessionServer(parse_endpoint(endpoint), Handler)


def serve(endpoint: str, session_handler: Callable[[Channel], None], max_sessions: Optional[int] = None,
          timeout: Optional[float] = 600.0):
    server = make_server(endpoint, session_handler, timeout)
    host, port = server.server_address[:2]
    log.info("listening on %s:%d", host, port)
    with server:
        if max_sessions is None:
            server.serve_forever()
        else:
            for _ in range(max_sessions):
                server.handle_request()
