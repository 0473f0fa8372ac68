"""Edge <-> cloud transport.

Wire format of one frame, all integers little-endian::

    magic     4 bytes  b"PHT1"
    version   u8       1
    msg_type  u8       0=features 1=labels 2=gradient 3=control
    epoch     u32
    batch_id  u32
    dtype     u8       0=float32
    rank      u8
    dims      rank x u32
    payload   prod(dims) float32, row-major
    crc32     u32      over the payload bytes

Both transports move encoded bytes, so the loopback path exercises the same
codec as the socket path.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ProtocolError, TransportError

MAGIC = b"PHT1"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sBBIIBB")
_U32 = struct.Struct("<I")


class MsgType(IntEnum):
    FEATURES = 0
    LABELS = 1
    GRADIENT = 2
    CONTROL = 3


# control-frame opcodes, carried as the first payload value
CTRL_EPOCH_BEGIN = 1.0
CTRL_EPOCH_END = 2.0
CTRL_SHUTDOWN = 3.0
CTRL_ACK = 4.0
CTRL_ERROR = 5.0


@dataclass
class Frame:
    msg_type: int
    epoch: int
    batch_id: int
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))
    version: int = VERSION
    dtype: int = DTYPE_F32

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype="<f4")
        if self.msg_type not in MsgType._value2member_map_:
            raise ProtocolError(ProtocolError.BAD_TYPE, f"unknown msg_type {self.msg_type}")

    @property
    def dims(self):
        return tuple(self.payload.shape)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            (self.msg_type, self.epoch, self.batch_id, self.version, self.dtype, self.dims)
            == (other.msg_type, other.epoch, other.batch_id, other.version, other.dtype, other.dims)
            and self.payload.tobytes() == other.payload.tobytes()
        )


def encode(frame: Frame) -> bytes:
    dims = frame.dims
    if len(dims) > 255:
        raise ProtocolError(ProtocolError.SHAPE, "rank exceeds 255")
    body = frame.payload.tobytes()
    head = _HEADER.pack(MAGIC, frame.version, int(frame.msg_type), frame.epoch, frame.batch_id, frame.dtype, len(dims))
    dim_bytes = b"".join(_U32.pack(d) for d in dims)
    return head + dim_bytes + body + _U32.pack(zlib.crc32(body))


def _need(buf, n, what):
    if len(buf) < n:
        raise ProtocolError(ProtocolError.TRUNCATED, f"{what}: need {n} bytes, have {len(buf)}")


def _parse_header(head: bytes):
    magic, version, msg_type, epoch, batch_id, dtype, rank = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(ProtocolError.BAD_MAGIC, repr(magic))
    if version != VERSION:
        raise ProtocolError(ProtocolError.BAD_VERSION, str(version))
    if msg_type not in MsgType._value2member_map_:
        raise ProtocolError(ProtocolError.BAD_TYPE, str(msg_type))
    if dtype != DTYPE_F32:
        raise ProtocolError(ProtocolError.BAD_DTYPE, str(dtype))
    return msg_type, epoch, batch_id, rank


def _build(msg_type, epoch, batch_id, dims, body, crc_bytes):
    if _U32.unpack(crc_bytes)[0] != zlib.crc32(body):
        raise ProtocolError(ProtocolError.CRC, f"frame epoch={epoch} batch={batch_id}")
    payload = np.frombuffer(body, dtype="<f4").reshape(dims).copy()
    return Frame(msg_type, epoch, batch_id, payload)


def decode(data: bytes) -> Frame:
    data = bytes(data)
    _need(data, _HEADER.size, "header")
    msg_type, epoch, batch_id, rank = _parse_header(data[: _HEADER.size])
    pos = _HEADER.size
    _need(data, pos + 4 * rank, "dims")
    dims = tuple(_U32.unpack_from(data, pos + 4 * i)[0] for i in range(rank))
    pos += 4 * rank
    n = 4 * int(np.prod(dims, dtype=np.int64))
    _need(data, pos + n + 4, "payload")
    if len(data) != pos + n + 4:
        raise ProtocolError(ProtocolError.SHAPE, f"{len(data) - pos - n - 4} trailing bytes")
    return _build(msg_type, epoch, batch_id, dims, data[pos : pos + n], data[pos + n : pos + n + 4])


def read_frame(read_exact) -> Frame:
    """Decode one frame from a stream; ``read_exact(n)`` must return n bytes or raise."""
    msg_type, epoch, batch_id, rank = _parse_header(read_exact(_HEADER.size))
    dims = tuple(_U32.unpack(read_exact(4))[0] for _ in range(rank))
    body = read_exact(4 * int(np.prod(dims, dtype=np.int64)))
    return _build(msg_type, epoch, batch_id, dims, body, read_exact(4))


def control(opcode: float, epoch: int = 0, batch_id: int = 0, *values) -> Frame:
    return Frame(MsgType.CONTROL, epoch, batch_id, np.array([opcode, *values], np.float32))


class Endpoint:
    """One side of a duplex connection.  Subclasses move raw bytes."""

    name = "endpoint"

    def __init__(self, timeout_s: float = 30.0):
        self.timeout_s = timeout_s
        self.sent_frames: list[tuple[int, int, int, tuple]] = []
        self._send_lock = threading.Lock()

    def send(self, frame: Frame) -> None:
        data = encode(frame)
        with self._send_lock:
            self._send_bytes(data)
            # (msg_type, epoch, batch_id, dims) of everything emitted, for audits
            self.sent_frames.append((int(frame.msg_type), frame.epoch, frame.batch_id, frame.dims))

    def recv(self, timeout: float | None = None) -> Frame:
        return self._recv_frame(self.timeout_s if timeout is None else timeout)

    def close(self):
        pass

    def _send_bytes(self, data: bytes):
        raise NotImplementedError

    def _recv_frame(self, timeout):
        raise NotImplementedError


_CLOSED = object()


class LoopbackEndpoint(Endpoint):
    name = "loopback"

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout_s=30.0):
        super().__init__(timeout_s)
        self._inbox, self._outbox = inbox, outbox
        self.closed = False
        self.peer: LoopbackEndpoint | None = None

    def _send_bytes(self, data):
        if self.closed or self.peer is None or self.peer.closed:
            raise TransportError("loopback peer is closed")
        self._outbox.put(data)

    def _recv_frame(self, timeout):
        if self.closed:
            raise TransportError("endpoint is closed")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"no frame within {timeout}s") from None
        if item is _CLOSED:
            raise TransportError("connection closed by peer")
        return decode(item)

    def close(self):
        if not self.closed:
            self.closed = True
            self._outbox.put(_CLOSED)


def loopback_transport(timeout_s: float = 30.0):
    """Return ``(edge, cloud)`` endpoints joined by in-process queues."""
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    edge = LoopbackEndpoint(b_to_a, a_to_b, timeout_s)
    cloud = LoopbackEndpoint(a_to_b, b_to_a, timeout_s)
    edge.peer, cloud.peer = cloud, edge
    return edge, cloud


class SocketEndpoint(Endpoint):
    name = "socket"

    def __init__(self, sock: socket.socket, timeout_s=30.0):
        super().__init__(timeout_s)
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_bytes(self, data):
        try:
            self.sock.settimeout(self.timeout_s)
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_exact(self, n):
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                raise TransportError(f"no data within {self.sock.gettimeout()}s") from None
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed by peer")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _recv_frame(self, timeout):
        self.sock.settimeout(timeout)
        return read_frame(self._read_exact)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def socket_transport(host: str = "127.0.0.1", port: int = 0, timeout_s: float = 30.0, retries: int = 3):
    """Return ``(edge, cloud)`` endpoints over one local TCP stream.

    The cloud side listens on ``(host, port)``; ``port=0`` picks a free port.
    """
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        server.bind((host, port))
    except OSError as exc:
        server.close()
        raise TransportError(f"cannot bind {host}:{port}: {exc}") from exc
    server.listen(1)
    server.settimeout(timeout_s)
    addr = server.getsockname()
    last_exc = None
    client = None
    for attempt in range(retries + 1):
        client = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            client.connect(addr)
            break
        except OSError as exc:
            client.close()
            last_exc = exc
    else:
        server.close()
        raise TransportError(f"connect to {addr} failed: {last_exc}", retries=retries)
    try:
        conn, _ = server.accept()
    except OSError as exc:
        client.close()
        raise TransportError(f"accept failed: {exc}", retries=retries) from exc
    finally:
        server.close()
    return SocketEndpoint(client, timeout_s), SocketEndpoint(conn, timeout_s)


def make_transport(kind: str = "loopback", host: str = "127.0.0.1", port: int = 0, timeout_s: float = 30.0):
    if kind == "loopback":
        return loopback_transport(timeout_s)
    if kind == "socket":
        return socket_transport(host, port, timeout_s)
    raise ConfigError(f"unknown transport {kind!r}")
