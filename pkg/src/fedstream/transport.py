"""Streamable framed message layer.

Any payload is split into frames of at most one chunk (1 MiB by default) and
multiplexed over a driver connection, so no single message ever has to fit a
transport's one-shot size limit.  Frames from concurrent streams interleave;
the receiving side reassembles per stream and rejects gaps, regressions, and
corrupted payloads.

Frame wire layout, little-endian, 24-byte header:

- magic u16 (``b"SF"``), version u8, flags u8 (bit0 BEGIN, bit1 END, bit2 META)
- stream_id u64, seq u32 (0-based per stream)
- payload_len u32 (<= 1 MiB), crc32 u32 over the payload, then the payload

Two drivers are bundled: an in-memory channel and TCP.  Both are ordered and
reliable; the in-memory channel moves Frame objects, TCP moves the encoded
layout above.  Flow control is a per-stream window of in-flight frames
(default 16): a frame occupies its slot from creation until the receiving
side has consumed it, so sender-side buffering is bounded without a credit
protocol.
"""

from __future__ import annotations

import enum
import logging
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Union

from .metering import MemoryMeter

log = logging.getLogger(__name__)

FRAME_MAGIC = 0x4653  # b"SF" little-endian
FRAME_VERSION = 1
FRAME_HEADER = struct.Struct("<HBBQIII")
FRAME_HEADER_SIZE = FRAME_HEADER.size  # 24

FLAG_BEGIN = 0x01
FLAG_END = 0x02
FLAG_META = 0x04

MIN_CHUNK_SIZE = 4 << 10
MAX_CHUNK_SIZE = 1 << 20
DEFAULT_CHUNK_SIZE = 1 << 20
DEFAULT_WINDOW = 16
DEFAULT_STREAM_TIMEOUT = 30.0

PULL_MAGIC = b"PULL"


class TransportError(RuntimeError):
    """Send-path failure (duplicate stream, closed driver, ...)."""

    def __init__(self, message: str, stream_id: Optional[int] = None, last_seq: int = -1):
        super().__init__(message)
        self.stream_id = stream_id
        self.last_seq = last_seq


class FrameCorrupt(RuntimeError):
    """CRC mismatch on one frame."""

    def __init__(self, seq: int):
        super().__init__(f"crc mismatch at frame {seq}")
        self.seq = seq


class ProtocolError(RuntimeError):
    """Sequencing violation: gap, regression, or misplaced BEGIN/END."""


class StreamTimeout(TimeoutError):
    """No frame arrived for an open stream within the idle timeout."""


@dataclass
class Frame:
    flags: int
    stream_id: int
    seq: int
    payload: bytes
    crc32: int = -1
    _release_cb: Optional[Callable[[], None]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.crc32 < 0:
            self.crc32 = zlib.crc32(self.payload)

    @property
    def begin(self) -> bool:
        return bool(self.flags & FLAG_BEGIN)

    @property
    def end(self) -> bool:
        return bool(self.flags & FLAG_END)

    @property
    def meta(self) -> bool:
        return bool(self.flags & FLAG_META)

    def crc_ok(self) -> bool:
        return zlib.crc32(self.payload) == self.crc32

    def encode(self) -> bytes:
        return (
            FRAME_HEADER.pack(
                FRAME_MAGIC,
                FRAME_VERSION,
                self.flags,
                self.stream_id,
                self.seq,
                len(self.payload),
                self.crc32,
            )
            + self.payload
        )

    @classmethod
    def decode_header(cls, header: bytes) -> tuple[int, int, int, int, int]:
        magic, version, flags, stream_id, seq, payload_len, crc = FRAME_HEADER.unpack(header)
        if magic != FRAME_MAGIC:
            raise ProtocolError(f"bad frame magic 0x{magic:04x}")
        if version != FRAME_VERSION:
            raise ProtocolError(f"unsupported frame version {version}")
        if payload_len > MAX_CHUNK_SIZE:
            raise ProtocolError(f"frame payload {payload_len} exceeds {MAX_CHUNK_SIZE}")
        return flags, stream_id, seq, payload_len, crc

    def release(self) -> None:
        """Signal that this frame left the transmission path (idempotent)."""
        cb, self._release_cb = self._release_cb, None
        if cb is not None:
            cb()


ByteSource = Union[bytes, bytearray, memoryview, "SupportsRead"]


def _read_chunks(source: ByteSource, chunk_size: int) -> Iterator[bytes]:
    if hasattr(source, "read"):
        while True:
            piece = source.read(chunk_size)
            if not piece:
                return
            yield bytes(piece)
    else:
        view = memoryview(source)
        for start in range(0, len(view), chunk_size):
            yield bytes(view[start : start + chunk_size])


def _check_chunk_size(chunk_size: int) -> None:
    if not MIN_CHUNK_SIZE <= chunk_size <= MAX_CHUNK_SIZE:
        raise ValueError(
            f"chunk_size {chunk_size} outside [{MIN_CHUNK_SIZE}, {MAX_CHUNK_SIZE}]"
        )


def chunk(
    source: ByteSource,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    stream_id: int = 0,
) -> Iterator[Frame]:
    """Split a byte source into frames: BEGIN on the first, END on the last.

    Always yields at least one frame; an empty source becomes a single
    zero-length BEGIN|END frame.
    """
    _check_chunk_size(chunk_size)
    for frame in _frames_from_parts(
        ((piece, False) for piece in _read_chunks(source, chunk_size)), stream_id
    ):
        yield frame


def _frames_from_parts(
    parts: Iterable[tuple[bytes, bool]], stream_id: int
) -> Iterator[Frame]:
    """BEGIN/END/seq bookkeeping over (payload, is_meta) parts; min one frame."""
    seq = 0
    pending: Optional[tuple[bytes, bool]] = None
    for part in parts:
        if pending is not None:
            payload, is_meta = pending
            flags = (FLAG_BEGIN if seq == 0 else 0) | (FLAG_META if is_meta else 0)
            yield Frame(flags, stream_id, seq, payload)
            seq += 1
        pending = part
    if pending is None:
        yield Frame(FLAG_BEGIN | FLAG_END, stream_id, 0, b"")
        return
    payload, is_meta = pending
    flags = (FLAG_BEGIN if seq == 0 else 0) | FLAG_END | (FLAG_META if is_meta else 0)
    yield Frame(flags, stream_id, seq, payload)


@dataclass(frozen=True)
class DriverCapabilities:
    max_frame_hint: int = MAX_CHUNK_SIZE
    ordered: bool = True
    reliable: bool = True


class Link:
    """One side of a duplex, ordered, reliable frame pipe."""

    capabilities = DriverCapabilities()

    def send(self, frame: Frame) -> None:
        raise NotImplementedError

    def recv(self) -> Optional[Frame]:
        """Next frame, or None once the peer closed."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    @property
    def in_process(self) -> bool:
        """True when frames cross as objects with sender accounting attached."""
        return False


class MemoryLink(Link):
    """In-memory channel driver: frames pass by reference between threads."""

    def __init__(self) -> None:
        self._inbox: "queue.Queue[Optional[Frame]]" = queue.Queue()
        self.peer: Optional["MemoryLink"] = None
        self._closed = threading.Event()

    @property
    def in_process(self) -> bool:
        return True

    def send(self, frame: Frame) -> None:
        peer = self.peer
        if peer is None or self._closed.is_set() or peer._closed.is_set():
            frame.release()
            raise TransportError("link closed", frame.stream_id, frame.seq - 1)
        peer._inbox.put(frame)

    def recv(self) -> Optional[Frame]:
        item = self._inbox.get()
        return item

    def close(self) -> None:
        if not self._closed.is_set():
            self._closed.set()
            self._inbox.put(None)
            if self.peer is not None and not self.peer._closed.is_set():
                self.peer._inbox.put(None)


def memory_pair() -> tuple[MemoryLink, MemoryLink]:
    a, b = MemoryLink(), MemoryLink()
    a.peer, b.peer = b, a
    return a, b


class TcpLink(Link):
    """TCP driver: frames cross as the encoded wire layout."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._send_lock = threading.Lock()
        self._closed = False

    def send(self, frame: Frame) -> None:
        data = frame.encode()
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as exc:
            frame.release()
            raise TransportError(f"tcp send failed: {exc}", frame.stream_id, frame.seq - 1)
        frame.release()  # kernel owns the bytes now; sender path is done

    def _read_exact(self, n: int) -> Optional[bytes]:
        buf = bytearray()
        while len(buf) < n:
            try:
                piece = self._sock.recv(n - len(buf))
            except OSError:
                return None
            if not piece:
                return None
            buf.extend(piece)
        return bytes(buf)

    def recv(self) -> Optional[Frame]:
        header = self._read_exact(FRAME_HEADER_SIZE)
        if header is None:
            return None
        flags, stream_id, seq, payload_len, crc = Frame.decode_header(header)
        payload = self._read_exact(payload_len) if payload_len else b""
        if payload is None:
            return None
        return Frame(flags, stream_id, seq, payload, crc)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


class _StreamState(enum.Enum):
    OPEN = "open"
    COMPLETE = "complete"
    FAILED = "failed"


class StreamAssembly:
    """Per-stream reassembly: contiguous seq coverage, CRC checks, one sink."""

    def __init__(
        self,
        stream_id: int,
        meter: MemoryMeter,
        sink: Optional[Callable[[bytes], None]] = None,
    ):
        self.stream_id = stream_id
        self.state = _StreamState.OPEN
        self.error: Optional[Exception] = None
        self.bytes_received = 0
        self.frames_received = 0
        self.expected_seq = 0
        self.last_activity = time.monotonic()
        self._meter = meter
        self._sink = sink
        self._buffer: list[tuple[bytes, bool]] = []
        self._buffered_bytes = 0
        self._meta_handler: Optional[Callable[[bytes], None]] = None
        self._cond = threading.Condition()

    def set_sink(self, sink: Callable[[bytes], None]) -> None:
        self.set_handlers(sink, None)

    def set_handlers(
        self,
        sink: Optional[Callable[[bytes], None]],
        meta_handler: Optional[Callable[[bytes], None]],
    ) -> None:
        """Attach consumers, replaying any frames that arrived before them."""
        with self._cond:
            self._meta_handler = meta_handler
            if self._buffer and (sink is not None or meta_handler is not None):
                buffered, self._buffer = self._buffer, []
                self._meter.release(self._buffered_bytes)
                self._buffered_bytes = 0
                for piece, is_meta in buffered:
                    if is_meta and meta_handler is not None:
                        meta_handler(piece)
                    elif sink is not None:
                        sink(piece)
                    else:
                        self._buffer.append((piece, is_meta))
                        self._buffered_bytes += len(piece)
                        self._meter.alloc(len(piece))
            self._sink = sink

    def accept(self, frame: Frame) -> None:
        try:
            with self._cond:
                if self.state is not _StreamState.OPEN:
                    return
                self.last_activity = time.monotonic()
                if not frame.crc_ok():
                    self._fail(FrameCorrupt(frame.seq))
                    return
                if frame.seq != self.expected_seq:
                    kind = "regression" if frame.seq < self.expected_seq else "gap"
                    self._fail(
                        ProtocolError(
                            f"stream {self.stream_id}: seq {kind} at {self.expected_seq} "
                            f"(got {frame.seq})"
                        )
                    )
                    return
                if frame.begin != (frame.seq == 0):
                    msg = (
                        "END before BEGIN"
                        if frame.seq == 0
                        else f"BEGIN repeated at seq {frame.seq}"
                    )
                    self._fail(ProtocolError(f"stream {self.stream_id}: {msg}"))
                    return
                self.expected_seq += 1
                self.frames_received += 1
                if frame.meta and self._meta_handler is not None:
                    self._meta_handler(frame.payload)
                elif not frame.meta and self._sink is not None:
                    self._sink(frame.payload)
                    self.bytes_received += len(frame.payload)
                else:
                    self._buffer.append((frame.payload, frame.meta))
                    self._buffered_bytes += len(frame.payload)
                    self._meter.alloc(len(frame.payload))
                    if not frame.meta:
                        self.bytes_received += len(frame.payload)
                if frame.end:
                    self.state = _StreamState.COMPLETE
                    self._cond.notify_all()
        except Exception as exc:  # sink/meta handler raised: fail the stream
            with self._cond:
                self._fail(exc)
        finally:
            frame.release()

    def _fail(self, error: Exception) -> None:
        # caller holds the lock
        self.state = _StreamState.FAILED
        self.error = error
        if self._buffered_bytes:
            self._meter.release(self._buffered_bytes)
            self._buffer, self._buffered_bytes = [], 0
        self._cond.notify_all()

    def fail(self, error: Exception) -> None:
        with self._cond:
            if self.state is _StreamState.OPEN:
                self._fail(error)

    def result(self, idle_timeout: float) -> bytes:
        """Block until END; returns accumulated bytes (empty in sink mode)."""
        with self._cond:
            while self.state is _StreamState.OPEN:
                remaining = idle_timeout - (time.monotonic() - self.last_activity)
                if remaining <= 0:
                    self._fail(
                        StreamTimeout(
                            f"stream {self.stream_id} idle for {idle_timeout:.1f}s "
                            f"at seq {self.expected_seq}"
                        )
                    )
                    break
                self._cond.wait(timeout=remaining)
            if self.state is _StreamState.FAILED:
                raise self.error
            data = b"".join(piece for piece, is_meta in self._buffer if not is_meta)
            if self._buffered_bytes:
                self._meter.release(self._buffered_bytes)
                self._buffer, self._buffered_bytes = [], 0
            return data


@dataclass(frozen=True)
class SendReceipt:
    stream_id: int
    frames: int
    bytes: int
    elapsed_s: float


RequestHandler = Callable[["Connection", int, int], None]


class Connection:
    """Frame multiplexing over one driver link.

    A background reader dispatches inbound frames to per-stream assemblies.
    Outbound streams get ids from ``allocate_stream_id`` (initiator parity
    avoids collisions between the two directions).
    """

    def __init__(
        self,
        link: Link,
        meter: Optional[MemoryMeter] = None,
        stream_timeout: float = DEFAULT_STREAM_TIMEOUT,
        side: int = 0,
    ):
        self.link = link
        self.meter = meter if meter is not None else MemoryMeter()
        self.stream_timeout = stream_timeout
        self._side = side & 1
        self._next_stream = 0
        self._sent_streams: set[int] = set()
        self._assemblies: dict[int, StreamAssembly] = {}
        self._accept_queue: "queue.Queue[StreamAssembly]" = queue.Queue()
        self._request_handler: Optional[RequestHandler] = None
        self.send_hooks: list[Callable[[Frame], None]] = []
        self._lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._reader_loop, daemon=True)
        self._reader.start()

    # -- sending ----------------------------------------------------------

    def allocate_stream_id(self) -> int:
        with self._lock:
            sid = (self._next_stream << 1) | self._side
            self._next_stream += 1
            return sid

    def send_stream(
        self,
        stream_id: int,
        parts: Iterable[tuple[bytes, bool]],
        window: int = DEFAULT_WINDOW,
    ) -> SendReceipt:
        """Send (payload, is_meta) parts as one stream, honoring the window.

        A frame's window slot and meter allocation are held from creation
        until the receiving side consumed it (in-memory) or the driver took
        ownership (TCP).
        """
        with self._lock:
            if stream_id in self._sent_streams:
                raise TransportError(f"duplicate stream id {stream_id}", stream_id)
            self._sent_streams.add(stream_id)
        if window < 1:
            raise ValueError("window must be >= 1")
        sem = threading.Semaphore(window)
        meter = self.meter
        started = time.monotonic()
        frames = 0
        payload_bytes = 0
        frame_iter = _frames_from_parts(parts, stream_id)
        last_seq = -1
        while True:
            sem.acquire()
            try:
                frame = next(frame_iter, None)
            except Exception:
                sem.release()
                raise
            if frame is None:
                sem.release()
                break
            size = len(frame.payload)
            meter.alloc(size)
            frame._release_cb = _once(lambda s=size: (meter.release(s), sem.release()))
            for hook in self.send_hooks:
                hook(frame)
            try:
                self.link.send(frame)
            except TransportError as exc:
                raise TransportError(str(exc), stream_id, last_seq) from None
            last_seq = frame.seq
            frames += 1
            payload_bytes += size
        # wait for the window to drain so the receipt covers delivered frames
        for _ in range(window):
            sem.acquire()
        return SendReceipt(stream_id, frames, payload_bytes, time.monotonic() - started)

    def send_object(
        self,
        stream_id: int,
        source: ByteSource,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        window: int = DEFAULT_WINDOW,
    ) -> SendReceipt:
        _check_chunk_size(chunk_size)
        parts = ((piece, False) for piece in _read_chunks(source, chunk_size))
        return self.send_stream(stream_id, parts, window=window)

    def send_request(self, payload: bytes) -> None:
        """Single-frame control stream (META), outside the object-stream space."""
        sid = self.allocate_stream_id()
        frame = Frame(FLAG_BEGIN | FLAG_END | FLAG_META, sid, 0, payload)
        self.link.send(frame)

    # -- receiving --------------------------------------------------------

    def expect_stream(
        self, stream_id: int, sink: Optional[Callable[[bytes], None]] = None
    ) -> StreamAssembly:
        """Pre-register (or adopt) the assembly for a known inbound stream."""
        with self._lock:
            asm = self._assemblies.get(stream_id)
            if asm is None:
                asm = StreamAssembly(stream_id, self.meter, sink)
                self._assemblies[stream_id] = asm
                return asm
        if sink is not None:
            asm.set_sink(sink)
        return asm

    def accept_stream(self, timeout: Optional[float] = None) -> StreamAssembly:
        """Next unsolicited inbound stream."""
        try:
            return self._accept_queue.get(timeout=timeout or self.stream_timeout)
        except queue.Empty:
            raise StreamTimeout("no inbound stream arrived") from None

    def set_request_handler(self, handler: RequestHandler) -> None:
        self._request_handler = handler

    def receive_object(
        self,
        stream_id: Optional[int] = None,
        sink: Optional[Callable[[bytes], None]] = None,
        timeout: Optional[float] = None,
    ) -> bytes:
        """Assemble one full stream; returns its bytes (b"" in sink mode)."""
        if stream_id is None:
            asm = self.accept_stream(timeout)
            if sink is not None:
                asm.set_sink(sink)
        else:
            asm = self.expect_stream(stream_id, sink)
        return asm.result(timeout or self.stream_timeout)

    # -- dispatch ---------------------------------------------------------

    def _reader_loop(self) -> None:
        while True:
            try:
                frame = self.link.recv()
            except Exception as exc:
                log.debug("reader stopped: %s", exc)
                frame = None
            if frame is None:
                break
            if frame._release_cb is None and not self.link.in_process:
                size = len(frame.payload)
                self.meter.alloc(size)
                frame._release_cb = _once(lambda s=size: self.meter.release(s))
            self._dispatch(frame)
        self._fail_open_streams(TransportError("connection closed"))

    def _dispatch(self, frame: Frame) -> None:
        with self._lock:
            asm = self._assemblies.get(frame.stream_id)
            if asm is None:
                if (
                    frame.begin
                    and frame.meta
                    and frame.payload[:4] == PULL_MAGIC
                    and self._request_handler is not None
                ):
                    payload = frame.payload
                    frame.release()
                    threading.Thread(
                        target=self._run_request, args=(payload,), daemon=True
                    ).start()
                    return
                asm = StreamAssembly(frame.stream_id, self.meter)
                self._assemblies[frame.stream_id] = asm
                self._accept_queue.put(asm)
        asm.accept(frame)

    def _run_request(self, payload: bytes) -> None:
        try:
            ref_id, reply_stream = struct.unpack("<QQ", payload[4:20])
            self._request_handler(self, ref_id, reply_stream)
        except Exception:
            log.exception("request handler failed")

    def _fail_open_streams(self, error: Exception) -> None:
        with self._lock:
            assemblies = list(self._assemblies.values())
        for asm in assemblies:
            asm.fail(error)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        self.link.close()
        self._fail_open_streams(TransportError("connection closed"))


def _once(fn: Callable[[], None]) -> Callable[[], None]:
    lock = threading.Lock()
    done = [False]

    def wrapper() -> None:
        with lock:
            if done[0]:
                return
            done[0] = True
        fn()

    return wrapper


# ---------------------------------------------------------------------------
# Connection constructors
# ---------------------------------------------------------------------------

def memory_connection_pair(
    meter: Optional[MemoryMeter] = None,
    meter_b: Optional[MemoryMeter] = None,
    stream_timeout: float = DEFAULT_STREAM_TIMEOUT,
) -> tuple[Connection, Connection]:
    """Two connected endpoints over the in-memory driver.

    With one meter given, both endpoints share it (single-process accounting
    of the whole path); passing ``meter_b`` splits the sides.
    """
    link_a, link_b = memory_pair()
    shared = meter if meter is not None else MemoryMeter()
    conn_a = Connection(link_a, shared, stream_timeout, side=0)
    conn_b = Connection(link_b, meter_b if meter_b is not None else shared, stream_timeout, side=1)
    return conn_a, conn_b


def tcp_connect(
    host: str,
    port: int,
    meter: Optional[MemoryMeter] = None,
    stream_timeout: float = DEFAULT_STREAM_TIMEOUT,
) -> Connection:
    sock = socket.create_connection((host, port))
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return Connection(TcpLink(sock), meter, stream_timeout, side=1)


class TcpListener:
    def __init__(self, host: str, port: int):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen()
        self.address = self._sock.getsockname()

    def accept(
        self,
        meter: Optional[MemoryMeter] = None,
        stream_timeout: float = DEFAULT_STREAM_TIMEOUT,
    ) -> Connection:
        sock, _ = self._sock.accept()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return Connection(TcpLink(sock), meter, stream_timeout, side=0)

    def close(self) -> None:
        self._sock.close()
