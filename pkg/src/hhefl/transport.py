"""Framed, in-order message channels with byte counters.

Two implementations share one interface: an in-process pipe (a pair of
queues carrying the encoded frames) and TCP.  Both move the exact bytes of
:meth:`Message.to_bytes`, so byte counters agree across transports.
"""

from __future__ import annotations

import queue
import socket
import threading
import time

from hhefl.errors import FormatError, PeerTimeout, PeerUnavailable
from hhefl.wire import HEADER, Message, parse_header

_CLOSED = object()


class Channel:
    """One end of a bidirectional message link."""

    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0
        self._lock = threading.Lock()

    def send(self, msg: Message) -> int:
        frame = msg.to_bytes()
        with self._lock:
            self._send_frame(frame)
            self.bytes_sent += len(frame)
        return len(frame)

    def recv(self, timeout: float | None = None) -> Message:
        frame = self._recv_frame(timeout)
        self.bytes_received += len(frame)
        return Message.from_bytes(frame)

    def reset_counters(self) -> tuple[int, int]:
        out = (self.bytes_sent, self.bytes_received)
        self.bytes_sent = self.bytes_received = 0
        return out

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout: float | None) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PipeChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__()
        self._in, self._out = inbox, outbox
        self._closed = False

    def _send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise PeerUnavailable("channel is closed")
        self._out.put(frame)

    def _recv_frame(self, timeout):
        try:
            frame = self._in.get(timeout=timeout)
        except queue.Empty:
            raise PeerTimeout(f"no message within {timeout} s") from None
        if frame is _CLOSED:
            self._in.put(_CLOSED)  # later reads see the closure too
            raise PeerUnavailable("peer closed the channel")
        parse_header(frame[: HEADER.size])
        return frame

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._out.put(_CLOSED)


def pipe() -> tuple[PipeChannel, PipeChannel]:
    a, b = queue.Queue(), queue.Queue()
    return PipeChannel(a, b), PipeChannel(b, a)


class TcpChannel(Channel):
    """Frames over a stream socket.  Bytes of a frame that is still arriving
    when a receive times out are kept, so a later receive resumes in step."""

    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock
        self._buf = bytearray()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send_frame(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise PeerUnavailable(f"send failed: {exc}") from exc

    def _fill(self, n: int, deadline: float | None) -> None:
        while len(self._buf) < n:
            if deadline is not None:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise PeerTimeout("receive timed out")
                self.sock.settimeout(left)
            else:
                self.sock.settimeout(None)
            try:
                part = self.sock.recv(min(n - len(self._buf), 1 << 20))
            except socket.timeout:
                raise PeerTimeout("receive timed out") from None
            except OSError as exc:
                raise PeerUnavailable(f"receive failed: {exc}") from exc
            if not part:
                raise PeerUnavailable("peer closed the connection")
            self._buf += part

    def _recv_frame(self, timeout):
        deadline = None if timeout is None else time.monotonic() + timeout
        self._fill(HEADER.size, deadline)
        try:
            _, _, length = parse_header(bytes(self._buf[: HEADER.size]))
        except FormatError:
            self.close()
            raise
        total = HEADER.size + length
        self._fill(total, deadline)
        frame = bytes(self._buf[:total])
        del self._buf[:total]
        return frame

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def connect(host: str, port: int, timeout: float = 30.0) -> TcpChannel:
    """Connect, retrying refused attempts until ``timeout`` so clients may start before the server."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            sock.settimeout(None)
            return TcpChannel(sock)
        except ConnectionRefusedError:
            if time.monotonic() >= deadline:
                raise PeerUnavailable(f"nothing listening on {host}:{port}") from None
            time.sleep(0.05)


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.create_server((host, port))

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> TcpChannel:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise PeerTimeout("no client connected in time") from None
        conn.settimeout(None)
        return TcpChannel(conn)

    def close(self) -> None:
        self.sock.close()


def parse_endpoint(spec: str) -> tuple[str, int]:
    """'host:port' -> (host, port)."""
    host, sep, port = spec.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {spec!r}")
    return host or "127.0.0.1", int(port)
