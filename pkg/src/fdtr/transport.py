"""One-shot exchange of summary statistics between sites.

Wire format of one frame (all little-endian)::

    magic   4s   b"FDTR"
    version u16
    kind    u8   1 = raw bundle (G00, G01, G11, v0, v1), 2 = projected (A, b)
    pad     u8
    site_id u32
    h       u16
    d0, d1  u16, u16
    n       u64
    nbytes  u32  body length
    body         float64 values, matrices row-major, in the order above
    crc     u32  CRC-32 of every preceding byte

Frames carry only aggregates, so no message can hold per-trajectory rows.
Sites talk to a hub (in memory or over TCP); the hub releases foreign
statistics only once every ``(site, h)`` message has arrived and then
refuses further traffic for that run.
"""
from __future__ import annotations

import os
import socket
import socketserver
import struct
import threading
import zlib
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .stats import ProjectedHomogeneousStats, SummaryBundle, project_homogeneous

MAGIC = b"FDTR"
PROTOCOL_VERSION = 1
KIND_RAW = 1
KIND_PROJECTED = 2
_HEADER = struct.Struct("<4sHBBIHHHQI")
HEADER_SIZE = _HEADER.size
CRC_SIZE = 4
DEFAULT_TIMEOUT = 30.0
HUB_ADDR_ENV = "FDTR_HUB_ADDR"


class TransportError(Exception):
    pass


class BadMagic(TransportError):
    pass


class BadChecksum(TransportError):
    pass


class BadVersion(TransportError):
    pass


class TruncatedFrame(TransportError):
    pass


class MalformedFrame(TransportError):
    pass


class DuplicateMessage(TransportError):
    pass


class DimMismatch(TransportError):
    pass


class RoundClosed(TransportError):
    """The round was already finalized; statistics cannot be sent or requested again."""


class RoundTimeout(TransportError):
    def __init__(self, site_id: int, h: int, msg: str = ""):
        super().__init__(msg or f"no statistics from site {site_id} at step {h}")
        self.site_id = site_id
        self.h = h


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class StatsMessage:
    site_id: int
    h: int
    d0: int
    d1: int
    n: int
    kind: int
    arrays: tuple
    protocol_version: int = PROTOCOL_VERSION

    def __post_init__(self):
        shapes = payload_shapes(self.kind, self.d0, self.d1)
        if len(self.arrays) != len(shapes):
            raise DimMismatch(f"kind {self.kind} carries {len(shapes)} arrays, got {len(self.arrays)}")
        arrays = []
        for a, s in zip(self.arrays, shapes):
            a = np.asarray(a, dtype="<f8")
            if a.shape != s:
                raise DimMismatch(f"array of shape {a.shape} where {s} was declared")
            arrays.append(a)
        object.__setattr__(self, "arrays", tuple(arrays))

    @classmethod
    def from_stats(cls, stats) -> "StatsMessage":
        if isinstance(stats, SummaryBundle):
            arrays = (stats.G00, stats.G01, stats.G11, stats.v0, stats.v1)
            return cls(stats.site_id, stats.h, stats.d0, stats.d1, stats.n, KIND_RAW, arrays)
        if isinstance(stats, ProjectedHomogeneousStats):
            raise TypeError("use from_projected, which needs d1")
        raise TypeError(f"cannot send {type(stats).__name__}")

    @classmethod
    def from_projected(cls, stats: ProjectedHomogeneousStats, d1: int) -> "StatsMessage":
        d0 = stats.A.shape[0]
        return cls(stats.site_id, stats.h, d0, d1, stats.n, KIND_PROJECTED, (stats.A, stats.b))

    def to_stats(self):
        if self.kind == KIND_RAW:
            return SummaryBundle(self.site_id, self.h, self.n, *self.arrays)
        return ProjectedHomogeneousStats(self.site_id, self.h, self.n, *self.arrays)

    def __eq__(self, other):
        if not isinstance(other, StatsMessage):
            return NotImplemented
        head = (self.site_id, self.h, self.d0, self.d1, self.n, self.kind, self.protocol_version)
        ohead = (other.site_id, other.h, other.d0, other.d1, other.n, other.kind, other.protocol_version)
        return head == ohead and all(np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))

    __hash__ = None


def payload_shapes(kind: int, d0: int, d1: int) -> list[tuple]:
    if kind == KIND_RAW:
        return [(d0, d0), (d0, d1), (d1, d1), (d0,), (d1,)]
    if kind == KIND_PROJECTED:
        return [(d0, d0), (d0,)]
    raise MalformedFrame(f"unknown payload kind {kind}")


def body_size(kind: int, d0: int, d1: int) -> int:
    return 8 * sum(int(np.prod(s)) for s in payload_shapes(kind, d0, d1))


def frame_size(kind: int, d0: int, d1: int) -> int:
    return HEADER_SIZE + body_size(kind, d0, d1) + CRC_SIZE


def encode(msg: StatsMessage) -> bytes:
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in msg.arrays)
    head = _HEADER.pack(
        MAGIC, msg.protocol_version, msg.kind, 0, msg.site_id, msg.h, msg.d0, msg.d1, msg.n, len(body)
    )
    crc = zlib.crc32(head + body) & 0xFFFFFFFF
    return head + body + struct.pack("<I", crc)


def decode(data: bytes) -> StatsMessage:
    """Parse one frame; raises a specific :class:`TransportError` on any defect."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise TruncatedFrame(f"frame has {len(data)} bytes, header needs {HEADER_SIZE}")
    magic, version, kind, _, site_id, h, d0, d1, n, nbytes = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise BadVersion(f"protocol version {version}, expected {PROTOCOL_VERSION}")
    total = HEADER_SIZE + nbytes + CRC_SIZE
    if len(data) < total:
        raise TruncatedFrame(f"frame has {len(data)} bytes, header declares {total}")
    if len(data) > total:
        raise MalformedFrame(f"{len(data) - total} trailing bytes after frame")
    (crc,) = struct.unpack_from("<I", data, total - CRC_SIZE)
    if zlib.crc32(data[: total - CRC_SIZE]) & 0xFFFFFFFF != crc:
        raise BadChecksum("CRC mismatch")
    if nbytes != body_size(kind, d0, d1):
        raise DimMismatch(f"body of {nbytes} bytes does not match d0={d0}, d1={d1}")
    flat = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=HEADER_SIZE)
    arrays, pos = [], 0
    for shape in payload_shapes(kind, d0, d1):
        size = int(np.prod(shape))
        arrays.append(flat[pos : pos + size].reshape(shape).copy())
        pos += size
    return StatsMessage(site_id, h, d0, d1, n, kind, tuple(arrays), version)


# ---------------------------------------------------------------------------
# hub and manifest


@dataclass(frozen=True)
class Receipt:
    site_id: int
    h: int
    kind: int
    n_bytes: int


@dataclass
class RoundManifest:
    run_id: str
    K: int
    H: int
    d0: int
    d1: int
    receipts: list = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(r.n_bytes for r in self.receipts)

    def bound(self) -> int:
        """``K H (8 (d^2 + 2 d) + header + crc)``: the largest possible round size."""
        d = self.d0 + self.d1
        return self.K * self.H * (8 * (d * d + 2 * d) + HEADER_SIZE + CRC_SIZE)

    def expected_bytes(self, kind: int = KIND_PROJECTED) -> int:
        return self.K * self.H * frame_size(kind, self.d0, self.d1) if self.K > 1 else 0

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "K": self.K,
            "H": self.H,
            "d0": self.d0,
            "d1": self.d1,
            "total_bytes": self.total_bytes,
            "bound": self.bound(),
            "receipts": [[r.site_id, r.h, r.kind, r.n_bytes] for r in self.receipts],
        }


class FederationHub:
    """Collects exactly one projected message per ``(site, h)`` and hands out immutable snapshots.

    Thread safe. Once every message has arrived the round is complete; after
    :meth:`close` any further submission or snapshot request raises
    :class:`RoundClosed`.
    """

    def __init__(self, run_id: str, K: int, H: int, d0: int, d1: int):
        self.manifest = RoundManifest(run_id, K, H, d0, d1)
        self._frames: dict[tuple, bytes] = {}
        self._cond = threading.Condition()
        self._closed = False

    @property
    def expected_keys(self) -> list[tuple]:
        m = self.manifest
        return [(k, h, KIND_PROJECTED) for k in range(m.K) for h in range(1, m.H + 1)] if m.K > 1 else []

    def submit(self, frame: bytes) -> Receipt:
        msg = decode(frame)
        m = self.manifest
        if (msg.d0, msg.d1) != (m.d0, m.d1):
            raise DimMismatch(f"site {msg.site_id} sent d0={msg.d0}, d1={msg.d1}; round uses {m.d0}, {m.d1}")
        if msg.kind != KIND_PROJECTED:
            raise MalformedFrame("rounds only carry projected statistics")
        if not (0 <= msg.site_id < m.K and 1 <= msg.h <= m.H):
            raise MalformedFrame(f"site {msg.site_id}, step {msg.h} outside the round")
        key = (msg.site_id, msg.h, msg.kind)
        with self._cond:
            if self._closed:
                raise RoundClosed(f"run {m.run_id} is closed")
            if key in self._frames:
                raise DuplicateMessage(f"second message for site {msg.site_id}, step {msg.h}")
            self._frames[key] = bytes(frame)
            receipt = Receipt(msg.site_id, msg.h, msg.kind, len(frame))
            m.receipts.append(receipt)
            self._cond.notify_all()
        return receipt

    def complete(self) -> bool:
        return all(key in self._frames for key in self.expected_keys)

    def missing(self) -> list[tuple]:
        return [key for key in self.expected_keys if key not in self._frames]

    def wait_complete(self, timeout: float | None = DEFAULT_TIMEOUT) -> None:
        with self._cond:
            if not self._cond.wait_for(lambda: self._closed or self.complete(), timeout):
                k, h, _ = self.missing()[0]
                raise RoundTimeout(k, h)

    def foreign_frames(self, site_id: int) -> tuple:
        """Frames of every other site ordered by ``(h, site_id)``."""
        with self._cond:
            if self._closed:
                raise RoundClosed(f"run {self.manifest.run_id} is closed")
            if not self.complete():
                k, h, _ = self.missing()[0]
                raise RoundTimeout(k, h)
            keys = sorted((key for key in self._frames if key[0] != site_id), key=lambda t: (t[1], t[0]))
            return tuple(self._frames[key] for key in keys)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed


def frames_to_snapshot(frames: Sequence[bytes], H: int) -> Mapping[int, tuple]:
    """Decode foreign frames into an immutable ``{h: (stats, ...)}`` mapping."""
    by_h: dict[int, list] = {h: [] for h in range(1, H + 1)}
    for fr in frames:
        msg = decode(fr)
        by_h[msg.h].append(msg.to_stats())
    return MappingProxyType({h: tuple(v) for h, v in by_h.items()})


# ---------------------------------------------------------------------------
# socket transport: length-prefixed request/response over TCP

_OP_SUBMIT = 1
_OP_FETCH = 2
_OK = 0
_ERR = 1
_PREFIX = struct.Struct("<BI")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TruncatedFrame("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def _send(sock: socket.socket, code: int, payload: bytes) -> None:
    sock.sendall(_PREFIX.pack(code, len(payload)) + payload)


def _recv(sock: socket.socket) -> tuple[int, bytes]:
    code, length = _PREFIX.unpack(_recv_exact(sock, _PREFIX.size))
    return code, _recv_exact(sock, length)


_ERRORS = {cls.__name__: cls for cls in (
    BadMagic, BadChecksum, BadVersion, TruncatedFrame, MalformedFrame, DuplicateMessage, DimMismatch, RoundClosed,
)}


def _raise_remote(payload: bytes):
    name, _, text = payload.decode("utf-8").partition(":")
    if name == "RoundTimeout":
        k, h, _ = text.split(",", 2)
        raise RoundTimeout(int(k), int(h))
    raise _ERRORS.get(name, TransportError)(text)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        hub: FederationHub = self.server.hub
        sock = self.request
        while True:
            try:
                op, payload = _recv(sock)
            except TruncatedFrame:
                return
            try:
                if op == _OP_SUBMIT:
                    hub.submit(payload)
                    _send(sock, _OK, b"")
                elif op == _OP_FETCH:
                    (site_id,) = struct.unpack("<I", payload)
                    hub.wait_complete(self.server.timeout_s)
                    frames = hub.foreign_frames(site_id)
                    body = struct.pack("<I", len(frames)) + b"".join(struct.pack("<I", len(f)) + f for f in frames)
                    _send(sock, _OK, body)
                else:
                    _send(sock, _ERR, f"MalformedFrame:unknown op {op}".encode())
            except RoundTimeout as exc:
                _send(sock, _ERR, f"RoundTimeout:{exc.site_id},{exc.h},".encode())
            except TransportError as exc:
                _send(sock, _ERR, f"{type(exc).__name__}:{exc}".encode())


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class SocketHubServer:
    """TCP front end of a :class:`FederationHub`, served from a background thread."""

    def __init__(self, hub: FederationHub, host: str = "127.0.0.1", port: int = 0, timeout: float = DEFAULT_TIMEOUT):
        self.hub = hub
        self._server = _Server((host, port), _Handler)
        self._server.hub = hub
        self._server.timeout_s = timeout
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()


class SocketClient:
    def __init__(self, address: tuple[str, int], timeout: float = DEFAULT_TIMEOUT):
        self._sock = socket.create_connection(address, timeout=timeout + 5)

    def submit(self, frame: bytes) -> None:
        _send(self._sock, _OP_SUBMIT, frame)
        code, payload = _recv(self._sock)
        if code != _OK:
            _raise_remote(payload)

    def fetch(self, site_id: int) -> tuple:
        _send(self._sock, _OP_FETCH, struct.pack("<I", site_id))
        code, payload = _recv(self._sock)
        if code != _OK:
            _raise_remote(payload)
        (count,) = struct.unpack_from("<I", payload)
        frames, pos = [], 4
        for _ in range(count):
            (length,) = struct.unpack_from("<I", payload, pos)
            frames.append(payload[pos + 4 : pos + 4 + length])
            pos += 4 + length
        return tuple(frames)

    def close(self):
        self._sock.close()


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"hub address must look like host:port, got {text!r}")
    return host, int(port)


def hub_address(default: str = "127.0.0.1:0") -> tuple[str, int]:
    """Hub address from ``FDTR_HUB_ADDR`` when set, else ``default``."""
    return parse_address(os.environ.get(HUB_ADDR_ENV, default))


# ---------------------------------------------------------------------------
# the round


@dataclass(frozen=True)
class SocketTransport:
    address: tuple[str, int] | None = None
    timeout: float = DEFAULT_TIMEOUT


def _site_frames(site_stats: Sequence, d1: int) -> list[bytes]:
    frames = []
    for s in site_stats:
        proj = project_homogeneous(s) if isinstance(s, SummaryBundle) else s
        frames.append(encode(StatsMessage.from_projected(proj, d1)))
    return frames


def exchange_round(
    sites: Sequence[Sequence],
    d1: int,
    transport="inprocess",
    run_id: str = "run",
    hub: FederationHub | None = None,
    timeout: float = DEFAULT_TIMEOUT,
):
    """Run the single exchange round.

    ``sites[k]`` lists site ``k``'s statistics for ``h = 1..H`` (raw bundles
    are projected before they leave the site). ``transport`` is
    ``"inprocess"`` or a :class:`SocketTransport`. Returns
    ``(snapshots, manifest)`` where ``snapshots[k][h]`` is the tuple of
    foreign projected statistics that site ``k`` sees at step ``h``.
    """
    K = len(sites)
    H = len(sites[0]) if K else 0
    if any(len(s) != H for s in sites):
        raise DimMismatch("every site must provide statistics for all H steps")
    d0 = _first_d0(sites)
    if hub is None:
        hub = FederationHub(run_id, K, H, d0, d1)
    if hub.closed:
        raise RoundClosed(f"run {hub.manifest.run_id} is closed")
    if K <= 1:
        hub.close()
        return {k: MappingProxyType({h: () for h in range(1, H + 1)}) for k in range(K)}, hub.manifest
    frames = [_site_frames(s, d1) for s in sites]
    if transport == "inprocess":
        for site_frames in frames:
            for fr in site_frames:
                hub.submit(fr)
        received = {k: hub.foreign_frames(k) for k in range(K)}
    elif isinstance(transport, SocketTransport):
        received = _socket_round(hub, frames, transport)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    hub.close()
    snapshots = {k: frames_to_snapshot(received[k], H) for k in range(K)}
    return snapshots, hub.manifest


def _first_d0(sites) -> int:
    for s in sites:
        for stat in s:
            return stat.d0 if isinstance(stat, SummaryBundle) else stat.A.shape[0]
    return 0


def _socket_round(hub: FederationHub, frames: list, transport: SocketTransport) -> dict:
    address = transport.address or hub_address()
    received: dict[int, tuple] = {}
    errors: list[BaseException] = []

    def run_site(k):
        try:
            client = SocketClient(server.address, transport.timeout)
            try:
                for fr in frames[k]:
                    client.submit(fr)
                received[k] = client.fetch(k)
            finally:
                client.close()
        except BaseException as exc:
            errors.append(exc)

    with SocketHubServer(hub, address[0], address[1], transport.timeout) as server:
        threads = [threading.Thread(target=run_site, args=(k,)) for k in range(len(frames))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        raise errors[0]
    return received
