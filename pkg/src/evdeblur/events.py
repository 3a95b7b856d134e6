"""Event stream data types, windowed integration, voxel grids, and chunking.

An event is a signed log-intensity change at one pixel.  Streams are kept as
parallel numpy arrays sorted by timestamp; all operations here are pure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, DegenerateWindowError, FormatError, ShapeError

DEFAULT_BINS = 5

_BINARY_MAGIC = b"EVT1"
_BINARY_HEADER = struct.Struct("<4sIIddQ")
_RECORD_DTYPE = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])


@dataclass(frozen=True)
class Event:
    """One brightness-change record: time, pixel, and polarity (+1 or -1)."""

    t: float
    x: int
    y: int
    polarity: int


@dataclass(frozen=True)
class EventStream:
    """Time-sorted events inside an exposure window [t0, t1].

    Arrays ``t`` (float64), ``x``/``y`` (int32) and ``p`` (int8) run parallel.
    Construction validates ordering, bounds, and polarity values.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    t0: float
    t1: float
    width: int
    height: int

    def __post_init__(self):
        if self.t1 <= self.t0:
            raise DegenerateWindowError(f"exposure window [{self.t0}, {self.t1}] is empty")
        t = np.asarray(self.t, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.int32)
        y = np.asarray(self.y, dtype=np.int32)
        p = np.asarray(self.p, dtype=np.int8)
        if not (t.shape == x.shape == y.shape == p.shape) or t.ndim != 1:
            raise ShapeError("event arrays must be 1-d and equally long")
        if t.size:
            if np.any(np.diff(t) < 0):
                raise FormatError("events are not sorted by timestamp")
            if t[0] < self.t0 or t[-1] > self.t1:
                raise BoundsError("event timestamps fall outside the exposure window")
            if np.any((x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)):
                raise BoundsError("event coordinates fall outside the sensor")
            if np.any((p != 1) & (p != -1)):
                raise FormatError("polarities must be +1 or -1")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)

    def __len__(self) -> int:
        return int(self.t.size)

    def events(self) -> list[Event]:
        return [
            Event(float(t), int(x), int(y), int(p))
            for t, x, y, p in zip(self.t, self.x, self.y, self.p)
        ]

    @classmethod
    def empty(cls, width: int, height: int, t0: float = 0.0, t1: float = 1.0) -> "EventStream":
        z = np.zeros(0)
        return cls(z, z, z, z, t0, t1, width, height)

    @classmethod
    def from_events(
        cls,
        events: list[Event],
        t0: float,
        t1: float,
        width: int,
        height: int,
        sort: bool = False,
    ) -> "EventStream":
        t = np.array([e.t for e in events], dtype=np.float64)
        x = np.array([e.x for e in events], dtype=np.int32)
        y = np.array([e.y for e in events], dtype=np.int32)
        p = np.array([e.polarity for e in events], dtype=np.int8)
        if sort and t.size:
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
        return cls(t, x, y, p, t0, t1, width, height)


@dataclass(frozen=True)
class PolarityImage:
    """Per-pixel net polarity counts over some window (H x W, integer-valued)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError("polarity image must be 2-d")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class VoxelGrid:
    """Dense B x H x W encoding of events by temporal splatting."""

    bins: np.ndarray
    t_start: float
    t_end: float

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.float64)
        if b.ndim != 3:
            raise ShapeError("voxel grid must be 3-d (bins, height, width)")
        object.__setattr__(self, "bins", b)

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    def mass(self) -> float:
        return float(self.bins.sum())


@dataclass(frozen=True)
class ChunkSet:
    """Ordered fixed-duration sub-window voxelizations covering [t0, t1]."""

    chunks: list[VoxelGrid] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.chunks)

    def mass(self) -> float:
        return float(sum(c.bins.sum() for c in self.chunks))


def accumulate(stream: EventStream, t_from: float, t_to: float) -> PolarityImage:
    """Sum event polarities per pixel over the half-open window [t_from, t_to).

    The window must lie inside the stream's exposure bounds.
    """
    if not (stream.t0 <= t_from <= t_to <= stream.t1):
        raise BoundsError(
            f"window [{t_from}, {t_to}] outside stream bounds [{stream.t0}, {stream.t1}]"
        )
    grid = np.zeros((stream.height, stream.width), dtype=np.float64)
    lo = np.searchsorted(stream.t, t_from, side="left")
    hi = np.searchsorted(stream.t, t_to, side="left")
    if hi > lo:
        np.add.at(grid, (stream.y[lo:hi], stream.x[lo:hi]), stream.p[lo:hi].astype(np.float64))
    return PolarityImage(grid)


def _splat(
    grid: np.ndarray,
    t: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    p: np.ndarray,
    t_start: float,
    t_end: float,
) -> None:
    """Splat unit polarity mass between the two nearest bin centers, in place.

    Bin centers sit at t_start + (k + 0.5) * dt.  Mass that would fall past
    either edge center is folded onto the edge bin so total mass is conserved.
    """
    n_bins, height, width = grid.shape
    span = t_end - t_start
    u = (t - t_start) / span * n_bins - 0.5
    u = np.clip(u, 0.0, n_bins - 1.0)
    k0 = np.floor(u).astype(np.int64)
    k0 = np.minimum(k0, n_bins - 1)
    w1 = u - k0
    flat = grid.reshape(-1)
    base = y.astype(np.int64) * width + x.astype(np.int64)
    pf = p.astype(np.float64)
    np.add.at(flat, k0 * (height * width) + base, pf * (1.0 - w1))
    k1 = k0 + 1
    upper = k1 < n_bins
    if np.any(upper):
        np.add.at(
            flat,
            k1[upper] * (height * width) + base[upper],
            pf[upper] * w1[upper],
        )


def voxelize(stream: EventStream, bins: int = DEFAULT_BINS) -> VoxelGrid:
    """Encode a stream as a B x H x W grid via bilinear temporal splatting."""
    if bins < 1:
        raise BoundsError("bin count must be >= 1")
    if stream.t1 <= stream.t0:
        raise DegenerateWindowError("cannot voxelize a zero-width window")
    grid = np.zeros((bins, stream.height, stream.width), dtype=np.float64)
    if len(stream):
        _splat(grid, stream.t, stream.x, stream.y, stream.p, stream.t0, stream.t1)
    return VoxelGrid(grid, stream.t0, stream.t1)


def chunk(stream: EventStream, n_chunks: int, bins: int = DEFAULT_BINS) -> ChunkSet:
    """Partition the exposure into n equal windows and voxelize each.

    Windows are half-open [edge_i, edge_{i+1}); the last is closed on the
    right so every event lands in exactly one chunk.
    """
    if n_chunks < 1:
        raise BoundsError("chunk count must be >= 1")
    edges = stream.t0 + (stream.t1 - stream.t0) * np.arange(n_chunks + 1) / n_chunks
    edges[-1] = stream.t1
    idx = np.searchsorted(stream.t, edges[:-1], side="left")
    idx = np.append(idx, np.searchsorted(stream.t, stream.t1, side="right"))
    chunks = []
    for i in range(n_chunks):
        lo, hi = idx[i], idx[i + 1]
        grid = np.zeros((bins, stream.height, stream.width), dtype=np.float64)
        if hi > lo:
            _splat(
                grid,
                stream.t[lo:hi],
                stream.x[lo:hi],
                stream.y[lo:hi],
                stream.p[lo:hi],
                float(edges[i]),
                float(edges[i + 1]),
            )
        chunks.append(VoxelGrid(grid, float(edges[i]), float(edges[i + 1])))
    return ChunkSet(chunks)


def chunk_event_counts(stream: EventStream, n_chunks: int) -> np.ndarray:
    """Number of events falling in each chunk window (same windows as chunk)."""
    edges = stream.t0 + (stream.t1 - stream.t0) * np.arange(n_chunks + 1) / n_chunks
    edges[-1] = stream.t1
    idx = np.searchsorted(stream.t, edges[:-1], side="left")
    idx = np.append(idx, np.searchsorted(stream.t, stream.t1, side="right"))
    return np.diff(idx)


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------

def write_events_text(stream: EventStream, path) -> None:
    """Write `# evt1 W H t0 t1` header plus one `t x y p` line per event."""
    with open(path, "w", encoding="ascii") as f:
        f.write(
            f"# evt1 {stream.width} {stream.height} "
            f"{float(stream.t0)!r} {float(stream.t1)!r}\n"
        )
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
            f.write(f"{float(t)!r} {x} {y} {p}\n")


def read_events_text(path) -> EventStream:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 6 or header[0] != "#" or header[1] != "evt1":
            raise FormatError(f"{path}: missing '# evt1' header")
        width, height = int(header[2]), int(header[3])
        t0, t1 = float(header[4]), float(header[5])
        rows = [line.split() for line in f if line.strip()]
    if any(len(r) != 4 for r in rows):
        raise FormatError(f"{path}: malformed event record")
    t = np.array([float(r[0]) for r in rows], dtype=np.float64)
    x = np.array([int(r[1]) for r in rows], dtype=np.int32)
    y = np.array([int(r[2]) for r in rows], dtype=np.int32)
    p = np.array([int(r[3]) for r in rows], dtype=np.int8)
    return EventStream(t, x, y, p, t0, t1, width, height)


def write_events_binary(stream: EventStream, path) -> None:
    """Write the packed little-endian binary format (13-byte records)."""
    records = np.empty(len(stream), dtype=_RECORD_DTYPE)
    records["t"] = stream.t
    records["x"] = stream.x
    records["y"] = stream.y
    records["p"] = stream.p
    with open(path, "wb") as f:
        f.write(
            _BINARY_HEADER.pack(
                _BINARY_MAGIC, stream.width, stream.height, stream.t0, stream.t1, len(stream)
            )
        )
        f.write(records.tobytes())


def read_events_binary(path) -> EventStream:
    with open(path, "rb") as f:
        head = f.read(_BINARY_HEADER.size)
        if len(head) != _BINARY_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, width, height, t0, t1, count = _BINARY_HEADER.unpack(head)
        if magic != _BINARY_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        payload = f.read(count * _RECORD_DTYPE.itemsize)
    if len(payload) != count * _RECORD_DTYPE.itemsize:
        raise FormatError(f"{path}: truncated event payload")
    records = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    return EventStream(
        records["t"].astype(np.float64),
        records["x"].astype(np.int32),
        records["y"].astype(np.int32),
        records["p"].astype(np.int8),
        t0,
        t1,
        width,
        height,
    )


def read_events(path) -> EventStream:
    """Dispatch on content: binary if the file starts with the magic bytes."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == _BINARY_MAGIC:
        return read_events_binary(path)
    return read_events_text(path)
