"""Asynchronous event streams: validation, file formats, frame stacking, synthesis.

Binary ``.evst`` layout (little-endian)::

    "EVST" | u16 version=1 | u16 width | u16 height | u32 reserved=0 | 2 zero bytes
    u64 count
    count x (u16 x | u16 y | i64 t_us | i8 p | u8 pad=0)

Files ending in ``.csv`` use a ``x,y,t,p`` header and one event per line.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from evslt.errors import EmptyStream, IoFailure, MalformedFile, NonMonotonicTime, OutOfBounds
from evslt.vocab import RESERVED, TokenSentence

MAGIC = b"EVST"
VERSION = 1
HEADER = struct.Struct("<4sHHHI2x")
COUNT = struct.Struct("<Q")
RECORD_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<i8"), ("p", "i1"), ("pad", "u1")])
assert HEADER.size == 16 and RECORD_DTYPE.itemsize == 14

POSITIVE, NEGATIVE = 0, 1  # channel index per polarity


class EventPoint(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Validated, time-ordered events on a ``width`` x ``height`` sensor.

    Stored column-wise; the arrays are made read-only on construction.
    """

    width: int
    height: int
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        cols = {}
        for name, dtype in (("x", np.int64), ("y", np.int64), ("t", np.int64), ("p", np.int8)):
            arr = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            arr.setflags(write=False)
            cols[name] = arr
            object.__setattr__(self, name, arr)
        n = len(cols["x"])
        if any(len(a) != n for a in cols.values()):
            raise MalformedFile("event columns differ in length")
        if not (0 < self.width < 2**16 and 0 < self.height < 2**16):
            raise OutOfBounds(f"sensor geometry {self.width}x{self.height} out of range")
        if n:
            x, y, t, p = cols["x"], cols["y"], cols["t"], cols["p"]
            if x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height:
                raise OutOfBounds(f"coordinates exceed sensor {self.width}x{self.height}")
            if t.min() < 0:
                raise NonMonotonicTime("negative timestamp")
            if np.any(np.diff(t) < 0):
                raise NonMonotonicTime("timestamps decrease")
            if not np.all((p == 1) | (p == -1)):
                raise MalformedFile("polarity must be +1 or -1")

    @classmethod
    def from_points(cls, points: Iterable[Sequence[int]], geometry: tuple[int, int]) -> "EventStream":
        pts = np.array(list(points), dtype=np.int64).reshape(-1, 4)
        return cls(geometry[0], geometry[1], pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3])

    @property
    def geometry(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def points(self) -> list[EventPoint]:
        return [EventPoint(*map(int, row)) for row in zip(self.x, self.y, self.t, self.p)]

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.geometry == other.geometry
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "xytp"))


@dataclass(frozen=True)
class FrameTensor:
    """Stacked event frames of shape (T, C, H, W)."""

    data: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def T(self) -> int:
        return self.data.shape[0]


# --------------------------------------------------------------------- I/O


def encode_events(stream: EventStream) -> bytes:
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    return (HEADER.pack(MAGIC, VERSION, stream.width, stream.height, 0)
            + COUNT.pack(len(stream)) + rec.tobytes())


def decode_events(blob: bytes) -> EventStream:
    if len(blob) < HEADER.size + COUNT.size:
        raise MalformedFile("truncated header")
    magic, version, width, height, reserved = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MalformedFile(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedFile(f"unsupported version {version}")
    if reserved != 0 or blob[14:16] != b"\0\0":
        raise MalformedFile("reserved header bytes must be zero")
    (count,) = COUNT.unpack_from(blob, HEADER.size)
    body = blob[HEADER.size + COUNT.size :]
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise MalformedFile(f"expected {count} records, found {len(body)} bytes")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE, count=count)
    if np.any(rec["pad"] != 0):
        raise MalformedFile("record padding must be zero")
    return EventStream(width, height, rec["x"], rec["y"], rec["t"], rec["p"])


def write_events(stream: EventStream, path) -> None:
    path = Path(path)
    try:
        if path.suffix.lower() == ".csv":
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["x", "y", "t", "p"])
            w.writerows(zip(stream.x.tolist(), stream.y.tolist(), stream.t.tolist(), stream.p.tolist()))
            path.write_text(buf.getvalue(), encoding="ascii")
        else:
            path.write_bytes(encode_events(stream))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_events(path, geometry: tuple[int, int] | None = None) -> EventStream:
    """Read a binary or CSV event file.

    CSV files carry no geometry; pass ``geometry`` or it is inferred from the
    largest coordinates.
    """
    path = Path(path)
    try:
        if path.suffix.lower() == ".csv":
            return _read_csv(path.read_text(encoding="ascii"), geometry)
        return decode_events(path.read_bytes())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _read_csv(text: str, geometry: tuple[int, int] | None) -> EventStream:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["x", "y", "t", "p"]:
        raise MalformedFile("CSV header must be x,y,t,p")
    try:
        pts = np.array([[int(c) for c in r] for r in rows[1:] if r], dtype=np.int64).reshape(-1, 4)
    except ValueError as exc:
        raise MalformedFile(f"bad CSV row: {exc}") from exc
    if geometry is None:
        geometry = (int(pts[:, 0].max()) + 1, int(pts[:, 1].max()) + 1) if len(pts) else (1, 1)
    return EventStream(geometry[0], geometry[1], pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3])


# ----------------------------------------------------------------- framing


def stack_to_frames(stream: EventStream, T: int, mode: str = "time") -> FrameTensor:
    """Accumulate events into T polarity-count frames.

    ``mode="time"`` splits [t_min, t_max] into T equal bins (the last one closed
    on the right); ``mode="count"`` gives each bin an equal share of events.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n = len(stream)
    if n == 0:
        raise EmptyStream("cannot stack an empty event stream")
    if mode == "time":
        rel = stream.t - stream.t[0]
        span = int(stream.t[-1] - stream.t[0])
        bins = np.zeros(n, dtype=np.int64) if span == 0 else np.minimum(rel * T // span, T - 1)
    elif mode == "count":
        bins = np.arange(n, dtype=np.int64) * T // n
    else:
        raise ValueError(f"unknown bin mode {mode!r}")
    chan = np.where(stream.p > 0, POSITIVE, NEGATIVE)
    frames = np.zeros((T, 2, stream.height, stream.width), dtype=np.float32)
    np.add.at(frames, (bins, chan, stream.y, stream.x), 1.0)
    return FrameTensor(frames)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) overlap lengths of output cells with input cells, in input units."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    return np.clip(hi - lo, 0.0, None)


def resize_frames(frames: FrameTensor, out_h: int, out_w: int, mode: str = "mean") -> FrameTensor:
    """Area-weighted (box filter) resampling of every channel.

    ``mode="mean"`` averages over each output cell's footprint; ``mode="mass"``
    redistributes counts so per-frame totals are preserved.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    data = frames.data
    h, w = data.shape[-2:]
    if (h, w) == (out_h, out_w):
        return FrameTensor(data.copy())
    ry = _area_weights(h, out_h)
    rx = _area_weights(w, out_w)
    if mode == "mean":
        ry /= ry.sum(axis=1, keepdims=True)
        rx /= rx.sum(axis=1, keepdims=True)
    elif mode != "mass":
        raise ValueError(f"unknown resize mode {mode!r}")
    out = np.einsum("oh,tchw,pw->tcop", ry, data.astype(np.float64), rx, optimize=True)
    return FrameTensor(out.astype(data.dtype))


def normalize_frames(frames: FrameTensor) -> FrameTensor:
    """Scale to [0, 1] by the sample's maximum count; all-zero input stays zero."""
    peak = float(frames.data.max()) if frames.data.size else 0.0
    if peak <= 0:
        return FrameTensor(frames.data.copy())
    return FrameTensor((frames.data / peak).astype(frames.data.dtype))


def subsample_frames(frames: FrameTensor, T: int) -> FrameTensor:
    """Keep every k-th frame so that exactly ``T`` remain (k = L // T)."""
    L = frames.T
    if T < 1 or T > L:
        raise ValueError(f"cannot take {T} frames from {L}")
    k = L // T
    return FrameTensor(frames.data[::k][:T].copy())


def render_rgb(frames: FrameTensor) -> np.ndarray:
    """(T, 3, H, W) uint8 visualization: positive events red, negative blue."""
    norm = normalize_frames(frames).data
    rgb = np.zeros((frames.T, 3, *frames.shape[-2:]), dtype=np.uint8)
    rgb[:, 0] = np.round(norm[:, POSITIVE] * 255)
    rgb[:, 2] = np.round(norm[:, NEGATIVE] * 255)
    return rgb


# --------------------------------------------------------------- synthesis


def _bar_pixels(cx: float, cy: float, theta: float, half_len: int, width: int, height: int):
    # bar perpendicular to the motion direction
    ux, uy = -np.sin(theta), np.cos(theta)
    s = np.arange(-half_len, half_len + 1)
    xs = np.round(cx + s * ux).astype(np.int64)
    ys = np.round(cy + s * uy).astype(np.int64)
    keep = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    return xs[keep], ys[keep]


def synth_scene(seed: int, vocab: Sequence[str], length_range: tuple[int, int],
                geometry: tuple[int, int] = (64, 64), token_us: int = 100_000,
                steps_per_token: int = 16, noise_per_step: int = 2) -> tuple[EventStream, TokenSentence]:
    """Deterministic synthetic sample: one moving-bar motif per sentence token.

    Token k of a V-word vocabulary sweeps a bar across the sensor centre along
    direction 2*pi*k/V; bars of even and odd tokens differ in length. Positive
    events mark the leading edge, negative events the trailing edge.
    """
    if not vocab:
        raise ValueError("vocab must not be empty")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError("length_range must satisfy 1 <= min <= max")
    width, height = geometry
    rng = np.random.default_rng(seed)
    length = int(rng.integers(lo, hi + 1))
    body = rng.integers(0, len(vocab), size=length)
    radius = 0.35 * min(width, height)
    dt = token_us // steps_per_token
    xs, ys, ts, ps = [], [], [], []
    for slot, k in enumerate(body):
        theta = 2 * np.pi * k / len(vocab)
        half_len = max(2, int(min(width, height) * (0.12 if k % 2 == 0 else 0.07)))
        prev = None
        for step in range(steps_per_token + 1):
            frac = step / steps_per_token
            cx = width / 2 + (2 * frac - 1) * radius * np.cos(theta)
            cy = height / 2 + (2 * frac - 1) * radius * np.sin(theta)
            cur = _bar_pixels(cx, cy, theta, half_len, width, height)
            base = slot * token_us + step * dt
            if prev is not None:
                for (px, py), pol in ((cur, 1), (prev, -1)):
                    xs.append(px)
                    ys.append(py)
                    ts.append(base + rng.integers(0, dt, size=len(px)))
                    ps.append(np.full(len(px), pol))
                xs.append(rng.integers(0, width, size=noise_per_step))
                ys.append(rng.integers(0, height, size=noise_per_step))
                ts.append(base + rng.integers(0, dt, size=noise_per_step))
                ps.append(rng.choice([-1, 1], size=noise_per_step))
            prev = cur
    x, y, t, p = (np.concatenate(a) for a in (xs, ys, ts, ps))
    order = np.argsort(t, kind="stable")
    stream = EventStream(width, height, x[order], y[order], t[order], p[order])
    return stream, TokenSentence.from_body(int(k) + len(RESERVED) for k in body)
