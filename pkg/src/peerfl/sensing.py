"""Slot-level channel sensing and next-slot supervised datasets."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .traffic import BusyIntervalSet

DEFAULT_DELTA = 20e-6
DEFAULT_WINDOW = 100
VALIDATION_FRACTION = 0.1

# guards slot-boundary arithmetic against float round-off (in slot units)
_EDGE_TOL = 1e-9


def n_slots(horizon: float, delta: float) -> int:
    return int(np.floor(horizon / delta + _EDGE_TOL))


@dataclass(frozen=True)
class ChannelTrace:
    """Binary sensing series: 1 = busy for any part of the slot."""

    slots: np.ndarray = field(repr=False)
    delta: float = DEFAULT_DELTA
    channel_id: int = 0

    def __post_init__(self):
        s = np.asarray(self.slots)
        if s.ndim != 1:
            raise ValueError("slots must be one-dimensional")
        if s.size and not np.all((s == 0) | (s == 1)):
            raise ValueError("slots must contain only 0 and 1")
        s = s.astype(np.uint8)
        s.setflags(write=False)
        object.__setattr__(self, "slots", s)

    def __len__(self) -> int:
        return self.slots.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ChannelTrace):
            return NotImplemented
        return (
            self.delta == other.delta
            and self.channel_id == other.channel_id
            and np.array_equal(self.slots, other.slots)
        )

    def busy_fraction(self) -> float:
        return float(self.slots.mean()) if len(self) else 0.0


@dataclass(frozen=True)
class Dataset:
    """Non-overlapping windows of one-hot inputs with next-slot targets.

    ``inputs`` is (n_windows, window_len, m) float64, ``targets`` is
    (n_windows, window_len) int64.
    """

    inputs: np.ndarray = field(repr=False)
    targets: np.ndarray = field(repr=False)
    window_len: int

    def __post_init__(self):
        if self.inputs.shape[:2] != self.targets.shape:
            raise ValueError("inputs and targets disagree on shape")
        for a in (self.inputs, self.targets):
            a.setflags(write=False)

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[2]


def sense(busy: BusyIntervalSet, delta: float = DEFAULT_DELTA, channel_id: int = 0) -> ChannelTrace:
    """Rasterize a busy set: slot k is 1 iff busy overlaps [k*delta, (k+1)*delta)."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if delta >= busy.horizon:
        raise ValueError(f"delta {delta} must be shorter than the horizon {busy.horizon}")
    n = n_slots(busy.horizon, delta)
    iv = busy.intervals
    if len(iv) == 0:
        return ChannelTrace(np.zeros(n, dtype=np.uint8), delta, channel_id)
    first = np.floor(iv[:, 0] / delta + _EDGE_TOL).astype(np.int64)
    stop = np.ceil(iv[:, 1] / delta - _EDGE_TOL).astype(np.int64)
    keep = stop > first  # zero-length intervals have no measure
    first = np.clip(first[keep], 0, n)
    stop = np.clip(stop[keep], 0, n)
    diff = np.zeros(n + 1, dtype=np.int64)
    np.add.at(diff, first, 1)
    np.add.at(diff, stop, -1)
    slots = (np.cumsum(diff[:-1]) > 0).astype(np.uint8)
    return ChannelTrace(slots, delta, channel_id)


def one_hot(state, m: int = 2) -> np.ndarray:
    """One-of-m encoding; also accepts an integer array, returning (..., m)."""
    s = np.asarray(state)
    if not np.issubdtype(s.dtype, np.integer):
        if not np.all(np.mod(s, 1) == 0):
            raise ValueError("state must be an integer class index")
        s = s.astype(np.int64)
    if np.any(s < 0) or np.any(s >= m):
        raise ValueError(f"state out of range for m={m}")
    return np.eye(m)[s]


def build_dataset(trace: ChannelTrace, window_len: int = DEFAULT_WINDOW, m: int = 2) -> Dataset:
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    n = len(trace)
    if n <= window_len + 1:
        raise ValueError(f"trace of {n} slots is too short for windows of {window_len}")
    count = (n - 1) // window_len
    used = count * window_len
    x = trace.slots[:used].astype(np.int64).reshape(count, window_len)
    y = trace.slots[1:used + 1].astype(np.int64).reshape(count, window_len)
    return Dataset(one_hot(x, m), np.ascontiguousarray(y), window_len)


def split_validation(
    train_seed: int,
    val_seed: int,
    generate: Callable[[int, float], BusyIntervalSet],
    horizon: float,
    delta: float = DEFAULT_DELTA,
    window_len: int = DEFAULT_WINDOW,
    channel_id: int = 0,
) -> tuple[Dataset, Dataset]:
    """Training set from ``train_seed`` and a 10%-sized validation set from ``val_seed``.

    ``generate(seed, horizon)`` must realize the same traffic processes for
    both calls; only the seed differs.
    """
    train, val = split_traces(train_seed, val_seed, generate, horizon, delta, channel_id)
    return build_dataset(train, window_len), build_dataset(val, window_len)


def split_traces(train_seed, val_seed, generate, horizon, delta=DEFAULT_DELTA, channel_id=0):
    if train_seed == val_seed:
        raise ValueError("validation must use a different seed than training")
    train = sense(generate(train_seed, horizon), delta, channel_id)
    val_horizon = n_slots(horizon, delta) // 10 * delta
    val = sense(generate(val_seed, val_horizon), delta, channel_id)
    return train, val


# --- trace files -----------------------------------------------------------
#
# Binary (.trace): little-endian header then np.packbits(slots), MSB first.
#   magic  4s  b"PFLT"
#   version H  1
#   channel I
#   delta   d  seconds
#   length  Q  slots
# Text (.txt): "# delta=<s> length=<n> channel_id=<c>" then one 0/1 per line.

TRACE_MAGIC = b"PFLT"
TRACE_VERSION = 1
_TRACE_HEADER = struct.Struct("<4sHIdQ")


class TraceFormatError(ValueError):
    pass


def trace_to_bytes(trace: ChannelTrace) -> bytes:
    head = _TRACE_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, trace.channel_id, trace.delta, len(trace))
    return head + np.packbits(trace.slots).tobytes()


def trace_from_bytes(data: bytes) -> ChannelTrace:
    if len(data) < _TRACE_HEADER.size:
        raise TraceFormatError("truncated trace header")
    magic, version, channel, delta, length = _TRACE_HEADER.unpack_from(data)
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}")
    if version != TRACE_VERSION:
        raise TraceFormatError(f"unsupported trace version {version}")
    body = np.frombuffer(data, dtype=np.uint8, offset=_TRACE_HEADER.size)
    if body.size != (length + 7) // 8:
        raise TraceFormatError("trace body length does not match header")
    return ChannelTrace(np.unpackbits(body, count=length), delta, channel)


def save_trace(trace: ChannelTrace, path) -> None:
    path = Path(path)
    if path.suffix == ".txt":
        lines = [f"# delta={trace.delta!r} length={len(trace)} channel_id={trace.channel_id}"]
        lines.extend(map(str, trace.slots.tolist()))
        path.write_text("\n".join(lines) + "\n")
    else:
        path.write_bytes(trace_to_bytes(trace))


def load_trace(path) -> ChannelTrace:
    path = Path(path)
    if path.suffix != ".txt":
        return trace_from_bytes(path.read_bytes())
    lines = path.read_text().split()
    if not lines or lines[0] != "#":
        raise TraceFormatError("missing header line")
    meta = dict(tok.split("=", 1) for tok in lines[1:4])
    slots = np.array([int(v) for v in lines[4:]], dtype=np.uint8)
    if slots.size != int(meta["length"]):
        raise TraceFormatError("slot count does not match header")
    return ChannelTrace(slots, float(meta["delta"]), int(meta["channel_id"]))
