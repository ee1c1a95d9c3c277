"""Synthetic channel occupancy from superposed Poisson packet arrivals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_PHY_RATE = 24e6  # bit/s
DEFAULT_PKT_LEN_MIN = 2000  # bytes, MAC/IP headers included
DEFAULT_PKT_LEN_MAX = 2364


@dataclass(frozen=True)
class ArrivalProcess:
    """One traffic component: independent Poisson streams at ``rates`` (1/s).

    Packet lengths are uniform integers in ``[pkt_len_min, pkt_len_max]`` bytes
    and occupy the channel for ``8 * length / phy_rate`` seconds.
    """

    rates: tuple[float, ...]
    pkt_len_min: int = DEFAULT_PKT_LEN_MIN
    pkt_len_max: int = DEFAULT_PKT_LEN_MAX
    phy_rate: float = DEFAULT_PHY_RATE
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if any(not np.isfinite(r) or r < 0 for r in self.rates):
            raise ValueError(f"arrival rates must be finite and >= 0, got {self.rates}")
        if self.pkt_len_min > self.pkt_len_max or self.pkt_len_min <= 0:
            raise ValueError("need 0 < pkt_len_min <= pkt_len_max")
        if not self.phy_rate > 0:
            raise ValueError("phy_rate must be positive")

    @property
    def total_rate(self) -> float:
        return float(sum(self.rates))

    @property
    def mean_airtime(self) -> float:
        return 4.0 * (self.pkt_len_min + self.pkt_len_max) / self.phy_rate

    @property
    def min_airtime(self) -> float:
        return 8.0 * self.pkt_len_min / self.phy_rate


@dataclass(frozen=True)
class BusyIntervalSet:
    """Sorted, disjoint busy intervals on ``[0, horizon]`` (seconds)."""

    intervals: np.ndarray = field(repr=False)  # (n, 2) float64
    horizon: float

    def __post_init__(self):
        iv = np.asarray(self.intervals, dtype=np.float64).reshape(-1, 2)
        iv.setflags(write=False)
        object.__setattr__(self, "intervals", iv)

    def __len__(self) -> int:
        return self.intervals.shape[0]

    def __eq__(self, other):
        if not isinstance(other, BusyIntervalSet):
            return NotImplemented
        return self.horizon == other.horizon and np.array_equal(self.intervals, other.intervals)

    def busy_time(self) -> float:
        return float(np.sum(self.intervals[:, 1] - self.intervals[:, 0]))

    def busy_fraction(self) -> float:
        return self.busy_time() / self.horizon

    def contains(self, other: BusyIntervalSet) -> bool:
        """True if every interval of ``other`` lies inside one of ours."""
        if len(other) == 0:
            return True
        if len(self) == 0:
            return False
        idx = np.searchsorted(self.intervals[:, 0], other.intervals[:, 0], side="right") - 1
        if np.any(idx < 0):
            return False
        return bool(np.all(self.intervals[idx, 1] >= other.intervals[:, 1]))


def sample_arrivals(proc: ArrivalProcess, horizon: float, rng_seed: int) -> np.ndarray:
    """Packets of ``proc`` on ``[0, horizon]`` as rows ``(arrival_time, airtime)``.

    Each rate gets its own child stream of ``rng_seed`` so adding a rate never
    changes the sample path of the others. Output is sorted by arrival time.
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    children = np.random.SeedSequence(rng_seed).spawn(len(proc.rates))
    parts = []
    for rate, ss in zip(proc.rates, children):
        rng = np.random.default_rng(ss)
        n = rng.poisson(rate * horizon)
        times = rng.uniform(0.0, horizon, size=n)
        nbytes = rng.integers(proc.pkt_len_min, proc.pkt_len_max, size=n, endpoint=True)
        parts.append(np.column_stack([times, 8.0 * nbytes / proc.phy_rate]))
    if not parts:
        return np.empty((0, 2))
    out = np.concatenate(parts)
    return out[np.argsort(out[:, 0], kind="stable")]


def occupancy_union(packets, horizon: float) -> BusyIntervalSet:
    """Union of ``[start, start + airtime]`` intervals, clipped to the horizon."""
    pk = np.asarray(packets, dtype=np.float64).reshape(-1, 2)
    if pk.shape[0] == 0:
        return BusyIntervalSet(np.empty((0, 2)), horizon)
    if np.any(pk[:, 0] < 0) or np.any(pk[:, 0] > horizon) or np.any(pk[:, 1] < 0):
        raise ValueError("packet starts must lie in [0, horizon] with non-negative airtime")
    starts = pk[:, 0]
    ends = np.minimum(starts + pk[:, 1], horizon)
    order = np.argsort(starts, kind="stable")
    starts, ends = starts[order], ends[order]
    # a new run begins where the start exceeds every earlier end
    running_end = np.maximum.accumulate(ends)
    new_run = np.empty(starts.shape[0], dtype=bool)
    new_run[0] = True
    new_run[1:] = starts[1:] > running_end[:-1]
    first = np.flatnonzero(new_run)
    last = np.r_[first[1:], starts.shape[0]] - 1
    merged = np.column_stack([starts[first], running_end[last]])
    return BusyIntervalSet(merged, horizon)


def compose_node_traffic(
    shared: Sequence[np.ndarray], own: Sequence[np.ndarray], horizon: float
) -> BusyIntervalSet:
    """Busy set seen by one node: union of shared and node-specific packet lists.

    Shared components must be the very same sampled arrays for every node that
    hears them; that is what makes neighbouring datasets overlap.
    """
    lists = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in [*shared, *own]]
    if not lists:
        return BusyIntervalSet(np.empty((0, 2)), horizon)
    return occupancy_union(np.concatenate(lists), horizon)


def mginf_busy_probability(total_rate: float, mean_airtime: float) -> float:
    """Stationary probability that at least one packet is on air (M/G/inf)."""
    return 1.0 - float(np.exp(-total_rate * mean_airtime))
