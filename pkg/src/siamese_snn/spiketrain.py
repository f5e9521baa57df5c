"""Event-time data model: spike trains, per-channel events and the z transform.

Times are milliseconds in double precision. A channel without an event is
marked absent through a boolean mask; no sentinel time is ever used for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SpikeTrain",
    "ChannelEvents",
    "to_z",
    "from_z",
    "merge_sorted",
]


def _as_times(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SpikeTrain:
    """Sorted multiset of event times.

    An empty train is a legal value: it means no event occurred at all.
    """

    times: np.ndarray = field(default_factory=lambda: _as_times([]))

    def __post_init__(self):
        times = _as_times(self.times)
        if not np.all(np.isfinite(times)):
            raise ValueError("spike times must be finite")
        if times.size and times[0] < 0:
            raise ValueError("spike times must be >= 0")
        if np.any(np.diff(times) < 0):
            raise ValueError("spike times must be sorted ascending")
        object.__setattr__(self, "times", times)

    @classmethod
    def from_unsorted(cls, values) -> "SpikeTrain":
        return cls(np.sort(np.asarray(values, dtype=np.float64).reshape(-1), kind="stable"))

    def __len__(self) -> int:
        return int(self.times.size)

    def __iter__(self):
        return iter(self.times.tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpikeTrain):
            return NotImplemented
        return np.array_equal(self.times, other.times)

    def __hash__(self) -> int:
        return hash(self.times.tobytes())

    def __repr__(self) -> str:
        return f"SpikeTrain({self.times.tolist()})"

    @property
    def is_empty(self) -> bool:
        return self.times.size == 0

    def truncated(self, t: float) -> "SpikeTrain":
        """Events observed up to and including time ``t``."""
        return SpikeTrain(self.times[: np.searchsorted(self.times, t, side="right")])


@dataclass(frozen=True, eq=False)
class ChannelEvents:
    """One optional event time per input channel.

    ``present[i]`` is False for a channel that carries no event. The entry in
    ``times`` for such a channel is meaningless and kept at zero.
    """

    times: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=np.float64, copy=True).reshape(-1)
        present = np.array(self.present, dtype=bool, copy=True).reshape(-1)
        if times.shape != present.shape:
            raise ValueError("times and present mask must have the same length")
        times[~present] = 0.0
        if not np.all(np.isfinite(times)) or np.any(times < 0):
            raise ValueError("present event times must be finite and >= 0")
        times.setflags(write=False)
        present.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "present", present)

    @classmethod
    def from_optional(cls, values) -> "ChannelEvents":
        """Build from a sequence where ``None`` marks an absent channel."""
        present = np.array([v is not None for v in values], dtype=bool)
        times = np.array([0.0 if v is None else float(v) for v in values])
        return cls(times, present)

    @classmethod
    def absent(cls, n_channels: int) -> "ChannelEvents":
        return cls(np.zeros(n_channels), np.zeros(n_channels, dtype=bool))

    def __len__(self) -> int:
        return int(self.present.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelEvents):
            return NotImplemented
        return np.array_equal(self.present, other.present) and np.array_equal(self.times, other.times)

    def __getitem__(self, i: int):
        return float(self.times[i]) if self.present[i] else None

    def to_optional(self) -> list:
        return [self[i] for i in range(len(self))]

    @property
    def n_events(self) -> int:
        return int(self.present.sum())

    def as_spike_train(self) -> SpikeTrain:
        return SpikeTrain.from_unsorted(self.times[self.present])


def to_z(t, tau_syn: float):
    """Map event time(s) to the z domain, ``exp(t / tau_syn)``."""
    if not tau_syn > 0:
        raise ValueError(f"tau_syn must be positive, got {tau_syn}")
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("event time must be finite")
    z = np.exp(t / tau_syn)
    return float(z) if z.ndim == 0 else z


def from_z(z, tau_syn: float):
    """Inverse of :func:`to_z`."""
    if not tau_syn > 0:
        raise ValueError(f"tau_syn must be positive, got {tau_syn}")
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise ValueError("z must be finite and positive")
    t = tau_syn * np.log(z)
    return float(t) if t.ndim == 0 else t


def merge_sorted(a: SpikeTrain, b: SpikeTrain) -> SpikeTrain:
    """Union of two trains with duplicates kept."""
    out = np.empty(len(a) + len(b))
    i = j = k = 0
    ta, tb = a.times, b.times
    while i < ta.size and j < tb.size:
        if tb[j] < ta[i]:
            out[k] = tb[j]
            j += 1
        else:
            out[k] = ta[i]
            i += 1
        k += 1
    out[k : k + ta.size - i] = ta[i:]
    k += ta.size - i
    out[k:] = tb[j:]
    return SpikeTrain(out)
