"""Earth Mover's Distance between spike trains and its subgradient.

Both trains are read as normalized empirical CDFs, ``F(t) = #{t_i <= t} / P``,
and the distance is the integral of ``|F - G|``. One merge pass over the two
sorted trains gives the value and the per-event subgradients in O(P + R).

At a point where the integrand is not differentiable (an event coinciding
with another event in either train) the subgradient is the mean of the left
and right one-sided derivatives. Away from such points both one-sided
derivatives agree, so this is the ordinary derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .spiketrain import SpikeTrain

__all__ = [
    "EmptyEmbeddingError",
    "EmdResult",
    "emd",
    "emd_distance",
    "emd_matrix",
    "pack_trains",
    "pairwise_emd_packed",
    "cross_emd_packed",
    "accumulate_pair_gradients",
]


class EmptyEmbeddingError(ValueError):
    """Raised when a train with no events enters an EMD computation."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class EmdResult:
    distance: float
    grad_f: np.ndarray
    grad_g: np.ndarray


@numba.njit(cache=True, nogil=True)
def _emd_pass(f, g, grad_f, grad_g, want_grad):
    # f, g: sorted 1-D float64 arrays, both nonempty. CDF differences are kept
    # as integers scaled by P * R so coincident events give exact zeros.
    P = f.size
    R = g.size
    scale = 1.0 / (P * R)
    i = 0
    j = 0
    dist = 0.0
    t_prev = 0.0
    started = False
    while i < P or j < R:
        if j >= R or (i < P and f[i] <= g[j]):
            t = f[i]
        else:
            t = g[j]
        if started:
            dist += abs(i * R - j * P) * (t - t_prev)
        started = True
        i2 = i
        while i2 < P and f[i2] == t:
            i2 += 1
        j2 = j
        while j2 < R and g[j2] == t:
            j2 += 1
        if want_grad:
            lo = i * R - j * P  # (F - G) * P * R just before t
            hi = i2 * R - j2 * P  # (F - G) * P * R at t
            if i2 > i:
                right = abs(hi - R) - abs(hi)
                left = abs(lo + R) - abs(lo)
                d = 0.5 * (right - left) * scale
                for k in range(i, i2):
                    grad_f[k] = d
            if j2 > j:
                right = abs(hi + P) - abs(hi)
                left = abs(lo - P) - abs(lo)
                d = 0.5 * (right - left) * scale
                for k in range(j, j2):
                    grad_g[k] = d
        i = i2
        j = j2
        t_prev = t
    return dist * scale


def _times_of(train) -> np.ndarray:
    if isinstance(train, SpikeTrain):
        return train.times
    times = np.ascontiguousarray(train, dtype=np.float64).reshape(-1)
    if np.any(np.diff(times) < 0):
        raise ValueError("spike times must be sorted ascending")
    return times


def emd(f, g) -> EmdResult:
    """Distance and per-event subgradients for two nonempty trains.

    ``grad_f[i]`` is the derivative of the distance with respect to the i-th
    event time of ``f`` (likewise ``grad_g``).
    """
    ft, gt = _times_of(f), _times_of(g)
    if ft.size == 0:
        raise EmptyEmbeddingError("first spike train is empty", 0)
    if gt.size == 0:
        raise EmptyEmbeddingError("second spike train is empty", 1)
    grad_f = np.zeros(ft.size)
    grad_g = np.zeros(gt.size)
    dist = _emd_pass(ft, gt, grad_f, grad_g, True)
    return EmdResult(float(dist), grad_f, grad_g)


def emd_distance(f, g) -> float:
    ft, gt = _times_of(f), _times_of(g)
    if ft.size == 0 or gt.size == 0:
        raise EmptyEmbeddingError("spike train is empty", 0 if ft.size == 0 else 1)
    dummy = np.empty(0)
    return float(_emd_pass(ft, gt, dummy, dummy, False))


def pack_trains(trains: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Pack trains into a zero-padded ``(n, max_len)`` array plus lengths."""
    seqs = [_times_of(t) for t in trains]
    counts = np.array([s.size for s in seqs], dtype=np.int64)
    width = max(1, int(counts.max())) if len(seqs) else 1
    packed = np.zeros((len(seqs), width))
    for row, s in enumerate(seqs):
        packed[row, : s.size] = s
    return packed, counts


@numba.njit(cache=True, parallel=True)
def _pairwise_kernel(times, counts, out):
    n = times.shape[0]
    for a in numba.prange(n):
        fa = times[a, : counts[a]]
        dummy = np.empty(0)
        for b in range(a + 1, n):
            d = _emd_pass(fa, times[b, : counts[b]], dummy, dummy, False)
            out[a, b] = d
            out[b, a] = d


@numba.njit(cache=True, parallel=True)
def _cross_kernel(q_times, q_counts, r_times, r_counts, out):
    for a in numba.prange(q_times.shape[0]):
        fa = q_times[a, : q_counts[a]]
        dummy = np.empty(0)
        for b in range(r_times.shape[0]):
            out[a, b] = _emd_pass(fa, r_times[b, : r_counts[b]], dummy, dummy, False)


def _check_nonempty(counts: np.ndarray, what: str = "train"):
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyEmbeddingError(f"{what} {int(empty[0])} is empty", int(empty[0]))


def pairwise_emd_packed(times: np.ndarray, counts: np.ndarray) -> np.ndarray:
    _check_nonempty(counts)
    out = np.zeros((times.shape[0], times.shape[0]))
    _pairwise_kernel(np.ascontiguousarray(times, dtype=np.float64), counts.astype(np.int64), out)
    return out


def cross_emd_packed(q_times, q_counts, r_times, r_counts) -> np.ndarray:
    """Distances between every query row and every reference row."""
    _check_nonempty(q_counts, "query")
    _check_nonempty(r_counts, "reference")
    out = np.zeros((q_times.shape[0], r_times.shape[0]))
    _cross_kernel(
        np.ascontiguousarray(q_times, dtype=np.float64),
        q_counts.astype(np.int64),
        np.ascontiguousarray(r_times, dtype=np.float64),
        r_counts.astype(np.int64),
        out,
    )
    return out


def emd_matrix(trains: Sequence) -> np.ndarray:
    """Symmetric matrix of pairwise distances with a zero diagonal."""
    times, counts = pack_trains(trains)
    return pairwise_emd_packed(times, counts)


@numba.njit(cache=True)
def _accumulate_kernel(times, counts, coef, grad):
    n = times.shape[0]
    width = times.shape[1]
    gf = np.zeros(width)
    gg = np.zeros(width)
    for a in range(n):
        for b in range(a + 1, n):
            c = coef[a, b] + coef[b, a]
            if c == 0.0:
                continue
            pa = counts[a]
            pb = counts[b]
            _emd_pass(times[a, :pa], times[b, :pb], gf, gg, True)
            for k in range(pa):
                grad[a, k] += c * gf[k]
            for k in range(pb):
                grad[b, k] += c * gg[k]


def accumulate_pair_gradients(times: np.ndarray, counts: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Chain ``dL/dD[a, b] = coef[a, b]`` down to every packed event time.

    ``coef`` need not be symmetric; since ``D`` is, the two entries of a pair
    are summed. Rows with zero total coefficient may be empty.
    """
    grad = np.zeros_like(times, dtype=np.float64)
    sym = coef + coef.T
    involved = np.flatnonzero(np.any(sym != 0, axis=1))
    bad = involved[counts[involved] == 0]
    if bad.size:
        raise EmptyEmbeddingError(f"train {int(bad[0])} is empty", int(bad[0]))
    _accumulate_kernel(
        np.ascontiguousarray(times, dtype=np.float64),
        counts.astype(np.int64),
        np.ascontiguousarray(coef, dtype=np.float64),
        grad,
    )
    return grad
