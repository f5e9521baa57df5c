"""Feedforward network of non-leaky integrate-and-fire neurons with
exponentially decaying synaptic current, one spike per neuron.

A neuron receiving events ``t_i`` with weights ``w_i`` fires at ``t_out``
given in the z domain (``z = exp(t / tau_syn)``) by

    z_out = sum_C w_i z_i / (sum_C w_i - v_thr / tau_syn)

where ``C`` is the causal set of inputs that arrived before ``t_out``. The
forward pass finds ``C`` by scanning inputs in time order and accepting the
first prefix whose candidate output time falls inside the interval before the
next input. The scan is carried out with ``z`` values scaled by the latest
causal input, which avoids overflow for late events (``t`` of several hundred
ms) without changing the result.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .spiketrain import ChannelEvents, SpikeTrain

__all__ = [
    "NeuronConfig",
    "NetworkTopology",
    "Network",
    "CausalSolution",
    "BatchTrace",
    "CheckpointError",
    "neuron_forward",
    "neuron_backward",
    "network_forward",
    "network_backward",
    "forward_batch",
    "backward_batch",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NeuronConfig:
    tau_syn: float = 1.0
    v_thr: float = 1.0
    v0: float = 0.0

    def __post_init__(self):
        if not self.tau_syn > 0:
            raise ValueError("tau_syn must be positive")
        if not self.v_thr > 0:
            raise ValueError("v_thr must be positive")
        if self.v0 != 0:
            raise ValueError("only v0 = 0 is supported")

    @property
    def theta(self) -> float:
        """Threshold ratio ``v_thr / tau_syn`` in the denominator of the spike-time map."""
        return self.v_thr / self.tau_syn


@dataclass(frozen=True)
class NetworkTopology:
    sizes: tuple[int, ...] = (784, 400, 400, 10)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if min(sizes) < 1:
            raise ValueError("layer sizes must be >= 1")
        object.__setattr__(self, "sizes", sizes)

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        """Number of weight layers."""
        return len(self.sizes) - 1

    @property
    def n_neurons(self) -> int:
        return sum(self.sizes[1:])

    @property
    def n_hidden(self) -> int:
        return sum(self.sizes[1:-1])

    def weight_shapes(self) -> list[tuple[int, int]]:
        return [(self.sizes[k], self.sizes[k + 1]) for k in range(self.n_layers)]


@dataclass
class Network:
    """Topology, neuron constants and one ``(n_pre, n_post)`` weight matrix per layer."""

    topology: NetworkTopology
    config: NeuronConfig
    weights: list[np.ndarray]

    def __post_init__(self):
        shapes = self.topology.weight_shapes()
        if len(self.weights) != len(shapes):
            raise ValueError(f"expected {len(shapes)} weight matrices, got {len(self.weights)}")
        ws = []
        for w, shape in zip(self.weights, shapes):
            w = np.ascontiguousarray(w, dtype=np.float64)
            if w.shape != shape:
                raise ValueError(f"weight shape {w.shape} does not match topology {shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite")
            ws.append(w)
        self.weights = ws

    @classmethod
    def initialize(
        cls,
        topology: NetworkTopology,
        config: NeuronConfig = NeuronConfig(),
        rng: np.random.Generator | int | None = None,
        gain: float = 1.0,
    ) -> "Network":
        """Gaussian weights with mean ``gain * 4 * theta / fan_in`` and std ``1 / sqrt(fan_in)``.

        The positive mean puts the expected full weight sum of every neuron at
        ``4 * theta`` (times ``gain``), so most neurons start out able to fire.
        """
        rng = np.random.default_rng(rng)
        weights = []
        for fan_in, fan_out in topology.weight_shapes():
            mean = gain * 4.0 * config.theta / fan_in
            weights.append(rng.normal(mean, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))
        return cls(topology, config, weights)

    def copy(self) -> "Network":
        return Network(self.topology, self.config, [w.copy() for w in self.weights])

    def save(self, path) -> None:
        path = Path(path)
        meta = {
            "format": "siamese-snn-checkpoint",
            "version": CHECKPOINT_VERSION,
            "sizes": list(self.topology.sizes),
            "tau_syn": self.config.tau_syn,
            "v_thr": self.config.v_thr,
            "v0": self.config.v0,
        }
        arrays = {f"w{k}": w for k, w in enumerate(self.weights)}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "Network":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        try:
            with np.load(path, allow_pickle=False) as data:
                meta = json.loads(str(data["meta"]))
                if meta.get("format") != "siamese-snn-checkpoint":
                    raise CheckpointError(f"{path}: not a siamese-snn checkpoint")
                if meta.get("version") != CHECKPOINT_VERSION:
                    raise CheckpointError(
                        f"{path}: checkpoint version {meta.get('version')} unsupported "
                        f"(expected {CHECKPOINT_VERSION})"
                    )
                topology = NetworkTopology(tuple(meta["sizes"]))
                weights = [data[f"w{k}"] for k in range(topology.n_layers)]
        except (KeyError, ValueError, OSError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
        config = NeuronConfig(meta["tau_syn"], meta["v_thr"], meta["v0"])
        return cls(topology, config, weights)


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, nogil=True)
def _scan_example(ts, order, n, w, tau, theta, t_out, fired, n_causal, denom):
    """Causal-set search for every neuron of a layer on one example.

    ``ts[:n]`` are the present input times in ascending order and
    ``order[:n]`` their channels. Inputs are consumed in time order, one group
    of simultaneous events at a time, with running sums kept for all neurons
    at once; a neuron is settled at the first group after which its candidate
    output time lies in ``[t_k, t_next]``.
    """
    J = w.shape[1]
    s = np.zeros(J)
    comp = np.zeros(J)
    a = np.zeros(J)  # sum_C w_i z_i / z_k for the current group time t_k
    for j in range(J):
        fired[j] = False
        t_out[j] = 0.0
        n_causal[j] = 0
        denom[j] = 0.0
    remaining = J
    m = 0
    t_prev = 0.0
    while m < n and remaining > 0:
        t_k = ts[m]
        if m > 0:
            decay = math.exp(-(t_k - t_prev) / tau)
            for j in range(J):
                a[j] *= decay
        while m < n and ts[m] == t_k:
            row = w[order[m]]
            for j in range(J):
                wi = row[j]
                a[j] += wi
                # compensated sum keeps the sign test on s - theta stable
                y = wi - comp[j]
                tmp = s[j] + y
                comp[j] = (tmp - s[j]) - y
                s[j] = tmp
            m += 1
        limit = math.exp((ts[m] - t_k) / tau) if m < n else np.inf
        for j in range(J):
            if fired[j]:
                continue
            d = s[j] - theta
            if d > 0.0:
                r = a[j] / d  # z_out / z_k
                if r >= 1.0 and r <= limit:
                    fired[j] = True
                    t_out[j] = t_k + tau * math.log(r)
                    n_causal[j] = m
                    denom[j] = d
                    remaining -= 1
        t_prev = t_k


@numba.njit(cache=True, parallel=True)
def _layer_forward(t_in, present, w, tau, theta, order, n_present, t_out, fired, n_causal, denom):
    B, N = t_in.shape
    for b in numba.prange(B):
        idx = np.empty(N, dtype=np.int64)
        n = 0
        for i in range(N):
            if present[b, i]:
                idx[n] = i
                n += 1
        idx = idx[:n]
        tt = np.empty(n)
        for m in range(n):
            tt[m] = t_in[b, idx[m]]
        perm = np.argsort(tt, kind="mergesort")
        ts = np.empty(n)
        for m in range(n):
            order[b, m] = idx[perm[m]]
            ts[m] = tt[perm[m]]
        n_present[b] = n
        _scan_example(ts, order[b], n, w, tau, theta, t_out[b], fired[b], n_causal[b], denom[b])


# Largest exponent span handled by the factorized backward path; beyond it
# exp() factors could overflow and the per-pair path is used instead.
_MAX_SPAN = 600.0


@numba.njit(cache=True)
def _layer_backward(t_in, order, t_out, n_causal, denom, w, g_out, tau, gW, g_in, want_in):
    B = t_in.shape[0]
    J = w.shape[1]
    c = np.zeros(J)
    cv = np.zeros(J)
    h = np.zeros(J)
    lim = np.zeros(J, dtype=np.int64)
    for b in range(B):
        kmax = 0
        t_hi = -np.inf
        t_lo = np.inf
        for j in range(J):
            if g_out[b, j] != 0.0 and n_causal[b, j] > 0:
                lim[j] = n_causal[b, j]
                kmax = max(kmax, lim[j])
                t_hi = max(t_hi, t_out[b, j])
                t_lo = min(t_lo, t_out[b, j])
            else:
                lim[j] = 0
        if kmax == 0:
            continue
        t_first = t_in[b, order[b, 0]]
        # dt_out/dw_i = tau (e - 1) / D and dt_out/dt_i = w_i e / D with
        # e = exp((t_i - t_out) / tau) = u_i * v_j
        if t_hi - t_first <= _MAX_SPAN and t_hi - t_lo <= _MAX_SPAN:
            for j in range(J):
                if lim[j] > 0:
                    g = g_out[b, j]
                    v = math.exp((t_hi - t_out[b, j]) / tau)
                    c[j] = g * tau / denom[b, j]
                    cv[j] = c[j] * v
                    h[j] = g * v / denom[b, j]
                else:
                    c[j] = 0.0
                    cv[j] = 0.0
                    h[j] = 0.0
            for m in range(kmax):
                i = order[b, m]
                u = math.exp((t_in[b, i] - t_hi) / tau)
                row = gW[i]
                for j in range(J):
                    if lim[j] > m:
                        row[j] += cv[j] * u - c[j]
                if want_in:
                    wrow = w[i]
                    acc = 0.0
                    for j in range(J):
                        if lim[j] > m:
                            acc += h[j] * wrow[j]
                    g_in[b, i] += u * acc
        else:
            for m in range(kmax):
                i = order[b, m]
                row = gW[i]
                wrow = w[i]
                acc = 0.0
                for j in range(J):
                    if lim[j] > m:
                        g = g_out[b, j]
                        e = math.exp((t_in[b, i] - t_out[b, j]) / tau)
                        row[j] += g * tau * (e - 1.0) / denom[b, j]
                        acc += g * wrow[j] * e / denom[b, j]
                if want_in:
                    g_in[b, i] += acc


# ---------------------------------------------------------------------------
# batch interface


@dataclass
class LayerState:
    """Forward state of one weight layer over a batch."""

    t_in: np.ndarray  # (B, N) input times, 0 where absent
    present_in: np.ndarray  # (B, N)
    order: np.ndarray  # (B, N) present input indices sorted by time
    n_present: np.ndarray  # (B,)
    t_out: np.ndarray  # (B, J) 0 where quiescent
    fired: np.ndarray  # (B, J)
    n_causal: np.ndarray  # (B, J) prefix length of ``order`` forming the causal set
    denom: np.ndarray  # (B, J)


@dataclass
class BatchTrace:
    """Forward pass over a batch, kept for the backward pass and sparsity analysis.

    ``emb_times[b, :emb_counts[b]]`` is the sorted output spike train of
    example ``b``; ``emb_neuron`` names the output neuron behind each event.
    """

    network: Network
    layers: list[LayerState]
    emb_times: np.ndarray
    emb_counts: np.ndarray
    emb_neuron: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.emb_times.shape[0]

    def embedding(self, b: int) -> SpikeTrain:
        return SpikeTrain(self.emb_times[b, : self.emb_counts[b]])

    def embeddings(self) -> list[SpikeTrain]:
        return [self.embedding(b) for b in range(self.batch_size)]

    def hidden_fired(self) -> np.ndarray:
        """``(B, n_hidden)`` firing flags of every hidden neuron."""
        hidden = [layer.fired for layer in self.layers[:-1]]
        if not hidden:
            return np.zeros((self.batch_size, 0), dtype=bool)
        return np.concatenate(hidden, axis=1)

    def solution(self, layer: int, neuron: int, example: int = 0) -> "CausalSolution":
        st = self.layers[layer]
        cfg = self.network.config
        w = self.network.weights[layer][:, neuron]
        k = int(st.n_causal[example, neuron])
        causal = st.order[example, :k].copy()
        z_causal = np.exp(st.t_in[example, causal] / cfg.tau_syn)
        fired = bool(st.fired[example, neuron])
        t_out = float(st.t_out[example, neuron]) if fired else None
        return CausalSolution(
            fired=fired,
            t_out=t_out,
            causal=causal,
            z_causal=z_causal,
            w_causal=w[causal].copy(),
            denominator=float(st.denom[example, neuron]) if fired else None,
            n_inputs=w.size,
            tau_syn=cfg.tau_syn,
        )


def _as_batch(times, present):
    times = np.atleast_2d(np.asarray(times, dtype=np.float64))
    present = np.atleast_2d(np.asarray(present, dtype=bool))
    if times.shape != present.shape:
        raise ValueError("times and present arrays must have the same shape")
    return np.where(present, times, 0.0), present


def forward_batch(network: Network, times: np.ndarray, present: np.ndarray) -> BatchTrace:
    """Run every example of a ``(B, n_inputs)`` batch through the network."""
    t_in, present = _as_batch(times, present)
    if t_in.shape[1] != network.topology.n_inputs:
        raise ValueError(f"expected {network.topology.n_inputs} input channels, got {t_in.shape[1]}")
    if np.any(~np.isfinite(t_in)) or np.any(t_in < 0):
        raise ValueError("input event times must be finite and >= 0")
    cfg = network.config
    B = t_in.shape[0]
    layers = []
    for w in network.weights:
        N, J = w.shape
        st = LayerState(
            t_in=t_in,
            present_in=present,
            order=np.zeros((B, N), dtype=np.int64),
            n_present=np.zeros(B, dtype=np.int64),
            t_out=np.zeros((B, J)),
            fired=np.zeros((B, J), dtype=np.bool_),
            n_causal=np.zeros((B, J), dtype=np.int64),
            denom=np.zeros((B, J)),
        )
        _layer_forward(
            t_in, present, w, cfg.tau_syn, cfg.theta,
            st.order, st.n_present, st.t_out, st.fired, st.n_causal, st.denom,
        )
        layers.append(st)
        t_in, present = st.t_out, st.fired

    out = layers[-1]
    J = out.t_out.shape[1]
    # sort key puts quiescent neurons last, ties broken by neuron index
    key = np.where(out.fired, out.t_out, np.inf)
    emb_neuron = np.argsort(key, axis=1, kind="stable")
    emb_times = np.take_along_axis(key, emb_neuron, axis=1)
    emb_counts = out.fired.sum(axis=1).astype(np.int64)
    emb_times[~np.isfinite(emb_times)] = 0.0
    mask = np.arange(J)[None, :] >= emb_counts[:, None]
    emb_neuron = np.where(mask, -1, emb_neuron)
    return BatchTrace(network, layers, emb_times, emb_counts, emb_neuron)


def backward_batch(trace: BatchTrace, grad_emb: np.ndarray) -> list[np.ndarray]:
    """Weight gradients given ``dL/dt`` for every embedding event.

    ``grad_emb`` has the shape of ``trace.emb_times``; entries beyond
    ``emb_counts`` are ignored. Each event's gradient is routed to the output
    neuron that produced it, then through the causal edges of fired neurons.
    """
    grad_emb = np.asarray(grad_emb, dtype=np.float64)
    if grad_emb.shape != trace.emb_times.shape:
        raise ValueError(f"gradient shape {grad_emb.shape} does not match embedding {trace.emb_times.shape}")
    net = trace.network
    B, J = grad_emb.shape
    g_out = np.zeros((B, J))
    rows, cols = np.nonzero(trace.emb_neuron >= 0)
    g_out[rows, trace.emb_neuron[rows, cols]] = grad_emb[rows, cols]

    grads: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    for k in range(len(net.weights) - 1, -1, -1):
        st = trace.layers[k]
        w = net.weights[k]
        gW = np.zeros_like(w)
        g_in = np.zeros_like(st.t_in)
        _layer_backward(
            st.t_in, st.order, st.t_out, st.n_causal, st.denom, w,
            g_out, net.config.tau_syn, gW, g_in, k > 0,
        )
        grads[k] = gW
        g_out = g_in
    return grads


# ---------------------------------------------------------------------------
# single-example interface


@dataclass
class CausalSolution:
    """Outcome of one neuron's forward pass.

    ``causal`` holds the input indices of the causal set, in firing order.
    """

    fired: bool
    t_out: float | None
    causal: np.ndarray
    z_causal: np.ndarray
    w_causal: np.ndarray
    denominator: float | None
    n_inputs: int
    tau_syn: float = 1.0

    @property
    def z_out(self) -> float | None:
        return math.exp(self.t_out / self.tau_syn) if self.fired else None


def neuron_forward(z_inputs: Sequence, weights: Sequence[float], config: NeuronConfig = NeuronConfig()) -> CausalSolution:
    """Single neuron; ``z_inputs`` holds a z value per channel or ``None`` if absent."""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(z_inputs) != weights.size:
        raise ValueError("one weight per input channel required")
    present = np.array([z is not None for z in z_inputs], dtype=bool)
    z = np.array([1.0 if v is None else float(v) for v in z_inputs])
    if np.any(z[present] < 1.0):
        raise ValueError("z values must be >= 1")
    times = np.where(present, config.tau_syn * np.log(z), 0.0)
    net = Network(NetworkTopology((weights.size, 1)), config, [weights.reshape(-1, 1)])
    return forward_batch(net, times[None, :], present[None, :]).solution(0, 0)


def neuron_backward(sol: CausalSolution, dl_dzout: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dL/dw, dL/dz_in)`` over all input channels of one fired neuron."""
    if not sol.fired:
        raise ValueError("neuron_backward called on a quiescent neuron")
    dw = np.zeros(sol.n_inputs)
    dz = np.zeros(sol.n_inputs)
    if dl_dzout == 0:
        return dw, dz
    z_out = sol.z_out
    dw[sol.causal] = dl_dzout * (sol.z_causal - z_out) / sol.denominator
    dz[sol.causal] = dl_dzout * sol.w_causal / sol.denominator
    return dw, dz


def network_forward(x: ChannelEvents, network: Network) -> tuple[SpikeTrain, BatchTrace]:
    if len(x) != network.topology.n_inputs:
        raise ValueError(f"expected {network.topology.n_inputs} channels, got {len(x)}")
    trace = forward_batch(network, x.times[None, :], x.present[None, :])
    return trace.embedding(0), trace


def network_backward(trace: BatchTrace, dl_dembedding) -> list[np.ndarray]:
    """Weight gradients for a single-example trace and per-event ``dL/dt``."""
    if trace.batch_size != 1:
        raise ValueError("network_backward expects a single-example trace; use backward_batch")
    g = np.asarray(dl_dembedding, dtype=np.float64).reshape(-1)
    n = int(trace.emb_counts[0])
    if g.size != n:
        raise ValueError(f"expected {n} embedding gradients, got {g.size}")
    full = np.zeros_like(trace.emb_times)
    full[0, :n] = g
    return backward_batch(trace, full)
