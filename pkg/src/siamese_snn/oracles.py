"""Independent reference computations used to check the fast paths.

* ``simulate_network_ode`` integrates the membrane equations numerically
  (RK4 between input events, bisection on threshold crossings). It never uses
  the closed-form spike time or the causal set.
* ``emd_interval_oracle`` and ``emd_grid_oracle`` evaluate the EMD integral
  from CDFs built with ``searchsorted``, without a merge pass.
* ``finite_difference`` perturbs weights and re-runs the forward pass.

``run_suite`` bundles these into the named suites exposed by the CLI.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .emd import emd
from .snn import Network, NetworkTopology, NeuronConfig, forward_batch
from .training import TrainingConfig, batch_loss

SUITES = ("emd-grid", "snn-ode", "gradients")


# ---------------------------------------------------------------------------
# ODE simulation


@numba.njit(cache=True)
def _rk4(v, cur, dt, tau):
    # dV/dt = I, dI/dt = -I / tau
    k1v = cur
    k1i = -cur / tau
    k2v = cur + 0.5 * dt * k1i
    k2i = -(cur + 0.5 * dt * k1i) / tau
    k3v = cur + 0.5 * dt * k2i
    k3i = -(cur + 0.5 * dt * k2i) / tau
    k4v = cur + dt * k3i
    k4i = -(cur + dt * k3i) / tau
    v_new = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    i_new = cur + dt / 6.0 * (k1i + 2 * k2i + 2 * k3i + k4i)
    return v_new, i_new


@numba.njit(cache=True)
def _simulate_neuron(ts, ws, tau, v_thr, h, tail):
    """First upward threshold crossing of one neuron, or -1 if none.

    ``ts`` sorted input times with weights ``ws``. Integrates until ``tail``
    time constants after the last input; the synaptic current is then below
    ``exp(-tail)`` of its peak and cannot move the voltage measurably.
    """
    n = ts.size
    if n == 0:
        return -1.0
    v = 0.0
    cur = 0.0
    t = ts[0]
    k = 0
    t_end = ts[n - 1] + tail * tau
    while True:
        while k < n and ts[k] == t:
            cur += ws[k]
            k += 1
        t_next = ts[k] if k < n else t_end
        span = t_next - t
        steps = max(1, int(math.ceil(span / h)))
        dt = span / steps
        for _ in range(steps):
            v1, c1 = _rk4(v, cur, dt, tau)
            if v1 >= v_thr:
                lo = 0.0
                hi = dt
                for _ in range(80):
                    mid = 0.5 * (lo + hi)
                    vm, _c = _rk4(v, cur, mid, tau)
                    if vm >= v_thr:
                        hi = mid
                    else:
                        lo = mid
                return t + 0.5 * (lo + hi)
            v, cur = v1, c1
            t += dt
        t = t_next
        if k >= n:
            return -1.0


def simulate_neuron_ode(times, present, weights, config: NeuronConfig = NeuronConfig(), h: float = 1e-3, tail: float = 40.0):
    """Spike time of a single neuron by numerical integration (``None`` if silent)."""
    times = np.asarray(times, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    weights = np.asarray(weights, dtype=np.float64)
    order = np.argsort(np.where(present, times, np.inf), kind="stable")[: int(present.sum())]
    t = _simulate_neuron(times[order], weights[order], config.tau_syn, config.v_thr, h, tail)
    return None if t < 0 else float(t)


def simulate_network_ode(network: Network, times, present, h: float = 1e-3, tail: float = 40.0):
    """Per-layer ``(t_out, fired)`` arrays for one example."""
    t_in = np.asarray(times, dtype=np.float64)
    p_in = np.asarray(present, dtype=bool)
    cfg = network.config
    layers = []
    for w in network.weights:
        J = w.shape[1]
        t_out = np.zeros(J)
        fired = np.zeros(J, dtype=bool)
        order = np.argsort(np.where(p_in, t_in, np.inf), kind="stable")[: int(p_in.sum())]
        ts = t_in[order]
        for j in range(J):
            t = _simulate_neuron(ts, w[order, j].copy(), cfg.tau_syn, cfg.v_thr, h, tail)
            if t >= 0:
                t_out[j] = t
                fired[j] = True
        layers.append((t_out, fired))
        t_in, p_in = t_out, fired
    return layers


# ---------------------------------------------------------------------------
# EMD oracles


def _cdf(times: np.ndarray, at: np.ndarray) -> np.ndarray:
    return np.searchsorted(times, at, side="right") / times.size


def emd_interval_oracle(f, g) -> float:
    """Exact integral: sum of ``|F - G|`` times the length of each interval between breakpoints."""
    f = np.sort(np.asarray(f, dtype=np.float64))
    g = np.sort(np.asarray(g, dtype=np.float64))
    knots = np.unique(np.concatenate([f, g]))
    if knots.size < 2:
        return 0.0
    left = knots[:-1]
    return float(np.sum(np.abs(_cdf(f, left) - _cdf(g, left)) * np.diff(knots)))


def emd_grid_oracle(f, g, step: float = 1e-4) -> float:
    """Midpoint rule on a uniform grid covering both trains."""
    f = np.sort(np.asarray(f, dtype=np.float64))
    g = np.sort(np.asarray(g, dtype=np.float64))
    lo = min(f[0], g[0])
    hi = max(f[-1], g[-1])
    n = max(1, int(math.ceil((hi - lo) / step)))
    mids = lo + (np.arange(n) + 0.5) * ((hi - lo) / n)
    return float(np.sum(np.abs(_cdf(f, mids) - _cdf(g, mids))) * ((hi - lo) / n))


# ---------------------------------------------------------------------------
# finite differences


def causal_signature(network: Network, times, present) -> tuple:
    """Fired flags and causal sets of every neuron, for detecting boundary crossings."""
    tr = forward_batch(network, times, present)
    sig = []
    for st in tr.layers:
        for b in range(st.fired.shape[0]):
            for j in range(st.fired.shape[1]):
                k = int(st.n_causal[b, j])
                sig.append(frozenset(st.order[b, :k].tolist()) if k else None)
    return tuple(sig)


def finite_difference(loss_fn, network: Network, h: float = 1e-6, entries=None):
    """Central differences of ``loss_fn(network)`` for selected weight entries.

    ``entries`` is a list of ``(layer, i, j)``; all weights when omitted.
    Returns a dict keyed by entry.
    """
    if entries is None:
        entries = [(k, i, j) for k, w in enumerate(network.weights) for i in range(w.shape[0]) for j in range(w.shape[1])]
    out = {}
    for k, i, j in entries:
        w = network.weights[k]
        orig = w[i, j]
        w[i, j] = orig + h
        up = loss_fn(network)
        w[i, j] = orig - h
        down = loss_fn(network)
        w[i, j] = orig
        out[(k, i, j)] = (up - down) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# suites


@dataclass
class CaseResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    detail: str = ""


@dataclass
class SuiteReport:
    suite: str
    cases: list[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.cases) and all(c.passed for c in self.cases)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "seconds": self.seconds,
            "cases": [c.__dict__ for c in self.cases],
        }


def random_train(rng: np.random.Generator, max_len: int = 20, hi: float = 10.0) -> np.ndarray:
    return np.sort(rng.uniform(0, hi, rng.integers(1, max_len + 1)))


def emd_grid_suite(n_pairs: int = 1000, seed: int = 0) -> SuiteReport:
    """Each pair must match the interval sum within 1e-9 and the dense grid within 1e-3."""
    rng = np.random.default_rng(seed)
    rep = SuiteReport("emd-grid")
    for k in range(n_pairs):
        f, g = random_train(rng), random_train(rng)
        d = emd(f, g).distance
        exact = abs(d - emd_interval_oracle(f, g))
        grid = abs(d - emd_grid_oracle(f, g))
        ok = bool(exact <= 1e-9 and grid <= 1e-3)
        # error is reported relative to the tighter of the two bounds
        rep.cases.append(CaseResult(f"pair-{k}", ok, max(exact / 1e-9, grid / 1e-3), 1.0,
                                    f"interval {exact:.2e}, grid {grid:.2e}, |f|={f.size}, |g|={g.size}"))
    return rep


def random_small_network(rng: np.random.Generator, max_sizes=(6, 5, 4)) -> Network:
    sizes = tuple(int(rng.integers(1, m + 1)) for m in max_sizes)
    cfg = NeuronConfig()
    weights = [rng.normal(1.5 / a, 1.0, size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    return Network(NetworkTopology(sizes), cfg, weights)


def random_inputs(rng: np.random.Generator, n: int, p_absent: float = 0.25, hi: float = 3.0):
    present = rng.random(n) >= p_absent
    times = np.where(present, rng.uniform(0, hi, n), 0.0)
    return times, present


def snn_ode_suite(n_nets: int = 200, seed: int = 0, tol: float = 1e-6) -> SuiteReport:
    """Each network must agree with the ODE on every fired flag and every spike time."""
    rng = np.random.default_rng(seed)
    rep = SuiteReport("snn-ode")
    for k in range(n_nets):
        net = random_small_network(rng)
        times, present = random_inputs(rng, net.topology.n_inputs)
        tr = forward_batch(net, times, present)
        ode = simulate_network_ode(net, times, present)
        worst = 0.0
        mismatches = spikes = 0
        for st, (t_ode, f_ode) in zip(tr.layers, ode):
            fired = st.fired[0]
            mismatches += int(np.sum(fired != f_ode))
            both = fired & f_ode
            spikes += int(both.sum())
            if both.any():
                worst = max(worst, float(np.max(np.abs(st.t_out[0][both] - t_ode[both]))))
        rep.cases.append(CaseResult(f"net-{k}", bool(worst <= tol and mismatches == 0), worst, tol,
                                    f"sizes {net.topology.sizes}, {spikes} spikes, {mismatches} status mismatches"))
    return rep


def gradient_case(rng: np.random.Generator, sizes=(4, 3, 2), batch: int = 6, h: float = 1e-6):
    """One random batch-loss gradient check.

    Returns ``(max_relative_error, n_checked)`` or ``None`` when the case is
    unusable (no active triplet or every entry sits on a causal boundary).
    """
    cfg = TrainingConfig(sizes=sizes, K=float(rng.uniform(0, 2)), l2=float(rng.uniform(0, 0.1)), alpha=float(rng.uniform(0.1, 2.0)))
    topo = NetworkTopology(sizes)
    net = Network(topo, NeuronConfig(), [rng.normal(2.5 / a, 1.0, size=(a, b)) for a, b in topo.weight_shapes()])
    times = rng.uniform(0, 2, size=(batch, sizes[0]))
    present = rng.random((batch, sizes[0])) > 0.2
    labels = np.arange(batch) % 2

    res = batch_loss(net, times, present, labels, cfg)
    if res.stats.n_active == 0 or res.stats.empty_embeddings:
        return None
    base_sig = causal_signature(net, times, present)

    def loss(n):
        return batch_loss(n, times, present, labels, cfg, want_grad=False).stats.total_loss

    worst = 0.0
    checked = 0
    for k, w in enumerate(net.weights):
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                orig = w[i, j]
                sigs = []
                for delta in (h, -h):
                    w[i, j] = orig + delta
                    sigs.append(causal_signature(net, times, present))
                w[i, j] = orig
                if any(s != base_sig for s in sigs):
                    continue
                # skip entries where a triplet hinge or regularizer hinge flips
                fd = finite_difference(loss, net, h, [(k, i, j)])[(k, i, j)]
                if _hinge_flip(net, k, i, j, h, times, present, labels, cfg):
                    continue
                an = res.grads[k][i, j]
                err = abs(an - fd) / max(abs(fd), abs(an), 1e-3)
                worst = max(worst, err)
                checked += 1
    return (worst, checked) if checked else None


def _hinge_flip(net, k, i, j, h, times, present, labels, cfg) -> bool:
    w = net.weights[k]
    orig = w[i, j]
    states = []
    for delta in (h, 0.0, -h):
        w[i, j] = orig + delta
        r = batch_loss(net, times, present, labels, cfg, want_grad=False)
        margin = cfg.alpha + r.dist[:, :, None] - r.dist[:, None, :]
        reg_active = tuple((net.config.theta - x.sum(axis=0) > 0).tolist() for x in net.weights)
        states.append(((margin > 0).tobytes(), str(reg_active), _event_order_key(r.trace)))
    w[i, j] = orig
    return not (states[0] == states[1] == states[2])


def _event_order_key(trace) -> bytes:
    return trace.emb_neuron.tobytes()


def gradient_suite(n_cases: int = 50, seed: int = 0, tol: float = 1e-4) -> SuiteReport:
    rng = np.random.default_rng(seed)
    rep = SuiteReport("gradients")
    done = 0
    attempts = 0
    while done < n_cases and attempts < 20 * n_cases:
        attempts += 1
        sizes = (int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 4)))
        out = gradient_case(rng, sizes=sizes)
        if out is None:
            continue
        worst, checked = out
        rep.cases.append(CaseResult(f"case-{done}", bool(worst <= tol), worst, tol, f"sizes {sizes}, {checked} weights"))
        done += 1
    return rep


def run_suite(name: str, seed: int = 0) -> SuiteReport:
    if name not in SUITES:
        raise ValueError(f"unknown oracle suite {name!r}; valid suites: {', '.join(SUITES)}")
    t0 = time.perf_counter()
    rep = {"emd-grid": emd_grid_suite, "snn-ode": snn_ode_suite, "gradients": gradient_suite}[name](seed=seed)
    rep.seconds = time.perf_counter() - t0
    return rep
