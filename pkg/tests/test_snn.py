import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from siamese_snn.emd import emd
from siamese_snn.oracles import causal_signature, finite_difference, simulate_network_ode, simulate_neuron_ode
from siamese_snn.snn import (
    CheckpointError,
    Network,
    NetworkTopology,
    NeuronConfig,
    forward_batch,
    network_backward,
    network_forward,
    neuron_backward,
    neuron_forward,
)
from siamese_snn.spiketrain import ChannelEvents, SpikeTrain


# -- single neuron -----------------------------------------------------------


def test_single_input_fires_at_ln2():
    sol = neuron_forward([1.0], [2.0])
    assert sol.fired
    assert sol.z_out == pytest.approx(2.0, rel=1e-14)
    assert sol.t_out == pytest.approx(math.log(2.0), rel=1e-14)
    assert sol.denominator == pytest.approx(1.0)
    assert sol.t_out == pytest.approx(simulate_neuron_ode([0.0], [True], [2.0]), abs=1e-6)


def test_weak_input_is_quiescent():
    sol = neuron_forward([1.0], [0.5])
    assert not sol.fired and sol.t_out is None and sol.z_out is None
    assert simulate_neuron_ode([0.0], [True], [0.5]) is None


def test_simultaneous_inputs():
    sol = neuron_forward([1.0, 1.0], [0.6, 0.6])
    assert sorted(sol.causal.tolist()) == [0, 1]
    assert sol.z_out == pytest.approx(6.0, rel=1e-12)
    assert sol.t_out == pytest.approx(simulate_neuron_ode([0.0, 0.0], [True, True], [0.6, 0.6]), abs=1e-6)


def test_absent_inputs_never_join_causal_set():
    sol = neuron_forward([None, 1.0, None], [100.0, 2.0, 100.0])
    assert sol.causal.tolist() == [1]
    assert sol.z_out == pytest.approx(2.0)


def test_neuron_backward_example():
    sol = neuron_forward([1.0], [2.0])
    dw, dz = neuron_backward(sol, 1.0)
    assert dw[0] == pytest.approx(-1.0)
    assert dz[0] == pytest.approx(2.0)


def test_neuron_backward_matches_finite_differences():
    h = 1e-7
    z0, w0 = 1.5, 2.0

    def z_out(z, w):
        return neuron_forward([z], [w]).z_out

    fd_w = (z_out(z0, w0 + h) - z_out(z0, w0 - h)) / (2 * h)
    fd_z = (z_out(z0 + h, w0) - z_out(z0 - h, w0)) / (2 * h)
    dw, dz = neuron_backward(neuron_forward([z0], [w0]), 1.0)
    assert dw[0] == pytest.approx(fd_w, abs=1e-6)
    assert dz[0] == pytest.approx(fd_z, abs=1e-6)


def test_non_causal_input_has_zero_gradient():
    # the second input arrives long after the neuron fired
    sol = neuron_forward([1.0, math.exp(5.0)], [2.0, 1.0])
    assert sol.causal.tolist() == [0]
    dw, dz = neuron_backward(sol, 0.7)
    assert dw[1] == 0.0 and dz[1] == 0.0


def test_zero_upstream_gradient():
    dw, dz = neuron_backward(neuron_forward([1.0, 1.2], [1.0, 1.0]), 0.0)
    assert not dw.any() and not dz.any()


def test_backward_on_quiescent_neuron_is_an_error():
    with pytest.raises(ValueError):
        neuron_backward(neuron_forward([1.0], [0.5]), 1.0)


def test_inhibitory_input_can_delay_or_block():
    fast = neuron_forward([1.0], [2.0])
    slowed = neuron_forward([1.0, 1.1], [2.0, -0.5])
    assert slowed.t_out > fast.t_out or not slowed.fired


# -- causal-set properties ---------------------------------------------------


@st.composite
def neuron_case(draw):
    n = draw(st.integers(1, 8))
    t = draw(st.lists(st.floats(0, 3), min_size=n, max_size=n))
    present = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    w = draw(st.lists(st.floats(-1.5, 2.5), min_size=n, max_size=n))
    return np.array(t), np.array(present), np.array(w)


def _one_neuron(t, present, w):
    net = Network(NetworkTopology((t.size, 1)), NeuronConfig(), [w.reshape(-1, 1)])
    return forward_batch(net, t[None], present[None]).solution(0, 0)


@given(neuron_case())
def test_causal_set_is_exactly_the_earlier_inputs(case):
    t, present, w = case
    sol = _one_neuron(t, present, w)
    if not sol.fired:
        return
    assert sol.denominator > 0
    earlier = {i for i in np.flatnonzero(present) if t[i] < sol.t_out}
    # events at exactly t_out may sit on either side of the boundary
    at_boundary = {i for i in np.flatnonzero(present) if t[i] == sol.t_out}
    causal = set(sol.causal.tolist())
    assert earlier <= causal <= earlier | at_boundary


@given(neuron_case(), st.floats(0.01, 0.5))
def test_larger_causal_weight_does_not_delay(case, dw):
    t, present, w = case
    sol = _one_neuron(t, present, w)
    if not sol.fired:
        return
    i = int(sol.causal[0])
    w2 = w.copy()
    w2[i] += dw
    sol2 = _one_neuron(t, present, w2)
    if sol2.fired and set(sol2.causal.tolist()) == set(sol.causal.tolist()):
        assert sol2.t_out <= sol.t_out + 1e-12


@given(neuron_case())
def test_single_neuron_matches_ode(case):
    t, present, w = case
    sol = _one_neuron(t, present, w)
    ref = simulate_neuron_ode(t, present, w)
    assert sol.fired == (ref is not None)
    if sol.fired:
        assert abs(sol.t_out - ref) < 1e-6


# -- networks ----------------------------------------------------------------


def test_all_absent_input_gives_empty_embedding():
    net = Network.initialize(NetworkTopology((5, 4, 3)), rng=0)
    emb, trace = network_forward(ChannelEvents.absent(5), net)
    assert emb.is_empty
    assert not any(layer.fired.any() for layer in trace.layers)


def test_one_to_one_net_reproduces_single_neuron():
    net = Network(NetworkTopology((1, 1)), NeuronConfig(), [np.array([[2.0]])])
    emb, _ = network_forward(ChannelEvents.from_optional([0.0]), net)
    assert emb == SpikeTrain([math.log(2.0)])


def test_random_net_matches_ode(rng):
    for _ in range(10):
        net = Network.initialize(NetworkTopology((4, 3, 2)), rng=rng)
        t = rng.uniform(0, 2, 4)
        p = rng.random(4) > 0.2
        tr = forward_batch(net, t[None], p[None])
        ref = simulate_network_ode(net, t, p)
        for st_, (t_ref, f_ref) in zip(tr.layers, ref):
            np.testing.assert_array_equal(st_.fired[0], f_ref)
            np.testing.assert_allclose(st_.t_out[0][f_ref], t_ref[f_ref], atol=1e-6)


def test_embedding_is_sorted_and_tracks_neurons(rng):
    net = Network.initialize(NetworkTopology((6, 5, 4)), rng=rng)
    t = rng.uniform(0, 2, (8, 6))
    tr = forward_batch(net, t, np.ones_like(t, dtype=bool))
    out = tr.layers[-1]
    for b in range(8):
        emb = tr.embedding(b)
        assert len(emb) == out.fired[b].sum()
        assert np.all(np.diff(emb.times) >= 0)
        neurons = tr.emb_neuron[b, : len(emb)]
        np.testing.assert_array_equal(out.t_out[b, neurons], emb.times)


def test_batch_equals_single_examples(rng):
    net = Network.initialize(NetworkTopology((6, 5, 4)), rng=rng)
    t = rng.uniform(0, 2, (5, 6))
    p = rng.random((5, 6)) > 0.3
    tr = forward_batch(net, t, p)
    for b in range(5):
        emb, _ = network_forward(ChannelEvents(t[b], p[b]), net)
        assert emb == tr.embedding(b)


def test_chain_gradient_matches_finite_differences():
    net = Network(NetworkTopology((1, 1, 1)), NeuronConfig(), [np.array([[2.0]]), np.array([[3.0]])])
    x = ChannelEvents.from_optional([0.2])

    def loss(n):
        emb, _ = network_forward(x, n)
        return emb.times[0]

    _, trace = network_forward(x, net)
    grads = network_backward(trace, [1.0])
    fd = finite_difference(loss, net, h=1e-6)
    for (k, i, j), v in fd.items():
        assert grads[k][i, j] == pytest.approx(v, rel=1e-5)


def test_emd_loss_gradient_matches_finite_differences(rng):
    checked = 0
    for _ in range(20):
        net = Network.initialize(NetworkTopology((4, 3, 2)), rng=rng, gain=2.0)
        x = ChannelEvents(rng.uniform(0, 2, 4), np.ones(4, dtype=bool))
        target = SpikeTrain([0.9, 1.7])
        emb, trace = network_forward(x, net)
        if emb.is_empty:
            continue

        def loss(n):
            return emd(network_forward(x, n)[0], target).distance

        grads = network_backward(trace, emd(emb, target).grad_f)
        sig = causal_signature(net, x.times[None], x.present[None])
        h = 1e-6
        for k, w in enumerate(net.weights):
            for i in range(w.shape[0]):
                for j in range(w.shape[1]):
                    stable = True
                    for s in (h, -h):
                        w[i, j] += s
                        stable &= causal_signature(net, x.times[None], x.present[None]) == sig
                        w[i, j] -= s
                    if not stable:
                        continue
                    fd = finite_difference(loss, net, h, [(k, i, j)])[(k, i, j)]
                    assert abs(grads[k][i, j] - fd) <= 1e-4 * max(abs(fd), 1e-3)
                    checked += 1
    assert checked > 50


def test_zero_upstream_network_gradient(rng):
    net = Network.initialize(NetworkTopology((4, 3, 2)), rng=rng, gain=3.0)
    x = ChannelEvents(rng.uniform(0, 1, 4), np.ones(4, dtype=bool))
    emb, trace = network_forward(x, net)
    grads = network_backward(trace, np.zeros(len(emb)))
    assert all(not g.any() for g in grads)


def test_network_backward_shape_mismatch(rng):
    net = Network.initialize(NetworkTopology((4, 3, 2)), rng=rng, gain=3.0)
    x = ChannelEvents(np.zeros(4), np.ones(4, dtype=bool))
    emb, trace = network_forward(x, net)
    with pytest.raises(ValueError):
        network_backward(trace, np.zeros(len(emb) + 1))


def test_late_events_do_not_overflow():
    # grayscale can put events hundreds of ms out; z = exp(255) must not be formed naively
    net = Network(NetworkTopology((2, 1)), NeuronConfig(), [np.array([[1.5], [1.5]])])
    emb, trace = network_forward(ChannelEvents.from_optional([250.0, 255.0]), net)
    assert len(emb) == 1
    assert emb.times[0] == pytest.approx(250.0 + math.log(3.0), rel=1e-12)
    grads = network_backward(trace, [1.0])
    assert np.all(np.isfinite(grads[0]))


# -- topology, init and checkpoints ------------------------------------------


def test_topology_validation():
    with pytest.raises(ValueError):
        NetworkTopology((784,))
    with pytest.raises(ValueError):
        NetworkTopology((3, 0, 2))
    topo = NetworkTopology()
    assert topo.n_neurons == 810 and topo.n_hidden == 800


def test_neuron_config_validation():
    with pytest.raises(ValueError):
        NeuronConfig(tau_syn=0)
    with pytest.raises(ValueError):
        NeuronConfig(v_thr=-1)
    with pytest.raises(ValueError):
        NeuronConfig(v0=0.1)
    assert NeuronConfig(tau_syn=2.0, v_thr=1.0).theta == 0.5


def test_network_rejects_bad_weights():
    topo = NetworkTopology((2, 1))
    with pytest.raises(ValueError):
        Network(topo, NeuronConfig(), [np.zeros((3, 1))])
    with pytest.raises(ValueError):
        Network(topo, NeuronConfig(), [np.array([[np.nan], [0.0]])])


def test_initialization_statistics():
    net = Network.initialize(NetworkTopology((784, 400, 10)), rng=0)
    w = net.weights[0]
    assert w.mean() == pytest.approx(4.0 / 784, abs=3 / 784)
    assert w.std() == pytest.approx(1 / 28, rel=0.02)


def test_checkpoint_round_trip(tmp_path, rng):
    net = Network.initialize(NetworkTopology((5, 4, 3)), NeuronConfig(tau_syn=1.5, v_thr=0.8), rng=rng)
    path = tmp_path / "net.npz"
    net.save(path)
    back = Network.load(path)
    assert back.topology == net.topology and back.config == net.config
    for a, b in zip(net.weights, back.weights):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        Network.load(tmp_path / "missing.npz")
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        Network.load(junk)
    other = tmp_path / "other.npz"
    np.savez(other, meta=np.array('{"format": "something-else"}'))
    with pytest.raises(CheckpointError):
        Network.load(other)
