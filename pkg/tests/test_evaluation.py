import numpy as np
import pytest
from hypothesis import given, strategies as st

from siamese_snn.emd import pack_trains
from siamese_snn.encoding import EncodedDataset
from siamese_snn.evaluation import (
    UNCLASSIFIABLE,
    EvalConfig,
    Embeddings,
    classify,
    embed,
    f1_report,
    knn_predict,
    knn_predict_packed,
    latency_curve,
    sparsity_from_fired,
    sparsity_report,
)
from siamese_snn.snn import Network, NetworkTopology, NeuronConfig, forward_batch
from siamese_snn.spiketrain import SpikeTrain


# -- k-NN --------------------------------------------------------------------


def test_exact_match_wins_with_k1():
    refs = [SpikeTrain([1.0, 2.0]), SpikeTrain([0.3]), SpikeTrain([4.0])]
    assert knn_predict(SpikeTrain([0.3]), refs, [5, 7, 9], k=1) == 7


def test_majority_of_three():
    refs = [SpikeTrain([1.0]), SpikeTrain([1.1]), SpikeTrain([5.0])]
    assert knn_predict(SpikeTrain([1.05]), refs, [0, 0, 1], k=3) == 0


def test_equidistant_references_tie_break():
    # every reference at distance 1; votes 3/3/1, the smaller label wins
    refs = [SpikeTrain([1.0])] * 3 + [SpikeTrain([3.0])] * 3 + [SpikeTrain([1.0])]
    labels = [4, 4, 4, 2, 2, 2, 8]
    assert knn_predict(SpikeTrain([2.0]), refs, labels, k=7) == 2


def test_vote_tie_goes_to_smaller_summed_distance():
    refs = [SpikeTrain([1.0]), SpikeTrain([1.2]), SpikeTrain([1.5]), SpikeTrain([1.6])]
    labels = [3, 1, 3, 1]
    # distances 0, .2, .5, .6: label 3 sums to .5, label 1 to .8
    assert knn_predict(SpikeTrain([1.0]), refs, labels, k=4) == 3


@given(st.integers(0, 2**31), st.integers(1, 9))
def test_knn_invariant_to_reference_order(seed, k):
    rng = np.random.default_rng(seed)
    refs = [np.sort(np.round(rng.uniform(0, 3, rng.integers(1, 5)), 1)) for _ in range(15)]
    labels = rng.integers(0, 4, 15)
    q = [np.sort(np.round(rng.uniform(0, 3, rng.integers(1, 5)), 1)) for _ in range(5)]
    rt, rc = pack_trains(refs)
    qt, qc = pack_trains(q)
    base = knn_predict_packed(qt, qc, rt, rc, labels, k)
    perm = rng.permutation(15)
    np.testing.assert_array_equal(base, knn_predict_packed(qt, qc, rt[perm], rc[perm], labels[perm], k))


def test_empty_query_is_unclassifiable():
    rt, rc = pack_trains([[1.0], [2.0]])
    qt, qc = np.zeros((1, 1)), np.zeros(1, dtype=np.int64)
    assert knn_predict_packed(qt, qc, rt, rc, [0, 1])[0] == UNCLASSIFIABLE


def test_k_must_be_positive():
    with pytest.raises(ValueError):
        EvalConfig(k=0)


# -- F1 ----------------------------------------------------------------------


def test_perfect_predictions():
    rep = f1_report([0, 1, 2, 1], [0, 1, 2, 1])
    assert rep["macro_f1"] == 1.0
    assert all(v["f1"] == 1.0 for v in rep["per_class"].values())


def test_all_wrong_single_class():
    # truth 0,0,1,1 ; everything predicted as 1
    rep = f1_report([1, 1, 1, 1], [0, 0, 1, 1])
    # class 0: P=0,R=0,F1=0 ; class 1: P=.5,R=1,F1=2/3
    assert rep["per_class"][0]["f1"] == 0.0
    assert rep["per_class"][1]["f1"] == pytest.approx(2 / 3)
    assert rep["macro_f1"] == pytest.approx(1 / 3)


def test_unclassifiable_counts_as_a_miss_only():
    rep = f1_report([UNCLASSIFIABLE, 1], [0, 1], classes=[0, 1])
    assert rep["per_class"][0]["recall"] == 0.0
    assert rep["per_class"][1]["precision"] == 1.0
    assert rep["unclassifiable"] == 1


def test_length_mismatch():
    with pytest.raises(ValueError):
        f1_report([0, 1], [0])


def _confusion_f1(pred, true, classes):
    cm = np.zeros((len(classes), len(classes) + 1), dtype=int)
    for p, t in zip(pred, true):
        col = classes.index(p) if p in classes else len(classes)
        cm[classes.index(t), col] += 1
    f1s = []
    for c in range(len(classes)):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c].sum() - tp
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return f1s


@given(st.lists(st.tuples(st.integers(-1, 4), st.integers(0, 4)), min_size=1, max_size=40))
def test_f1_matches_confusion_matrix(pairs):
    pred = [p for p, _ in pairs]
    true = [t for _, t in pairs]
    classes = list(range(5))
    rep = f1_report(pred, true, classes=classes)
    expect = _confusion_f1(pred, true, classes)
    for c in classes:
        assert rep["per_class"][c]["f1"] == pytest.approx(expect[c], abs=1e-15)
    assert rep["macro_f1"] == pytest.approx(np.mean(expect), abs=1e-15)


# -- sparsity ----------------------------------------------------------------


def _net(rng, sizes=(6, 5, 4, 3), gain=2.0):
    return Network.initialize(NetworkTopology(sizes), NeuronConfig(), rng, gain)


def test_everything_fires_gives_zero_qn():
    rep = sparsity_from_fired(np.ones((3, 800), bool), [0, 1, 2])
    assert rep.mean == 0.0 and rep.never_firing == 0


def test_all_absent_input_gives_qn_one(rng):
    net = _net(rng)
    data = EncodedDataset(np.zeros((2, 6)), np.zeros((2, 6), bool), [0, 1])
    rep = sparsity_report(net, data)
    np.testing.assert_array_equal(rep.qn, [1.0, 1.0])
    assert rep.never_firing == 9


def test_qn_equals_one_minus_fired_fraction(rng):
    net = Network.initialize(NetworkTopology((784, 400, 400, 10)), rng=rng)
    times = rng.choice([0.0, 1.79], size=(4, 784))
    present = rng.random((4, 784)) > 0.6
    data = EncodedDataset(times, present, np.arange(4))
    rep = sparsity_report(net, data)
    tr = forward_batch(net, times, present)
    fired = tr.layers[0].fired.sum(axis=1) + tr.layers[1].fired.sum(axis=1)
    np.testing.assert_array_equal(rep.qn, 1 - fired / 800)
    assert rep.hist_counts.sum() == 4


# -- latency -----------------------------------------------------------------


def test_latency_final_value_matches_static_classifier(rng):
    net = _net(rng, sizes=(5, 6, 4))
    times = rng.uniform(0, 2, (30, 5))
    present = np.ones_like(times, bool)
    labels = np.arange(30) % 3
    train = EncodedDataset(times[:20], present[:20], labels[:20])
    test = EncodedDataset(times[20:], present[20:], labels[20:])
    cfg = EvalConfig(k=3)
    ref = embed(net, train)
    query = embed(net, test)
    pred, rep = classify(net, train, test, cfg, ref=ref, query=query)
    curve = latency_curve(net, test, ref, cfg, query=query)
    keep = query.counts > 0
    sizes = np.bincount(labels[20:][keep], minlength=3)
    correct = np.bincount(labels[20:][keep][pred[keep] == labels[20:][keep]], minlength=3)
    static = np.mean(correct[sizes > 0] / sizes[sizes > 0])
    assert curve.final_accuracy == static
    assert curve.accuracy[-1] == static
    assert np.all(np.diff(curve.event_fraction) >= 0)
    assert curve.event_fraction[-1] == 1.0
    assert curve.accuracy[np.searchsorted(curve.times, curve.steady_state_time)] >= curve.final_accuracy


def test_single_event_queries_step_at_their_event():
    ref = Embeddings(*pack_trains([[0.5], [3.0]]), np.array([0, 1]))
    qt, qc = pack_trains([[0.6], [2.0]])
    query = Embeddings(qt, qc, np.array([0, 1]))
    curve = latency_curve(None, None, ref, EvalConfig(k=1), query=query)
    np.testing.assert_array_equal(curve.times, [0.6, 2.0])
    np.testing.assert_array_equal(curve.accuracy, [0.5, 1.0])
    assert curve.steady_state_time == 2.0


def test_latency_excludes_empty_queries():
    ref = Embeddings(*pack_trains([[0.5], [3.0]]), np.array([0, 1]))
    query = Embeddings(np.zeros((2, 1)), np.array([1, 0]), np.array([0, 1]))
    query.times[0, 0] = 0.4
    curve = latency_curve(None, None, ref, EvalConfig(k=1), query=query)
    assert curve.excluded == 1
