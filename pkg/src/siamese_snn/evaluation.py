"""Embedding quality, sparsity and latency analysis.

k-NN classification uses EMD between a query embedding and the training-set
embeddings. Of the ``k`` nearest references (ties on distance broken by the
smaller label), the most frequent label wins; a tie in votes goes to the label
with the smaller summed distance, then to the smaller label. None of these
rules depend on the order of the references.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .emd import _emd_pass, pack_trains
from .encoding import EncodedDataset
from .snn import Network, forward_batch

UNCLASSIFIABLE = -1

TRUNCATION_NOTE = (
    "a truncated query train is normalized by its own observed event count "
    "(its CDF reaches 1 at the last observed event)"
)
STEADY_STATE_NOTE = "steady state = earliest time at which class-averaged accuracy first reaches its final value"


@dataclass(frozen=True)
class EvalConfig:
    k: int = 7
    batch_size: int = 512
    hist_bins: int = 20

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@numba.njit(cache=True, nogil=True)
def _vote(best_d, best_l, n_classes):
    counts = np.zeros(n_classes, dtype=np.int64)
    sums = np.zeros(n_classes)
    for m in range(best_d.size):
        lab = best_l[m]
        if lab < 0:
            continue
        counts[lab] += 1
        sums[lab] += best_d[m]
    win = -1
    for c in range(n_classes):
        if counts[c] == 0:
            continue
        if win < 0 or counts[c] > counts[win] or (counts[c] == counts[win] and sums[c] < sums[win]):
            win = c
    return win


@numba.njit(cache=True, parallel=True)
def _knn_kernel(q_times, q_counts, r_times, r_counts, r_labels, k, n_classes, out):
    nq = q_times.shape[0]
    nr = r_times.shape[0]
    for a in numba.prange(nq):
        if q_counts[a] == 0:
            out[a] = -1
            continue
        fa = q_times[a, : q_counts[a]]
        dummy = np.empty(0)
        best_d = np.full(k, np.inf)
        best_l = np.full(k, -1, dtype=np.int64)
        for b in range(nr):
            d = _emd_pass(fa, r_times[b, : r_counts[b]], dummy, dummy, False)
            lab = r_labels[b]
            last = k - 1
            if d > best_d[last] or (d == best_d[last] and lab >= best_l[last] and best_l[last] >= 0):
                continue
            # insertion keeps (distance, label) ascending
            pos = last
            while pos > 0 and (best_d[pos - 1] > d or (best_d[pos - 1] == d and best_l[pos - 1] > lab)):
                best_d[pos] = best_d[pos - 1]
                best_l[pos] = best_l[pos - 1]
                pos -= 1
            best_d[pos] = d
            best_l[pos] = lab
        out[a] = _vote(best_d, best_l, n_classes)


def knn_predict_packed(q_times, q_counts, r_times, r_counts, r_labels, k: int = 7, n_classes: int | None = None) -> np.ndarray:
    """Predicted label for every packed query; empty queries get ``UNCLASSIFIABLE``."""
    r_labels = np.asarray(r_labels, dtype=np.int64)
    keep = np.asarray(r_counts) > 0
    r_times, r_counts, r_labels = r_times[keep], np.asarray(r_counts)[keep], r_labels[keep]
    if r_labels.size == 0:
        raise ValueError("no nonempty reference embeddings")
    if n_classes is None:
        n_classes = int(r_labels.max()) + 1
    out = np.empty(q_times.shape[0], dtype=np.int64)
    _knn_kernel(
        np.ascontiguousarray(q_times, dtype=np.float64),
        np.asarray(q_counts, dtype=np.int64),
        np.ascontiguousarray(r_times, dtype=np.float64),
        r_counts.astype(np.int64),
        r_labels,
        min(k, r_labels.size),
        n_classes,
        out,
    )
    return out


def knn_predict(query, references: Sequence, labels: Sequence[int], k: int = 7) -> int:
    """Label of one query train by majority vote over its ``k`` EMD-nearest references."""
    if len(references) == 0:
        raise ValueError("no reference embeddings")
    r_times, r_counts = pack_trains(references)
    q_times, q_counts = pack_trains([query])
    return int(knn_predict_packed(q_times, q_counts, r_times, r_counts, labels, k)[0])


# ---------------------------------------------------------------------------
# F1


def f1_report(predictions, truths, classes=None) -> dict:
    """Per-class precision, recall and F1 plus their macro average.

    An unclassifiable prediction (``-1``) is a miss for its true class and a
    false positive for none.
    """
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} truths")
    if classes is None:
        classes = np.unique(true)
    per_class = {}
    for c in classes:
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[int(c)] = {"precision": precision, "recall": recall, "f1": f1, "support": tp + fn}
    macro = float(np.mean([v["f1"] for v in per_class.values()])) if per_class else 0.0
    return {
        "macro_f1": macro,
        "accuracy": float(np.mean(pred == true)) if true.size else 0.0,
        "unclassifiable": int(np.sum(pred == UNCLASSIFIABLE)),
        "per_class": per_class,
    }


# ---------------------------------------------------------------------------
# embeddings in bulk


@dataclass
class Embeddings:
    times: np.ndarray
    counts: np.ndarray
    labels: np.ndarray
    hidden_fired: np.ndarray | None = None


def embed(network: Network, data: EncodedDataset, batch_size: int = 512, keep_hidden: bool = False) -> Embeddings:
    parts_t, parts_c, parts_h = [], [], []
    for lo in range(0, len(data), batch_size):
        tr = forward_batch(network, data.times[lo : lo + batch_size], data.present[lo : lo + batch_size])
        parts_t.append(tr.emb_times)
        parts_c.append(tr.emb_counts)
        if keep_hidden:
            parts_h.append(tr.hidden_fired())
    width = network.topology.n_outputs
    times = np.concatenate(parts_t) if parts_t else np.zeros((0, width))
    counts = np.concatenate(parts_c) if parts_c else np.zeros(0, dtype=np.int64)
    hidden = np.concatenate(parts_h) if keep_hidden and parts_h else None
    return Embeddings(times, counts, data.labels, hidden)


def classify(network: Network, train: EncodedDataset, test: EncodedDataset, cfg: EvalConfig = EvalConfig(),
             ref: Embeddings | None = None, query: Embeddings | None = None) -> tuple[np.ndarray, dict]:
    ref = ref if ref is not None else embed(network, train, cfg.batch_size)
    query = query if query is not None else embed(network, test, cfg.batch_size)
    n_classes = int(max(ref.labels.max(), query.labels.max())) + 1
    pred = knn_predict_packed(query.times, query.counts, ref.times, ref.counts, ref.labels, cfg.k, n_classes)
    return pred, f1_report(pred, query.labels, classes=np.arange(n_classes))


# ---------------------------------------------------------------------------
# sparsity


@dataclass
class SparsityReport:
    qn: np.ndarray  # per-example fraction of quiescent hidden neurons
    labels: np.ndarray
    mean: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    never_firing: int  # hidden neurons silent on every example
    n_hidden: int

    def to_dict(self) -> dict:
        return {
            "mean_qn": self.mean,
            "never_firing": self.never_firing,
            "n_hidden": self.n_hidden,
            "histogram": {"edges": self.hist_edges.tolist(), "counts": self.hist_counts.tolist()},
        }


def sparsity_from_fired(hidden_fired: np.ndarray, labels, bins: int = 20) -> SparsityReport:
    hidden_fired = np.asarray(hidden_fired, dtype=bool)
    n_hidden = hidden_fired.shape[1]
    qn = 1.0 - hidden_fired.sum(axis=1) / n_hidden if n_hidden else np.zeros(hidden_fired.shape[0])
    counts, edges = np.histogram(qn, bins=bins, range=(0.0, 1.0))
    never = int(np.sum(~hidden_fired.any(axis=0))) if hidden_fired.shape[0] else n_hidden
    return SparsityReport(qn, np.asarray(labels), float(qn.mean()) if qn.size else 0.0, counts, edges, never, n_hidden)


def sparsity_report(network: Network, data: EncodedDataset, cfg: EvalConfig = EvalConfig()) -> SparsityReport:
    """Fraction of hidden neurons (output layer excluded) that stay silent, per example."""
    emb = embed(network, data, cfg.batch_size, keep_hidden=True)
    return sparsity_from_fired(emb.hidden_fired, data.labels, cfg.hist_bins)


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyCurve:
    times: np.ndarray
    accuracy: np.ndarray  # class-averaged, at each grid time
    event_fraction: np.ndarray  # pooled CDF of output spike times
    steady_state_time: float
    final_accuracy: float
    excluded: int
    notes: list[str] = field(default_factory=lambda: [TRUNCATION_NOTE, STEADY_STATE_NOTE])

    def rows(self):
        return zip(self.times.tolist(), self.accuracy.tolist(), self.event_fraction.tolist())


def _prefix_queries(times, counts):
    """One query row per distinct event time of every example (events up to that time)."""
    rows_t, rows_c, owner, at = [], [], [], []
    for b in range(times.shape[0]):
        ev = times[b, : counts[b]]
        for m in range(ev.size):
            if m + 1 < ev.size and ev[m + 1] == ev[m]:
                continue
            rows_t.append(ev)
            rows_c.append(m + 1)
            owner.append(b)
            at.append(ev[m])
    width = times.shape[1]
    packed = np.zeros((len(rows_t), width))
    for r, ev in enumerate(rows_t):
        packed[r, : ev.size] = ev
    return packed, np.array(rows_c, dtype=np.int64), np.array(owner, dtype=np.int64), np.array(at)


def class_averaged_accuracy(correct_per_class: np.ndarray, class_sizes: np.ndarray) -> np.ndarray:
    """Mean over classes of per-class accuracy; ``correct_per_class`` is ``(..., n_classes)``."""
    present = class_sizes > 0
    return np.mean(correct_per_class[..., present] / class_sizes[present], axis=-1)


def latency_curve(network: Network, test: EncodedDataset, ref: Embeddings, cfg: EvalConfig = EvalConfig(),
                  query: Embeddings | None = None) -> LatencyCurve:
    """Class-averaged accuracy of an online classifier that re-predicts at every output event."""
    query = query if query is not None else embed(network, test, cfg.batch_size)
    keep = query.counts > 0
    excluded = int((~keep).sum())
    q_times, q_counts, labels = query.times[keep], query.counts[keep], query.labels[keep]
    n_classes = int(max(ref.labels.max(), labels.max() if labels.size else 0)) + 1
    class_sizes = np.bincount(labels, minlength=n_classes)

    packed, pcounts, owner, at = _prefix_queries(q_times, q_counts)
    pred = np.empty(owner.size, dtype=np.int64)
    chunk = 4096
    for lo in range(0, owner.size, chunk):
        pred[lo : lo + chunk] = knn_predict_packed(
            packed[lo : lo + chunk], pcounts[lo : lo + chunk], ref.times, ref.counts, ref.labels, cfg.k, n_classes
        )
    correct = (pred == labels[owner]).astype(np.int64)

    grid = np.unique(at)
    # each prefix prediction holds from its own time until the example's next prefix
    diff = np.zeros((grid.size + 1, n_classes), dtype=np.int64)
    prev_correct = np.zeros(labels.size, dtype=np.int64)
    gi = np.searchsorted(grid, at)
    for r in range(owner.size):
        b = owner[r]
        delta = correct[r] - prev_correct[b]
        if delta:
            diff[gi[r], labels[b]] += delta
        prev_correct[b] = correct[r]
    counts = np.cumsum(diff[:-1], axis=0)
    acc = class_averaged_accuracy(counts, class_sizes) if grid.size else np.zeros(0)

    final_correct = np.bincount(labels[prev_correct.astype(bool)], minlength=n_classes)
    final = float(class_averaged_accuracy(final_correct, class_sizes)) if labels.size else 0.0
    reached = np.flatnonzero(acc >= final)
    steady = float(grid[reached[0]]) if reached.size else float("nan")

    all_events = np.sort(np.concatenate([q_times[b, : q_counts[b]] for b in range(labels.size)])) if labels.size else np.zeros(0)
    frac = np.searchsorted(all_events, grid, side="right") / max(all_events.size, 1)
    return LatencyCurve(grid, acc, frac, steady, final, excluded)


# ---------------------------------------------------------------------------
# export


def write_qn_csv(path, rep: SparsityReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example", "label", "qn"])
        for i, (lab, q) in enumerate(zip(rep.labels.tolist(), rep.qn.tolist())):
            w.writerow([i, lab, repr(q)])


def write_latency_csv(path, curve: LatencyCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_ms", "class_avg_accuracy", "cum_event_fraction"])
        for t, a, f in curve.rows():
            w.writerow([repr(t), repr(a), repr(f)])


def write_f1_csv(path, report: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for c, v in report["per_class"].items():
            w.writerow([c, repr(v["precision"]), repr(v["recall"]), repr(v["f1"]), v["support"]])
        w.writerow(["macro", "", "", repr(report["macro_f1"]), ""])


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
