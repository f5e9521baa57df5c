"""Batch-all triplet training on EMD between output spike trains.

The batch loss is

    L = mean_{(a,p,n) in Q} max(0, alpha + EMD(f_a, f_p) - EMD(f_a, f_n))
        + K * sum_j max(0, theta - sum_i w_ij)
        + lambda * sum w^2

with ``Q`` every ordered triple of distinct examples where anchor and
positive share a label and the negative does not. The fraction of triplets
with a positive hinge (AT) drives early stopping.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .emd import accumulate_pair_gradients, pairwise_emd_packed
from .encoding import EncodedDataset
from .snn import BatchTrace, Network, NetworkTopology, NeuronConfig, backward_batch, forward_batch

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "epoch",
    "batch",
    "n_triplets",
    "n_active",
    "at",
    "mean_triplet_loss",
    "reg_loss",
    "l2_loss",
    "total_loss",
    "empty_embeddings",
    "wall_ms",
)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or weight."""


@dataclass
class TrainingConfig:
    alpha: float = 0.1
    K: float = 400.0
    l2: float = 1e-3
    learning_rate: float = 1e-3
    batch_size: int = 256
    classes_per_batch: int = 10
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    max_epochs: int = 30
    at_threshold: float = 0.01
    patience: int = 3
    seed: int = 0
    sizes: tuple[int, ...] = (784, 400, 400, 10)
    tau_syn: float = 1.0
    v_thr: float = 1.0
    init_min_firing: float = 0.5
    log_wall_time: bool = False

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)

    def validate(self) -> list[str]:
        """Every problem with the configuration, so they can be reported together."""
        errors = []
        if not self.alpha > 0:
            errors.append("alpha must be > 0")
        if self.K < 0:
            errors.append("K must be >= 0")
        if self.l2 < 0:
            errors.append("l2 must be >= 0")
        if self.learning_rate < 0:
            errors.append("learning_rate must be >= 0")
        if self.batch_size < 3:
            errors.append("batch_size must be >= 3")
        if self.classes_per_batch < 2:
            errors.append("classes_per_batch must be >= 2")
        if not 0 <= self.rms_decay < 1:
            errors.append("rms_decay must lie in [0, 1)")
        if not self.rms_eps > 0:
            errors.append("rms_eps must be > 0")
        if self.max_epochs < 1:
            errors.append("max_epochs must be >= 1")
        if not 0 <= self.at_threshold <= 1:
            errors.append("at_threshold must lie in [0, 1]")
        if self.patience < 1:
            errors.append("patience must be >= 1")
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            errors.append("sizes needs >= 2 layers of size >= 1")
        if not self.tau_syn > 0 or not self.v_thr > 0:
            errors.append("tau_syn and v_thr must be > 0")
        if not 0 <= self.init_min_firing <= 1:
            errors.append("init_min_firing must lie in [0, 1]")
        return errors

    @property
    def neuron_config(self) -> NeuronConfig:
        return NeuronConfig(self.tau_syn, self.v_thr)

    @property
    def topology(self) -> NetworkTopology:
        return NetworkTopology(self.sizes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sizes"] = list(self.sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class TripletBatchStats:
    n_triplets: int = 0
    n_active: int = 0
    mean_triplet_loss: float = 0.0
    reg_loss: float = 0.0
    l2_loss: float = 0.0
    total_loss: float = 0.0
    empty_embeddings: int = 0

    @property
    def at(self) -> float:
        return self.n_active / self.n_triplets if self.n_triplets else 0.0


# ---------------------------------------------------------------------------
# loss pieces


def enumerate_triplets(labels) -> list[tuple[int, int, int]]:
    """Every ordered ``(anchor, positive, negative)`` with distinct indices."""
    labels = list(labels)
    n = len(labels)
    return [
        (a, p, q)
        for a in range(n)
        for p in range(n)
        if p != a and labels[p] == labels[a]
        for q in range(n)
        if labels[q] != labels[a]
    ]


def triplet_loss(d_ap: float, d_an: float, alpha: float) -> float:
    return max(0.0, alpha + d_ap - d_an)


def spike_regularizer(weights: list[np.ndarray], config: NeuronConfig, K: float):
    """Hinge on every non-input neuron's total incoming weight; returns ``(value, grads)``."""
    value = 0.0
    grads = []
    for w in weights:
        deficit = config.theta - w.sum(axis=0)
        violating = deficit > 0
        value += float(deficit[violating].sum())
        g = np.zeros_like(w)
        g[:, violating] = -K
        grads.append(g)
    return K * value, grads


def l2_penalty(weights: list[np.ndarray], lam: float):
    value = lam * sum(float(np.sum(w * w)) for w in weights)
    return value, [2.0 * lam * w for w in weights]


def triplet_terms(dist: np.ndarray, labels: np.ndarray, valid: np.ndarray, alpha: float):
    """Batch-all triplet statistics from a pairwise distance matrix.

    Returns ``(n_triplets, n_active, loss_sum, coef)`` where ``coef[a, b]`` is
    the derivative of the summed hinge with respect to ``dist[a, b]``.
    """
    n = labels.shape[0]
    coef = np.zeros((n, n))
    n_triplets = 0
    n_active = 0
    loss_sum = 0.0
    idx = np.arange(n)
    for a in range(n):
        if not valid[a]:
            continue
        same = labels == labels[a]
        pos = np.flatnonzero(same & valid & (idx != a))
        neg = np.flatnonzero(~same & valid)
        if pos.size == 0 or neg.size == 0:
            continue
        margin = alpha + dist[a, pos][:, None] - dist[a, neg][None, :]
        active = margin > 0
        n_triplets += pos.size * neg.size
        n_active += int(active.sum())
        loss_sum += float(margin[active].sum())
        coef[a, pos] += active.sum(axis=1)
        coef[a, neg] -= active.sum(axis=0)
    return n_triplets, n_active, loss_sum, coef


@dataclass
class BatchResult:
    stats: TripletBatchStats
    grads: list[np.ndarray] | None
    trace: BatchTrace
    dist: np.ndarray = field(repr=False)


def batch_loss(
    network: Network,
    times: np.ndarray,
    present: np.ndarray,
    labels: np.ndarray,
    cfg: TrainingConfig,
    want_grad: bool = True,
) -> BatchResult:
    """Total loss, its components and (optionally) weight gradients for one batch.

    Examples whose output layer stays silent have no EMD and are left out of
    the triplet set; the regularizers still apply to the weights.
    """
    labels = np.asarray(labels)
    trace = forward_batch(network, times, present)
    valid = trace.emb_counts > 0
    n = labels.shape[0]
    dist = np.zeros((n, n))
    if valid.any():
        vi = np.flatnonzero(valid)
        dist[np.ix_(vi, vi)] = pairwise_emd_packed(trace.emb_times[vi], trace.emb_counts[vi])
    n_q, n_at, loss_sum, coef = triplet_terms(dist, labels, valid, cfg.alpha)

    reg, reg_grads = spike_regularizer(network.weights, network.config, cfg.K)
    l2, l2_grads = l2_penalty(network.weights, cfg.l2)
    mean_triplet = loss_sum / n_q if n_q else 0.0
    stats = TripletBatchStats(
        n_triplets=n_q,
        n_active=n_at,
        mean_triplet_loss=mean_triplet,
        reg_loss=reg,
        l2_loss=l2,
        total_loss=mean_triplet + reg + l2,
        empty_embeddings=int((~valid).sum()),
    )
    grads = None
    if want_grad:
        if n_at:
            g_emb = accumulate_pair_gradients(trace.emb_times, trace.emb_counts, coef / n_q)
            grads = backward_batch(trace, g_emb)
        else:
            grads = [np.zeros_like(w) for w in network.weights]
        for g, gr, gl in zip(grads, reg_grads, l2_grads):
            g += gr
            g += gl
    return BatchResult(stats, grads, trace, dist)


class RMSprop:
    """``ms = decay * ms + (1 - decay) * g**2``; ``w -= lr * g / (sqrt(ms) + eps)``."""

    def __init__(self, shapes, lr=1e-3, decay=0.9, eps=1e-8):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.mean_square = [np.zeros(s) for s in shapes]

    def step(self, weights: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for w, g, ms in zip(weights, grads, self.mean_square):
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            w -= self.lr * g / (np.sqrt(ms) + self.eps)


def batch_step(network: Network, optimizer: RMSprop, times, present, labels, cfg: TrainingConfig) -> TripletBatchStats:
    """Forward, loss, backward and one optimizer update. Batches without triplets are skipped."""
    res = batch_loss(network, times, present, labels, cfg)
    if not math.isfinite(res.stats.total_loss):
        raise NumericalError(f"non-finite loss {res.stats.total_loss} ({res.stats})")
    if res.stats.n_triplets == 0:
        return res.stats
    optimizer.step(network.weights, res.grads)
    if not all(np.all(np.isfinite(w)) for w in network.weights):
        raise NumericalError("non-finite weights after update")
    return res.stats


# ---------------------------------------------------------------------------
# sampling, initialization and the training loop


class ClassBalancedSampler:
    """Batches drawing an equal share from ``classes_per_batch`` classes.

    Each class keeps a shuffled queue that is refilled when exhausted; an epoch
    is ``ceil(n / batch_size)`` batches.
    """

    def __init__(self, labels, batch_size: int, classes_per_batch: int, rng: np.random.Generator):
        self.labels = np.asarray(labels)
        self.batch_size = batch_size
        self.rng = rng
        self.classes = np.unique(self.labels)
        self.classes_per_batch = min(classes_per_batch, self.classes.size)
        self._pool = {c: np.flatnonzero(self.labels == c) for c in self.classes}
        self._queue = {c: np.empty(0, dtype=np.int64) for c in self.classes}

    def _take(self, c, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self._queue[c].size == 0:
                self._queue[c] = self.rng.permutation(self._pool[c])
            part = self._queue[c][:k]
            self._queue[c] = self._queue[c][k:]
            out.append(part)
            k -= part.size
            if self._pool[c].size < 2 and part.size == 0:
                break
        return np.concatenate(out)

    def batches_per_epoch(self) -> int:
        return max(1, math.ceil(self.labels.size / self.batch_size))

    def epoch(self):
        for _ in range(self.batches_per_epoch()):
            if self.classes_per_batch == self.classes.size:
                chosen = self.classes
            else:
                chosen = np.sort(self.rng.choice(self.classes, self.classes_per_batch, replace=False))
            base, extra = divmod(self.batch_size, chosen.size)
            parts = [self._take(c, base + (1 if r < extra else 0)) for r, c in enumerate(chosen)]
            yield np.concatenate(parts)


def initialize_network(cfg: TrainingConfig, sample: EncodedDataset | None, rng: np.random.Generator) -> Network:
    """Draw initial weights, redrawing until enough hidden neurons fire on ``sample``.

    The weight distribution is never rescaled. If no draw reaches ``init_min_firing``
    the draw with the highest firing rate is kept, so sparse encodings start sparse.
    """
    net = Network.initialize(cfg.topology, cfg.neuron_config, rng)
    if sample is None or len(sample) == 0 or cfg.init_min_firing <= 0:
        return net
    best, best_rate = net, -1.0
    for attempt in range(30):
        if attempt:
            net = Network.initialize(cfg.topology, cfg.neuron_config, rng)
        trace = forward_batch(net, sample.times, sample.present)
        fired = trace.hidden_fired() if cfg.topology.n_hidden else trace.layers[-1].fired
        rate = float(fired.mean())
        if rate >= cfg.init_min_firing:
            if attempt:
                log.info("initialization accepted after %d redraws (firing %.3f)", attempt, rate)
            return net
        if rate > best_rate:
            best, best_rate = net, rate
    log.warning("initial firing rate %.3f stays below %.2f; keeping the best draw", best_rate, cfg.init_min_firing)
    return best


@dataclass
class TrainingResult:
    network: Network
    log: list[dict]
    epochs_run: int
    stopped_early: bool
    best_epoch: int
    epoch_at: list[float]
    val_at: list[float]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class TrainingLog:
    """Append-only CSV writer for per-batch statistics."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                fh.write(",".join(LOG_COLUMNS) + "\n")

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            with open(self.path, "a", newline="") as fh:
                fh.write(buf.getvalue())


def validation_at(network: Network, val: EncodedDataset, cfg: TrainingConfig) -> float:
    """Pooled AT over fixed class-balanced validation batches."""
    sampler = ClassBalancedSampler(val.labels, cfg.batch_size, cfg.classes_per_batch, np.random.default_rng(cfg.seed + 1))
    n_q = n_at = 0
    for idx in sampler.epoch():
        res = batch_loss(network, val.times[idx], val.present[idx], val.labels[idx], cfg, want_grad=False)
        n_q += res.stats.n_triplets
        n_at += res.stats.n_active
    return n_at / n_q if n_q else 1.0


def train(
    data: EncodedDataset,
    cfg: TrainingConfig,
    val: EncodedDataset | None = None,
    log_path=None,
    network: Network | None = None,
    on_epoch=None,
) -> TrainingResult:
    """Train until the epoch-mean AT stays below ``at_threshold`` for ``patience`` epochs.

    With a validation set, the returned network is the one with the lowest
    validation AT; otherwise the final one.
    """
    errors = cfg.validate()
    if errors:
        raise ValueError("invalid training config: " + "; ".join(errors))
    rng = np.random.default_rng(cfg.seed)
    if network is None:
        n_sample = min(len(data), cfg.batch_size)
        network = initialize_network(cfg, data.subset(np.arange(n_sample)), rng)
    if network.topology.n_inputs != data.times.shape[1]:
        raise ValueError("network input size does not match the data")
    optimizer = RMSprop([w.shape for w in network.weights], cfg.learning_rate, cfg.rms_decay, cfg.rms_eps)
    sampler = ClassBalancedSampler(data.labels, cfg.batch_size, cfg.classes_per_batch, rng)
    tlog = TrainingLog(log_path)

    best = network.copy()
    best_val = math.inf
    best_epoch = 0
    epoch_at: list[float] = []
    val_ats: list[float] = []
    below = 0
    stopped = False
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        ats = []
        for b, idx in enumerate(sampler.epoch()):
            t0 = time.perf_counter()
            stats = batch_step(network, optimizer, data.times[idx], data.present[idx], data.labels[idx], cfg)
            wall = (time.perf_counter() - t0) * 1e3
            if stats.n_triplets:
                ats.append(stats.at)
            tlog.append(
                {
                    "epoch": epoch,
                    "batch": b,
                    "n_triplets": stats.n_triplets,
                    "n_active": stats.n_active,
                    "at": stats.at,
                    "mean_triplet_loss": stats.mean_triplet_loss,
                    "reg_loss": stats.reg_loss,
                    "l2_loss": stats.l2_loss,
                    "total_loss": stats.total_loss,
                    "empty_embeddings": stats.empty_embeddings,
                    "wall_ms": f"{wall:.1f}" if cfg.log_wall_time else "",
                }
            )
        mean_at = float(np.mean(ats)) if ats else 1.0
        epoch_at.append(mean_at)
        if val is not None:
            v = validation_at(network, val, cfg)
            val_ats.append(v)
            if v < best_val:
                best_val, best, best_epoch = v, network.copy(), epoch
        log.info("epoch %d: mean AT %.4f%s", epoch, mean_at, f", val AT {val_ats[-1]:.4f}" if val is not None else "")
        if on_epoch is not None:
            on_epoch(epoch, network, mean_at)
        below = below + 1 if mean_at < cfg.at_threshold else 0
        if below >= cfg.patience:
            stopped = True
            break
    if val is None:
        best, best_epoch = network, epoch
    return TrainingResult(best, tlog.rows, epoch, stopped, best_epoch, epoch_at, val_ats)


def load_config(path) -> TrainingConfig:
    with open(path) as fh:
        return TrainingConfig.from_dict(json.load(fh))


def save_config(cfg: TrainingConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
