"""Mini-batch SGD training loop and ranking/threshold metrics.

Everything is deterministic per seed: the shuffle order is drawn from one
generator, updates are applied in batch order, and the returned graph
carries the weights of the epoch with the best validation AUC (ties keep
the earlier epoch).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, MetricError, NumericError, ShapeError, TrainingDiverged
from .tensor import Tape, Tensor, backward_pass, cross_entropy

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "EvalReport",
    "train",
    "predict_scores",
    "roc_auc",
    "threshold_metrics",
    "evaluate",
]


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    epochs: int
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    shuffle: bool = True

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)  # mean loss per epoch
    val_auc: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")

    def to_json(self):
        return json.dumps(
            {
                "train_loss": self.train_loss,
                "val_auc": self.val_auc,
                "best_epoch": self.best_epoch,
                "best_val_auc": self.best_val_auc,
            },
            indent=2,
        ) + "\n"


def _as_xy(dataset, what):
    x, y = dataset
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise DataError(f"{what}: got {x.shape[0]} inputs but label shape {y.shape}")
    return x, y.astype(np.int64)


def train(graph, train_set, val_set, config):
    """SGD with momentum on cross-entropy; returns (graph, TrainHistory).

    The graph is updated in place; after the final epoch its weights are
    reset to the best-validation-AUC snapshot. A non-finite loss aborts
    with the epoch, batch, and gradient magnitude in the message.
    """
    config.validate()
    x_train, y_train = _as_xy(train_set, "train set")
    x_val, y_val = _as_xy(val_set, "val set")
    n = x_train.shape[0]
    if n == 0 or x_val.shape[0] == 0:
        raise DataError("train and val sets must be non-empty")

    rng = np.random.default_rng(config.seed)
    params = [t for _, t in graph.parameters()]
    velocity = [np.zeros_like(t.data) for t in params]
    history = TrainHistory()
    best_weights = graph.get_weight_vector()
    best_auc = -np.inf

    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        epoch_loss = 0.0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            xb = Tensor(np.ascontiguousarray(x_train.data[idx]))
            yb = y_train[idx]

            tape = Tape()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    out = graph.forward(xb, tape=tape)
                    loss, loss_grad = cross_entropy(out, yb)
                    if not np.isfinite(loss):
                        raise NumericError(f"non-finite loss {loss}")
                    graph.zero_grad()
                    backward_pass(tape, out, loss_grad)
            except NumericError as exc:
                raise TrainingDiverged(
                    f"{exc} at epoch {epoch}, batch {b0 // config.batch_size} "
                    f"(lr={config.lr}, momentum={config.momentum})") from exc

            max_grad = 0.0
            for t, v in zip(params, velocity):
                g = t.grad
                if g is None:
                    continue
                if not np.isfinite(g).all():
                    raise TrainingDiverged(
                        f"non-finite gradient at epoch {epoch}, batch {b0 // config.batch_size}")
                max_grad = max(max_grad, float(np.abs(g).max()))
                v *= config.momentum
                v -= config.lr * g
                t.data += v
            epoch_loss += loss * len(idx)

        history.train_loss.append(epoch_loss / n)
        auc = roc_auc(predict_scores(graph, x_val), y_val)
        history.val_auc.append(auc)
        if auc > best_auc:
            best_auc = auc
            best_weights = graph.get_weight_vector()
            history.best_epoch = epoch
            history.best_val_auc = auc

    if config.epochs > 0:
        graph.set_weight_vector(best_weights)
    return graph, history


def predict_scores(graph, inputs, batch_size=64):
    """Positive-class probabilities, in input order."""
    if isinstance(inputs, tuple):
        inputs = inputs[0]
    if not isinstance(inputs, Tensor):
        inputs = Tensor(np.asarray(inputs, dtype=np.float64))
    if graph.class_count != 2:
        raise ShapeError(f"positive-class scores need a 2-way head, graph has {graph.class_count}")
    n = inputs.shape[0]
    scores = np.empty(n)
    for b0 in range(0, n, batch_size):
        xb = Tensor(np.ascontiguousarray(inputs.data[b0 : b0 + batch_size]))
        z = graph.forward_logits(xb)
        # softmax positive column, stably: sigma(z1 - z0)
        d = z[:, 1] - z[:, 0]
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ed = np.exp(d[~pos])
        out[~pos] = ed / (1.0 + ed)
        scores[b0 : b0 + batch_size] = out
    return scores


def roc_auc(scores, labels):
    """Mann-Whitney AUC with half credit for ties.

    Computed from tied ranks in O(n log n); numerically identical to
    enumerating all (positive, negative) pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-D")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise MetricError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC undefined: {n_pos} positives, {n_neg} negatives")

    n = scores.size
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def threshold_metrics(scores, labels, threshold=0.5):
    """Confusion counts plus sensitivity and PPV at a score threshold.

    PPV is None (and flagged) when nothing is predicted positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    if tp + fn == 0:
        raise MetricError("sensitivity undefined: no positive labels")
    sensitivity = tp / (tp + fn)
    ppv_defined = (tp + fp) > 0
    ppv = tp / (tp + fp) if ppv_defined else None
    return {
        "threshold": threshold,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
        "sensitivity": sensitivity,
        "ppv": ppv,
        "ppv_defined": ppv_defined,
    }


@dataclass
class EvalReport:
    auc: float
    sensitivity: float
    ppv: float | None
    ppv_defined: bool
    counts: dict
    scores: np.ndarray

    def to_json(self):
        return json.dumps(
            {
                "auc": self.auc,
                "sensitivity": self.sensitivity,
                "ppv": self.ppv,
                "ppv_defined": self.ppv_defined,
                "counts": {k: self.counts[k] for k in ("tp", "fp", "fn", "tn")},
                "n": int(self.scores.size),
            },
            indent=2,
        ) + "\n"


def evaluate(graph, dataset, threshold=0.5):
    """Score a labeled dataset: AUC plus threshold metrics at 0.5."""
    x, y = _as_xy(dataset, "eval set")
    scores = predict_scores(graph, x)
    tm = threshold_metrics(scores, y, threshold)
    return EvalReport(
        auc=roc_auc(scores, y),
        sensitivity=tm["sensitivity"],
        ppv=tm["ppv"],
        ppv_defined=tm["ppv_defined"],
        counts=tm,
        scores=scores,
    )
