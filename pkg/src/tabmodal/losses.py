"""Contrastive, downstream, and multi-task objectives.

The default contrastive loss is the symmetric temperature-scaled
cross-entropy over in-batch pairs: row k of the image projections pairs with
row k of the tabular projections, and the other N-1 rows of the opposite
modality are the negatives. The alternatives kept for ablations follow their
published definitions (fixed-definition CLIP-style learnable temperature,
negative-free cosine alignment with stop-gradient, and redundancy-reduction
on the cross-correlation matrix).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabmodal import tensor as T
from tabmodal.tensor import Tensor


# ---------------------------------------------------------------------------
# contrastive


@dataclass(frozen=True)
class ContrastiveBatch:
    z_i: Tensor          # [N, P] image projections, unit rows
    z_t: Tensor          # [N, P] tabular projections, unit rows, row k pairs with z_i row k
    temperature: float

    def __post_init__(self):
        if self.z_i.ndim != 2 or self.z_i.shape != self.z_t.shape:
            raise T.ShapeError(f"contrastive batch: {self.z_i.shape} vs {self.z_t.shape}")
        if self.z_i.shape[0] < 2:
            raise ValueError("contrastive batch needs N >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def _symmetric_nce_from_similarity(sim: Tensor) -> Tensor:
    """sim[k, j]: scaled similarity of image k against tabular j; positives on
    the diagonal. Mean of the row-wise and column-wise cross-entropies."""
    n = sim.shape[0]
    eye = Tensor(np.eye(n))
    diag = T.sum_(T.mul(sim, eye), axis=1)
    l_it = T.mean(T.sub(T.log_sum_exp(sim, axis=1), diag))
    l_ti = T.mean(T.sub(T.log_sum_exp(sim, axis=0), diag))
    return T.mul(T.scalar(0.5), T.add(l_it, l_ti))


def info_nce(batch: ContrastiveBatch) -> Tensor:
    sim = T.mul(T.matmul(batch.z_i, T.transpose(batch.z_t)),
                T.scalar(1.0 / batch.temperature))
    return _symmetric_nce_from_similarity(sim)


def clip_loss(z_i: Tensor, z_t: Tensor, t_learn: Tensor) -> Tensor:
    """Same symmetric cross-entropy but scaled by a learnable exp(t)."""
    if z_i.shape[0] < 2:
        raise ValueError("clip_loss needs N >= 2")
    if t_learn.shape != ():
        raise T.ShapeError("t_learn must be a scalar")
    sim = T.mul(T.matmul(z_i, T.transpose(z_t)), T.exp(t_learn))
    return _symmetric_nce_from_similarity(sim)


def _row_cosine(a: Tensor, b: Tensor) -> Tensor:
    return T.sum_(T.mul(T.l2_normalize(a, axis=1), T.l2_normalize(b, axis=1)), axis=1)


def simsiam_loss(p_i: Tensor, z_i: Tensor, p_t: Tensor, z_t: Tensor) -> Tensor:
    """Negative mean cosine of each predictor output against the stopped
    projection of the other tower."""
    if p_i.shape[0] < 2:
        raise ValueError("simsiam_loss needs N >= 2")
    align_i = T.mean(_row_cosine(p_i, T.detach(z_t)))
    align_t = T.mean(_row_cosine(p_t, T.detach(z_i)))
    return T.mul(T.scalar(-0.5), T.add(align_i, align_t))


def barlow_twins_loss(z_a: Tensor, z_b: Tensor, lambda_off: float = 5e-3,
                      eps: float = 1e-9) -> Tensor:
    """Push the cross-correlation of batch-normalized embeddings toward the
    identity: squared diagonal error plus lambda_off * squared off-diagonals."""
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise T.ShapeError(f"barlow_twins_loss: {z_a.shape} vs {z_b.shape}")
    n = z_a.shape[0]
    if n < 2:
        raise ValueError("barlow_twins_loss needs N >= 2")

    def normalize(z):
        mu = T.mean(z, axis=0)
        zc = T.sub(z, mu)
        var = T.mean(T.power(zc, 2.0), axis=0)
        if np.any(np.sqrt(var.numpy()) < eps):
            raise ValueError("barlow_twins_loss: zero-variance embedding dimension")
        return T.mul(zc, T.power(var, -0.5))

    na, nb = normalize(z_a), normalize(z_b)
    corr = T.mul(T.matmul(T.transpose(na), nb), T.scalar(1.0 / n))
    eye = Tensor(np.eye(corr.shape[0]))
    on_diag = T.sum_(T.mul(T.power(T.sub(corr, eye), 2.0), eye))
    off_diag = T.sum_(T.mul(T.power(corr, 2.0), T.sub(T.scalar(1.0), eye)))
    return T.add(on_diag, T.mul(T.scalar(lambda_off), off_diag))


def alt_contrastive_loss(kind: str, **inputs) -> Tensor:
    if kind == "clip":
        return clip_loss(inputs["z_i"], inputs["z_t"], inputs["t_learn"])
    if kind == "simsiam":
        return simsiam_loss(inputs["p_i"], inputs["z_i"], inputs["p_t"], inputs["z_t"])
    if kind == "barlow_twins":
        return barlow_twins_loss(inputs["z_i"], inputs["z_t"],
                                 **{k: inputs[k] for k in ("lambda_off", "eps") if k in inputs})
    raise ValueError(f"unknown contrastive loss {kind!r}")


# ---------------------------------------------------------------------------
# downstream


def _abs(x: Tensor) -> Tensor:
    return T.add(T.relu(x), T.relu(T.neg(x)))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise T.ShapeError(f"mse: {pred.shape} vs {target.shape}")
    return T.mean(T.power(T.sub(pred, target), 2.0))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise T.ShapeError(f"l1: {pred.shape} vs {target.shape}")
    return T.mean(_abs(T.sub(pred, target)))


def huber_loss(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Quadratic inside |d| <= delta, linear outside."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"huber: {pred.shape} vs {target.shape}")
    a = _abs(T.sub(pred, target))
    over = T.relu(T.sub(a, T.scalar(delta)))       # max(|d| - delta, 0)
    clipped = T.sub(a, over)                       # min(|d|, delta)
    quad = T.mul(T.scalar(0.5), T.power(clipped, 2.0))
    return T.mean(T.add(quad, T.mul(T.scalar(delta), over)))


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise T.ShapeError(f"labels {labels.shape} vs logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"unknown class id in labels (valid: 0..{logits.shape[1] - 1})")
    return labels.astype(np.int64)


def _one_hot(labels: np.ndarray, n_classes: int) -> Tensor:
    return Tensor(np.eye(n_classes)[labels])


def _per_sample_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = _check_labels(logits, labels)
    true_logit = T.sum_(T.mul(logits, _one_hot(labels, logits.shape[1])), axis=1)
    return T.sub(T.log_sum_exp(logits, axis=1), true_logit)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return T.mean(_per_sample_ce(logits, labels))


def inverse_frequency_weights(train_labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-class 1/frequency, rescaled to mean 1 across classes."""
    counts = np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=n_classes)
    if np.any(counts == 0):
        raise ValueError("every class must appear in the training labels")
    inv = 1.0 / counts
    return inv / inv.mean()


def balanced_cross_entropy(logits: Tensor, labels: np.ndarray,
                           class_weights: np.ndarray) -> Tensor:
    labels = _check_labels(logits, labels)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (logits.shape[1],):
        raise T.ShapeError(f"class_weights {class_weights.shape} for {logits.shape[1]} classes")
    per = _per_sample_ce(logits, labels)
    return T.mean(T.mul(per, Tensor(class_weights[labels])))


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Cross-entropy with easy examples down-weighted by (1 - p_true)^gamma."""
    labels = _check_labels(logits, labels)
    nll = _per_sample_ce(logits, labels)
    p_true = T.sum_(T.mul(T.softmax(logits, axis=1), _one_hot(labels, logits.shape[1])), axis=1)
    damp = T.power(T.sub(T.scalar(1.0), p_true), gamma)
    return T.mean(T.mul(damp, nll))


REGRESSION_LOSSES = ("mse", "l1", "huber")
CLASSIFICATION_LOSSES = ("ce", "balanced_ce", "focal")


def downstream_loss(kind: str, pred: Tensor, target, **kwargs) -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "l1":
        return l1_loss(pred, target)
    if kind == "huber":
        return huber_loss(pred, target, **kwargs)
    if kind == "ce":
        return cross_entropy(pred, target)
    if kind == "balanced_ce":
        return balanced_cross_entropy(pred, target, kwargs["class_weights"])
    if kind == "focal":
        return focal_loss(pred, target, **kwargs)
    raise ValueError(f"unknown downstream loss {kind!r}")


# ---------------------------------------------------------------------------
# multi-task combination


@dataclass(frozen=True)
class MultiTaskWeights:
    mode: str = "uncertainty"   # "fixed" | "uncertainty"
    lambda_c: float = 0.5
    lambda_m: float = 0.5

    def __post_init__(self):
        if self.mode not in ("fixed", "uncertainty"):
            raise ValueError(f"unknown multitask mode {self.mode!r}")
        if self.mode == "fixed" and (self.lambda_c <= 0 or self.lambda_m <= 0):
            raise ValueError("fixed multitask weights must be positive")


def combine_multitask(l_c: Tensor, l_m: Tensor, weights: MultiTaskWeights,
                      params: dict | None = None) -> Tensor:
    """Fixed mode: lambda_c * L_c + lambda_m * L_m. Uncertainty mode:
    exp(-s) * L + s per task, with the s parameters trained alongside the
    network (minimum over s at s = ln L)."""
    for name, l in (("contrastive", l_c), ("mask", l_m)):
        if l.shape != ():
            raise T.ShapeError(f"{name} loss must be scalar, got {l.shape}")
        if not np.isfinite(l.numpy()):
            raise T.NumericError(f"{name} loss is not finite")
    if weights.mode == "fixed":
        return T.add(T.mul(T.scalar(weights.lambda_c), l_c),
                     T.mul(T.scalar(weights.lambda_m), l_m))
    if params is None or "multitask.s_c" not in params:
        raise ValueError("uncertainty mode needs multitask.s_c / multitask.s_m parameters")
    s_c, s_m = params["multitask.s_c"], params["multitask.s_m"]
    term_c = T.add(T.mul(T.exp(T.neg(s_c)), l_c), s_c)
    term_m = T.add(T.mul(T.exp(T.neg(s_m)), l_m), s_m)
    return T.add(term_c, term_m)
