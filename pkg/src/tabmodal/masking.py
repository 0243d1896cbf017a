"""Masked-feature pretext task.

A Bernoulli mask picks coordinates of a row; each picked coordinate is
replaced by an independent draw from that feature's empirical marginal (the
multiset of values seen in the training split), so corrupted rows still look
like rows of the dataset. The pretext targets are the mask itself
(mask recovery) or the original row (feature reconstruction).

Corruption happens outside the tape: masks and resampled values are
non-differentiable inputs, and gradients never flow through them.
"""

from __future__ import annotations

import numpy as np

from tabmodal import tensor as T
from tabmodal.tensor import Tensor

DEFAULT_MASK_PROB = 0.3


class EmpiricalMarginals:
    """Per-feature value multisets observed in the training split."""

    def __init__(self, columns: list):
        if not columns or any(len(c) == 0 for c in columns):
            raise ValueError("marginals need at least one observed value per feature")
        self.columns = [np.ascontiguousarray(c, dtype=np.float64) for c in columns]
        self._lens = np.array([len(c) for c in self.columns])

    @property
    def n_features(self) -> int:
        return len(self.columns)

    def sample_row(self, rng: np.random.Generator) -> np.ndarray:
        """One independent draw from every feature's marginal."""
        idx = rng.integers(0, self._lens)
        return np.array([col[i] for col, i in zip(self.columns, idx)])

    def in_support(self, j: int, value: float) -> bool:
        return bool(np.any(self.columns[j] == value))


def fit_empirical_marginals(train_matrix: np.ndarray) -> EmpiricalMarginals:
    train_matrix = np.asarray(train_matrix, dtype=np.float64)
    if train_matrix.ndim != 2 or train_matrix.shape[0] == 0:
        raise ValueError(f"expected a non-empty [n, L] matrix, got shape {train_matrix.shape}")
    if not np.all(np.isfinite(train_matrix)):
        raise ValueError("marginals must be fitted after imputation (finite values only)")
    return EmpiricalMarginals([train_matrix[:, j] for j in range(train_matrix.shape[1])])


def sample_mask(n_features: int, p_m: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(p_m) entries in {0, 1}."""
    if not 0.0 < p_m < 1.0:
        raise ValueError(f"p_m must lie in (0, 1), got {p_m}")
    return (rng.random(n_features) < p_m).astype(np.float64)


def corrupt(x_t: np.ndarray, m: np.ndarray, marginals: EmpiricalMarginals,
            rng: np.random.Generator) -> np.ndarray:
    """Masked coordinates replaced by marginal draws: m * resampled + (1-m) * x."""
    if not isinstance(marginals, EmpiricalMarginals):
        raise TypeError("corrupt needs fitted EmpiricalMarginals")
    x_t = np.asarray(x_t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if x_t.shape != m.shape or x_t.shape != (marginals.n_features,):
        raise T.ShapeError(f"corrupt: row {x_t.shape}, mask {m.shape}, "
                           f"marginals over {marginals.n_features} features")
    resampled = marginals.sample_row(rng)
    return m * resampled + (1.0 - m) * x_t


def sample_rng(global_seed: int, epoch: int, sample_index: int) -> np.random.Generator:
    """Stream for one (sample, epoch) pair; fresh masks every epoch, replayable."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, epoch, sample_index]))


def corrupt_batch(rows: np.ndarray, indices: np.ndarray, marginals: EmpiricalMarginals,
                  p_m: float, global_seed: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a batch of rows; per-sample streams keyed by dataset index.

    The mask is drawn before the replacement values inside each stream.
    Returns (corrupted rows, masks).
    """
    rows = np.asarray(rows, dtype=np.float64)
    out = np.empty_like(rows)
    masks = np.empty_like(rows)
    for b, idx in enumerate(indices):
        rng = sample_rng(global_seed, epoch, int(idx))
        m = sample_mask(rows.shape[1], p_m, rng)
        out[b] = corrupt(rows[b], m, marginals, rng)
        masks[b] = m
    return out, masks


def mask_loss(m: Tensor, m_hat: Tensor) -> Tensor:
    """Mean absolute error between mask and estimate, averaged over batch and
    features. On a binary mask |m - m_hat| equals m(1-m_hat) + (1-m)m_hat,
    which keeps the loss differentiable in m_hat without an abs primitive."""
    if m.shape != m_hat.shape:
        raise T.ShapeError(f"mask_loss: mask {m.shape} vs estimate {m_hat.shape}")
    raw = m.numpy()
    if not np.all((raw == 0.0) | (raw == 1.0)):
        raise ValueError("mask_loss: mask must be binary")
    one = T.scalar(1.0)
    err = T.add(T.mul(m, T.sub(one, m_hat)), T.mul(T.sub(one, m), m_hat))
    return T.mean(err)


def reconstruction_loss(x_t: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared error over batch and features."""
    if x_t.shape != x_hat.shape:
        raise T.ShapeError(f"reconstruction_loss: {x_t.shape} vs {x_hat.shape}")
    return T.mean(T.power(T.sub(x_t, x_hat), 2.0))
