"""Positive loss, spreadout regularizer and the cosine-margin stand-in.

All functions are pure and operate on float64 numpy arrays.  Gradients are
analytic; the test-suite checks each one against central finite differences.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .embedding import DimensionError, as_embedding

# Pairs closer than this have no defined spreadout gradient and are skipped.
DEGENERATE_DIST = 1e-12


class DegeneratePairWarning(RuntimeWarning):
    pass


class InsufficientClassesError(ValueError):
    pass


@dataclass(frozen=True)
class PositiveLossParams:
    margin_m: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.margin_m <= 1.0:
            raise ValueError(f"margin_m must lie in (0, 1], got {self.margin_m}")


@dataclass(frozen=True)
class SpreadoutParams:
    margin_v: float = 0.7
    step_lambda: float = 25.0

    def __post_init__(self):
        if self.margin_v <= 0 or self.step_lambda <= 0:
            raise ValueError("margin_v and step_lambda must be positive")


@dataclass(frozen=True)
class CosineMarginParams:
    scale_s: float = 30.0
    margin: float = 0.35

    def __post_init__(self):
        if self.scale_s <= 0:
            raise ValueError("scale_s must be positive")


def _pair(f, w):
    f = as_embedding(f)
    w = as_embedding(w)
    if f.shape != w.shape:
        raise DimensionError(f"dimension mismatch: {f.shape[0]} vs {w.shape[0]}")
    return f, w


def positive_loss(f, w, p: PositiveLossParams = PositiveLossParams()) -> float:
    """Squared hinge ``max(0, m - w.f)^2`` pulling a sample toward its class."""
    f, w = _pair(f, w)
    return max(0.0, p.margin_m - float(w @ f)) ** 2


def positive_loss_grad(f, w, p: PositiveLossParams = PositiveLossParams()):
    """Return ``(grad_f, grad_w)`` of :func:`positive_loss`."""
    f, w = _pair(f, w)
    gap = p.margin_m - float(w @ f)
    if gap <= 0.0:
        return np.zeros_like(f), np.zeros_like(w)
    return -2.0 * gap * w, -2.0 * gap * f


def _as_matrix(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] < 1:
        raise DimensionError(f"class embedding matrix must be (C, d), got shape {W.shape}")
    if W.shape[0] < 2:
        raise InsufficientClassesError(f"spreadout needs at least 2 classes, got {W.shape[0]}")
    if not np.all(np.isfinite(W)):
        raise ValueError("class embedding matrix contains NaN or Inf")
    return W


def _pairwise(W):
    diff = W[:, None, :] - W[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return diff, dist


def spreadout_loss(W, p: SpreadoutParams = SpreadoutParams()) -> float:
    """Hinge penalty over ordered pairs, so each unordered pair counts twice."""
    W = _as_matrix(W)
    _, dist = _pairwise(W)
    hinge = np.maximum(0.0, p.margin_v - dist)
    np.fill_diagonal(hinge, 0.0)
    return float(np.sum(hinge**2))


def spreadout_grad(W, p: SpreadoutParams = SpreadoutParams()):
    """Gradient of :func:`spreadout_loss` w.r.t. every row.

    Returns ``(grad, n_degenerate)`` where ``n_degenerate`` counts unordered
    pairs skipped because they coincide.
    """
    W = _as_matrix(W)
    diff, dist = _pairwise(W)
    C = W.shape[0]
    off_diag = ~np.eye(C, dtype=bool)
    degenerate = off_diag & (dist < DEGENERATE_DIST)
    usable = off_diag & ~degenerate
    coef = np.zeros_like(dist)
    # min{0, 1 - v/d}; exactly zero at d == v and beyond
    coef[usable] = np.minimum(0.0, 1.0 - p.margin_v / dist[usable])
    grad = 4.0 * np.einsum("ij,ijk->ik", coef, diff)
    return grad, int(np.count_nonzero(degenerate)) // 2


def spreadout_step(W, p: SpreadoutParams = SpreadoutParams()):
    """One spreadout gradient step; returns ``(W_hat, n_degenerate)``."""
    W = _as_matrix(W)
    grad, n_degenerate = spreadout_grad(W, p)
    return W - p.step_lambda * grad, n_degenerate


def spreadout_update(W, p: SpreadoutParams = SpreadoutParams()) -> np.ndarray:
    """Single spreadout step applied by the learning server.

    Coincident rows are left out of each other's sums and reported with a
    :class:`DegeneratePairWarning`.
    """
    W_hat, n_degenerate = spreadout_step(W, p)
    if n_degenerate:
        warnings.warn(f"{n_degenerate} coincident class-embedding pair(s) skipped", DegeneratePairWarning, stacklevel=2)
    return W_hat


def _normalize_rows(W):
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    if np.any(norms < DEGENERATE_DIST):
        raise ValueError("classifier row with zero norm")
    return W / norms, norms


def cosine_margin_loss(f, rows, true_class: int, p: CosineMarginParams = CosineMarginParams()) -> float:
    """Large-margin cosine softmax loss for one sample."""
    return cosine_margin_loss_grad(f, rows, true_class, p)[0]


def cosine_margin_loss_grad(f, rows, true_class: int, p: CosineMarginParams = CosineMarginParams()):
    """Loss and gradients ``(loss, grad_f, grad_rows)`` for one sample.

    Logits are ``s * (cos_c - margin * [c == true_class])`` where ``cos_c`` is
    the dot product of ``f`` with the L2-normalized row ``c``.  The gradient
    w.r.t. ``rows`` is taken through the row normalization.
    """
    f = as_embedding(f)
    loss, grad_f, grad_rows = cosine_margin_batch(f[None, :], rows, np.array([true_class]), p)
    return loss, grad_f[0], grad_rows


def cosine_margin_batch(F, rows, labels, p: CosineMarginParams = CosineMarginParams()):
    """Mean cosine-margin loss over a batch and its gradients.

    Returns ``(loss, grad_F, grad_rows)`` with ``grad_F`` shaped like ``F``.
    """
    F = np.asarray(F, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if rows.ndim != 2 or F.ndim != 2 or F.shape[1] != rows.shape[1]:
        raise DimensionError(f"feature shape {F.shape} does not match rows {rows.shape}")
    C = rows.shape[0]
    if np.any(labels < 0) or np.any(labels >= C):
        raise IndexError(f"class label out of range [0, {C})")
    n = F.shape[0]
    unit, norms = _normalize_rows(rows)
    cos = F @ unit.T
    logits = p.scale_s * cos
    logits[np.arange(n), labels] -= p.scale_s * p.margin
    logits -= logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    loss = float(np.mean(log_z - logits[np.arange(n), labels]))

    probs = np.exp(logits - log_z[:, None])
    probs[np.arange(n), labels] -= 1.0
    g_cos = p.scale_s * probs / n
    grad_F = g_cos @ unit
    g_unit = g_cos.T @ F
    # d(row/|row|) = (I - u u^T) / |row|
    radial = np.sum(g_unit * unit, axis=1, keepdims=True)
    grad_rows = (g_unit - radial * unit) / norms
    return loss, grad_F, grad_rows
