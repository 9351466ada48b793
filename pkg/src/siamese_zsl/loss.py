"""Contrastive loss over embedding pairs.

Label convention: ``y = 0`` for a same-species pair, ``y = 1`` otherwise.
Per pair::

    L = (1 - y) * d**2 / 2 + y * max(0, m - d)**2 / 2

with ``d`` the Euclidean distance between the two embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _track

__all__ = ["LossConfig", "contrastive_loss", "contrastive_loss_grad", "pair_loss"]


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    epsilon: float = 1e-12

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 (similar) or 1 (dissimilar)")
    return y


def contrastive_loss(d, y, cfg: LossConfig = LossConfig()):
    """Per-pair loss; vectorised over matching arrays of ``d`` and ``y``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    y = _check_labels(y)
    hinge = np.maximum(0.0, cfg.margin - d)
    loss = (1 - y) * 0.5 * d * d + y * 0.5 * hinge * hinge
    return loss if loss.ndim else float(loss)


def contrastive_loss_grad(e1, e2, y, cfg: LossConfig = LossConfig()):
    """Analytic ``(dL/de1, dL/de2)``.  Works on single vectors or ``[B, D]`` batches."""
    e1 = np.asarray(e1)
    e2 = np.asarray(e2)
    if e1.shape != e2.shape:
        raise ShapeError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    y = _check_labels(y)
    diff = e1 - e2
    d = np.sqrt(np.sum(diff * diff, axis=-1, keepdims=True))
    y = np.asarray(y, dtype=diff.dtype).reshape(d.shape)
    pull = 1.0 - y
    coef = -(np.maximum(cfg.margin - d, 0.0)) / np.maximum(d, cfg.epsilon)
    push = np.where(d < cfg.margin, y * coef, 0.0)
    g1 = ((pull + push) * diff).astype(e1.dtype, copy=False)
    return g1, -g1


def pair_loss(embeddings: Tensor, y, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean contrastive loss of a stacked twin batch.

    Rows ``[0, B)`` of ``embeddings`` are the first pair members and rows
    ``[B, 2B)`` the second ones, both produced by the same weights.
    """
    e = embeddings.data
    if e.ndim != 2 or e.shape[0] % 2:
        raise ShapeError(f"expected stacked pair embeddings [2B, D], got {e.shape}")
    b = e.shape[0] // 2
    y = _check_labels(y).reshape(-1)
    if y.shape[0] != b:
        raise ShapeError(f"{b} pairs but {y.shape[0]} labels")
    e1, e2 = e[:b], e[b:]
    diff = (e1 - e2).astype(np.float64)
    d = np.sqrt(np.sum(diff * diff, axis=1))
    value = float(np.mean(contrastive_loss(d, y, cfg)))
    result = Tensor(np.asarray(value, dtype=e.dtype))

    def vjp(g):
        g1, g2 = contrastive_loss_grad(e1, e2, y, cfg)
        scale = g / b
        return (np.concatenate([g1, g2]) * scale,)

    return _track("contrastive_loss", result, (embeddings,), vjp)
