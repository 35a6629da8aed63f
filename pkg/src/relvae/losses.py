"""The four training loss terms and their weighted total.

All functions accept autodiff Tensors (differentiable path) or plain
arrays (they get wrapped), and return scalar Tensors. Entity pairs are
batched as [B, 2, ...].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

__all__ = [
    "LossWeights", "LossBreakdown",
    "cosine_loss", "bbox_heatmap_loss", "mse_loss", "kl_loss", "total_loss",
    "BCE_EPS", "NORM_EPS",
]

BCE_EPS = 1e-6
NORM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """alpha scales the cosine term, beta the KL term; the rest are unweighted."""

    alpha: float = 10.0
    beta: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("loss weights must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    l_cos: float
    l_bbox: float
    l_mse: float
    l_kl: float
    total: float
    n: int

    @classmethod
    def from_parts(cls, l_cos: float, l_bbox: float, l_mse: float, l_kl: float,
                   weights: LossWeights, n: int) -> "LossBreakdown":
        total = weights.alpha * l_cos + l_mse + l_bbox + weights.beta * l_kl
        return cls(l_cos=l_cos, l_bbox=l_bbox, l_mse=l_mse, l_kl=l_kl, total=total, n=n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def cosine_loss(y_sem, y_hat) -> Tensor:
    """Mean over batch and entities of 1 - cos(y, y_hat).

    Targets must be nonzero; a zero-norm prediction contributes distance
    1 through the epsilon guard on the norms.
    """
    y = _as_tensor(y_sem)
    yh = _as_tensor(y_hat)
    if y.shape != yh.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yh.shape}")
    target_norms = np.sqrt((y.data ** 2).sum(axis=-1))
    if np.any(target_norms == 0.0):
        raise ValueError("zero-norm target embedding")
    ny = (y * y).sum(axis=-1).sqrt().clip(NORM_EPS, None)
    nyh = (yh * yh).sum(axis=-1).sqrt().clip(NORM_EPS, None)
    cos = (y * yh).sum(axis=-1) / (ny * nyh)
    return (1.0 - cos).mean()


def bbox_heatmap_loss(heatmaps, masks) -> Tensor:
    """Elementwise binary cross-entropy between heatmap rows and binary masks.

    Heatmap values are clamped to [eps, 1-eps] before the logs; the mean
    runs over cells, entities, and batch.
    """
    h = _as_tensor(heatmaps)
    m = _as_tensor(masks)
    if h.shape != m.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {m.shape}")
    hc = h.clip(BCE_EPS, 1.0 - BCE_EPS)
    mt = Tensor(np.asarray(m.data, dtype=hc.data.dtype))
    bce = -(mt * hc.log() + (1.0 - mt) * (1.0 - hc).log())
    return bce.mean()


def mse_loss(y_vis, y_hat_vis) -> Tensor:
    """Mean over batch/entities of the squared L2 distance (summed over channels).

    Targets are treated as constants: pass them detached (the trainer
    does), so no gradient flows into the encoder-side features.
    """
    y = _as_tensor(y_vis)
    yh = _as_tensor(y_hat_vis)
    if y.shape != yh.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yh.shape}")
    diff = yh - y.detach()
    sq = (diff * diff).sum(axis=-1)
    return sq.mean()


def kl_loss(mu, logvar) -> Tensor:
    """Mean over batch of KL(q || N(0, I)) in closed form."""
    m = _as_tensor(mu)
    lv = _as_tensor(logvar)
    if m.shape != lv.shape:
        raise ValueError(f"shape mismatch {m.shape} vs {lv.shape}")
    per_item = 0.5 * (lv.exp() + m * m - 1.0 - lv).sum(axis=-1)
    return per_item.mean()


def total_loss(l_cos: Tensor, l_bbox: Tensor, l_mse: Tensor, l_kl: Tensor,
               weights: LossWeights) -> Tensor:
    """Weighted sum: alpha*cos + mse + bbox + beta*kl (only cos and KL weighted)."""
    return weights.alpha * l_cos + l_mse + l_bbox + weights.beta * l_kl
