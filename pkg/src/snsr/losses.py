"""Training objectives: normal, mask, eikonal and cross-scale terms."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)

MASK_EPS = 1e-4


@dataclass
class LossTerms:
    normal: torch.Tensor
    mask: torch.Tensor
    eikonal: torch.Tensor
    csr: torch.Tensor
    csr_weight: float = 4.0
    skipped_rays: int = 0

    @property
    def total(self) -> torch.Tensor:
        return total_loss(self)

    def as_floats(self) -> dict[str, float]:
        return {
            "normal": float(self.normal.detach()), "mask": float(self.mask.detach()),
            "eikonal": float(self.eikonal.detach()),
            "csr": float(self.csr.detach()), "total": float(self.total.detach()),
        }


def normal_loss(rendered: torch.Tensor, truth: torch.Tensor, mask: torch.Tensor | None = None):
    """Mean L1 distance between unit-normalized rendered normals and the truth.

    Only foreground rays count. Rays whose rendered normal has zero length are
    skipped. Returns ``(loss, n_skipped)``.
    """
    if mask is not None:
        fg = mask > 0.5
        rendered, truth = rendered[fg], truth[fg]
    length = rendered.norm(dim=-1)
    ok = length > 1e-12
    skipped = int((~ok).sum())
    if skipped:
        log.warning("normal loss: skipped %d rays with zero-length rendered normal", skipped)
    if not bool(ok.any()):
        return rendered.sum() * 0.0, skipped
    unit = rendered[ok] / length[ok, None]
    return (unit - truth[ok]).abs().sum(-1).mean(), skipped


def mask_loss(opacity: torch.Tensor, mask: torch.Tensor, eps: float = MASK_EPS) -> torch.Tensor:
    """Binary cross-entropy between accumulated opacity and the silhouette mask."""
    m_hat = opacity.clamp(eps, 1 - eps)
    m = mask.to(m_hat.dtype)
    return -(m * torch.log(m_hat) + (1 - m) * torch.log(1 - m_hat)).mean()


def eikonal_loss(gradients: torch.Tensor) -> torch.Tensor:
    return ((gradients.reshape(-1, 3).norm(dim=-1) - 1) ** 2).mean()


def scale_variance(values: torch.Tensor) -> torch.Tensor:
    """Mean over points of the (biased) variance across the last axis."""
    return ((values - values.mean(dim=-1, keepdim=True)) ** 2).mean()


def csr_loss(field, points: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """Cross-scale regularizer: variance of f over S scales at each of K points.

    ``points`` is (K, 3), ``scales`` is (K, S).
    """
    k, s = scales.shape
    h, _ = field.hash(points)
    p_rep = points[:, None, :].expand(k, s, 3).reshape(-1, 3)
    h_rep = h[:, None, :].expand(k, s, h.shape[-1]).reshape(k * s, -1)
    f, _ = field.decode(p_rep, h_rep, scales.reshape(-1))
    return scale_variance(f.view(k, s))


def total_loss(terms: LossTerms) -> torch.Tensor:
    for name in ("normal", "mask", "eikonal", "csr"):
        v = getattr(terms, name)
        if not math.isfinite(float(v.detach())):
            raise FloatingPointError(f"loss term {name!r} is not finite ({float(v.detach())})")
    return terms.normal + terms.mask + terms.eikonal + terms.csr_weight * terms.csr
