"""Volume rendering of normals from SDF samples along pixel cones."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .cameras import RayTable, sample_rays

ALPHA_EPS = 1e-7


@dataclass
class RayBundle:
    t: torch.Tensor  # (N, M)
    points: torch.Tensor  # (N, M, 3)
    scales: torch.Tensor  # (N, M)
    normals: torch.Tensor | None = None  # (N, 3) ground truth, world space
    masks: torch.Tensor | None = None  # (N,)

    @classmethod
    def from_rays(cls, rays: RayTable, n_samples: int, generator=None, jitter=True) -> "RayBundle":
        t, points, scales = sample_rays(rays, n_samples, generator, jitter)
        return cls(t, points, scales, rays.normals, rays.masks)


@dataclass
class RenderOutput:
    normal: torch.Tensor  # (N, 3), not normalized
    opacity: torch.Tensor  # (N,)
    weights: torch.Tensor  # (N, M)
    alpha: torch.Tensor  # (N, M)
    sdf: torch.Tensor  # (N, M)
    gradients: torch.Tensor  # (N, M, 3)


def sdf_to_alpha(f_k, f_next, sharpness):
    """Discrete opacity between consecutive samples; zero when the SDF increases."""
    phi_k = torch.sigmoid(f_k * sharpness)
    phi_next = torch.sigmoid(f_next * sharpness)
    return ((phi_k - phi_next) / phi_k.clamp_min(ALPHA_EPS)).clamp_min(0.0)


def composite(alpha: torch.Tensor, values: torch.Tensor):
    """Front-to-back compositing along the last sample axis.

    alpha (N, M), values (N, M, C) -> (composited (N, C), opacity (N,), weights (N, M)).
    """
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    weights = trans * alpha
    return (weights[..., None] * values).sum(-2), weights.sum(-1), weights


def render_bundle(field, bundle: RayBundle) -> RenderOutput:
    """Evaluate the field at every cone sample and composite its gradients.

    The last sample of a ray has no successor, so its opacity is zero.
    """
    n, m = bundle.t.shape
    f, g = field(bundle.points.reshape(-1, 3), bundle.scales.reshape(-1), gradient=True)
    f = f.view(n, m)
    g = g.view(n, m, 3)
    alpha = sdf_to_alpha(f[:, :-1], f[:, 1:], field.sharpness)
    alpha = torch.cat([alpha, torch.zeros_like(alpha[:, :1])], dim=1)
    normal, opacity, weights = composite(alpha, g)
    return RenderOutput(normal, opacity, weights, alpha, f, g)


@torch.no_grad()
def render_rays(field, rays: RayTable, n_samples: int, chunk: int = 2048):
    """Deterministic (mid-stratum) rendering of many rays; returns numpy (normals, opacity)."""
    normals, opacity = [], []
    for i in range(0, len(rays), chunk):
        sub = rays.subset(slice(i, i + chunk))
        out = render_bundle(field, RayBundle.from_rays(sub, n_samples, jitter=False))
        normals.append(out.normal.double().numpy())
        opacity.append(out.opacity.double().numpy())
    if not normals:
        return np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(normals), np.concatenate(opacity)


def weight_profile_table(bundle: RayBundle, out: RenderOutput, ray: int) -> str:
    """Plain-text table of one ray's samples: t, f, alpha, T, w."""
    t = bundle.t[ray].detach().double().numpy()
    f = out.sdf[ray].detach().double().numpy()
    a = out.alpha[ray].detach().double().numpy()
    w = out.weights[ray].detach().double().numpy()
    trans = np.concatenate([[1.0], np.cumprod(1 - a)[:-1]])
    rows = ["# t f alpha T w"]
    rows += [f"{ti:.8g} {fi:.8g} {ai:.8g} {Ti:.8g} {wi:.8g}" for ti, fi, ai, Ti, wi in zip(t, f, a, trans, w)]
    return "\n".join(rows) + "\n"


def dump_weight_profiles(path, bundle: RayBundle, out: RenderOutput, rays=None) -> None:
    rays = range(bundle.t.shape[0]) if rays is None else rays
    with open(Path(path), "w") as fh:
        for r in rays:
            fh.write(f"# ray {r}\n")
            fh.write(weight_profile_table(bundle, out, r))
