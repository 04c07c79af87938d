"""Analytic test shapes and a batched sphere tracer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

PATCH_DIRECTION = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)


@dataclass
class AnalyticShape:
    name: str
    sdf: Callable[[torch.Tensor], torch.Tensor]
    bound_radius: float  # the surface lies inside this ball
    lipschitz: float = 1.0  # bound on |grad sdf|, limits sphere-tracing steps
    patch_center: np.ndarray | None = None  # surface point of the detail patch, if any
    patch_angle: float = 0.0  # angular radius (radians) of the patch around PATCH_DIRECTION

    def normals(self, p: torch.Tensor) -> torch.Tensor:
        """Unit gradients of the SDF (outward normals on the surface)."""
        with torch.enable_grad():
            q = p.detach().clone().requires_grad_(True)
            (g,) = torch.autograd.grad(self.sdf(q).sum(), q)
        return g / g.norm(dim=-1, keepdim=True).clamp_min(1e-30)

    def in_patch(self, p) -> np.ndarray:
        """Directions within the detail patch (all False for shapes without one)."""
        p = np.asarray(p, dtype=np.float64)
        if self.patch_center is None:
            return np.zeros(p.shape[:-1], dtype=bool)
        u = p / np.linalg.norm(p, axis=-1, keepdims=True)
        return u @ PATCH_DIRECTION >= math.cos(self.patch_angle)


def _smoothstep(e0, e1, x):
    t = ((x - e0) / (e1 - e0)).clamp(0, 1)
    return t * t * (3 - 2 * t)


def sphere(radius: float = 0.5) -> AnalyticShape:
    return AnalyticShape("sphere", lambda p: p.norm(dim=-1) - radius, bound_radius=radius + 0.02)


def torus(major: float = 0.45, minor: float = 0.15) -> AnalyticShape:
    def sdf(p):
        q = torch.stack([p[..., :2].norm(dim=-1) - major, p[..., 2]], -1)
        return q.norm(dim=-1) - minor

    return AnalyticShape("torus", sdf, bound_radius=major + minor + 0.02)


def box(half: float = 0.35, rounding: float = 0.05) -> AnalyticShape:
    def sdf(p):
        q = p.abs() - (half - rounding)
        return q.clamp_min(0).norm(dim=-1) + q.max(dim=-1).values.clamp_max(0) - rounding

    return AnalyticShape("box", sdf, bound_radius=half * math.sqrt(3) + 0.02)


def bumpy_sphere(radius: float = 0.5, amplitude: float = 0.005, wavelength: float = 0.025,
                 patch_deg: float = 20.0) -> AnalyticShape:
    """Sphere with a sinusoidal relief inside a cap around the (1, 1, 1) direction.

    The relief fades in over the outer 40% of the cap, so the surface is smooth.
    """
    freq = 2 * math.pi * radius / wavelength  # radians per unit of direction cosine
    c_out = math.cos(math.radians(patch_deg))
    c_in = math.cos(math.radians(0.6 * patch_deg))
    axis = torch.tensor(PATCH_DIRECTION)

    def sdf(p):
        r = p.norm(dim=-1)
        u = p / r.clamp_min(1e-9)[..., None]
        window = _smoothstep(c_out, c_in, u @ axis.to(p.dtype))
        relief = torch.sin(freq * u[..., 0]) * torch.sin(freq * u[..., 1]) * torch.sin(freq * u[..., 2])
        return r - radius - amplitude * window * relief

    # |d relief / dp| <= sqrt(3) * freq / r near the surface, plus the window slope
    lip = 1.0 + amplitude * (math.sqrt(3) * freq + 3.0 / (c_in - c_out)) / (0.8 * radius)
    return AnalyticShape("bumpy_sphere", sdf, bound_radius=radius + amplitude + 0.02, lipschitz=lip,
                         patch_center=PATCH_DIRECTION * radius, patch_angle=math.radians(patch_deg))


SHAPES = {"sphere": sphere, "torus": torus, "box": box, "bumpy_sphere": bumpy_sphere}


def make_shape(name: str, **kwargs) -> AnalyticShape:
    try:
        return SHAPES[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}") from None


def sphere_trace(shape: AnalyticShape, origins: torch.Tensor, dirs: torch.Tensor,
                 max_steps: int = 256, eps: float = 1e-5):
    """March unit-direction rays against ``shape``; returns (t, hit).

    Marching starts where the ray enters the bounding ball. Rays that leave the
    ball or do not converge within ``max_steps`` are misses.
    """
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - shape.bound_radius**2
    disc = b * b - c
    enters = disc > 0
    root = disc.clamp_min(0).sqrt()
    t = (-b - root).clamp_min(0)
    t_exit = -b + root
    hit = torch.zeros_like(enters)
    active = torch.nonzero(enters & (t_exit > 0)).squeeze(-1)
    for _ in range(max_steps):
        if active.numel() == 0:
            break
        ta = t[active]
        f = shape.sdf(origins[active] + ta[:, None] * dirs[active])
        done = f.abs() < eps
        hit[active[done]] = True
        ta = ta + f / shape.lipschitz
        t[active] = ta
        keep = ~done & (ta < t_exit[active])
        active = active[keep]
    return t, hit
