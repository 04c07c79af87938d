"""Scale-aware signed distance field.

A multi-resolution hash grid encodes position, a scale-triplane (three planes
spanned by one spatial axis and the scale axis) encodes position and scale
jointly, and a one-hidden-layer MLP decodes the concatenation
``[p, hash(p), triplane(p, s)]`` into an SDF value.

Spatial gradients are computed in closed form: every encoder returns its
Jacobian with respect to ``p`` and the MLP chain rule is applied explicitly.
The result is an ordinary differentiable torch expression, so losses on the
gradient backpropagate to the parameters (second-order terms included)
with a single reverse pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

_PRIMES = (1, 2654435761, 805459861)


@dataclass
class HashGridConfig:
    n_levels: int = 14
    features_per_level: int = 2
    log2_table_size: int = 19
    base_resolution: int = 16
    finest_resolution: int = 2048

    @property
    def width(self) -> int:
        return self.n_levels * self.features_per_level

    def resolutions(self) -> list[int]:
        if self.n_levels == 1:
            return [self.base_resolution]
        growth = math.exp(
            (math.log(self.finest_resolution) - math.log(self.base_resolution)) / (self.n_levels - 1)
        )
        res = [int(math.floor(self.base_resolution * growth**l + 1e-6)) for l in range(self.n_levels)]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"level resolutions must strictly increase, got {res}")
        return res


@dataclass
class FieldConfig:
    hash: HashGridConfig = field(default_factory=HashGridConfig)
    plane_resolution: int = 128
    scale_resolution: int = 32
    plane_features: int = 8
    hidden: int = 64
    s_min: float = 1e-3
    s_max: float = 1e-2

    @property
    def input_width(self) -> int:
        return 3 + self.hash.width + 3 * self.plane_features

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["hash"] = HashGridConfig(**d.get("hash", {}))
        return cls(**d)


class HashGrid(nn.Module):
    """Multi-resolution grid with trilinear lookup over [-1, 1]^3.

    Levels whose full vertex grid fits in the table are indexed densely;
    finer levels use the usual XOR-of-primes spatial hash. The table is stored
    as (features_per_level, entries) with the levels laid end to end.
    """

    def __init__(self, cfg: HashGridConfig):
        super().__init__()
        self.cfg = cfg
        res = cfg.resolutions()
        cap = 2**cfg.log2_table_size
        sizes = [min(cap, (r + 1) ** 3) for r in res]
        # resolutions increase, so the densely indexed levels form a prefix
        self.n_dense = sum((r + 1) ** 3 <= cap for r in res)
        self.cap = cap
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.resolutions = res
        self.register_buffer("res", torch.tensor(res, dtype=torch.int64), persistent=False)
        self.register_buffer("offsets", torch.tensor(offsets, dtype=torch.int64), persistent=False)
        self.table = nn.Parameter(torch.zeros(cfg.features_per_level, int(sum(sizes))))
        self.n_clamped = 0

    def corner_index(self, cell: torch.Tensor) -> torch.Tensor:
        """Table columns of the 8 cell corners; ``cell`` is (3, L, B) -> (L, 8, B).

        Corner c has offset (c & 1, c >> 1 & 1, c >> 2 & 1).
        """
        _, L, B = cell.shape
        ax = torch.stack([cell, cell + 1], 2)  # (3, L, 2, B)
        nd = self.n_dense
        parts = []
        if nd:
            d = ax[:, :nd]
            r1 = (self.res[:nd] + 1).view(-1, 1, 1)
            zy = d[2, :, :, None] * (r1 * r1)[..., None] + d[1, :, None, :] * r1[..., None]
            parts.append((zy[:, :, :, None] + d[0, :, None, None]).reshape(nd, 8, B))
        if nd < L:
            h = ax[:, nd:]
            zy = torch.bitwise_xor((h[2] * _PRIMES[2])[:, :, None], (h[1] * _PRIMES[1])[:, None, :])
            hashed = torch.bitwise_xor(zy[:, :, :, None], (h[0] * _PRIMES[0])[:, None, None]) & (self.cap - 1)
            parts.append(hashed.reshape(L - nd, 8, B))
        idx = parts[0] if len(parts) == 1 else torch.cat(parts, 0)
        return idx + self.offsets.view(-1, 1, 1)

    def forward(self, p: torch.Tensor, jacobian: bool = False):
        """Features (B, L*F) and optionally d features / d p as (B, L*F, 3)."""
        inside = (p >= -1) & (p <= 1)
        all_inside = bool(inside.all())
        if not all_inside:
            n_out = int((~inside.all(dim=-1)).sum())
            self.n_clamped += n_out
            log.debug("hash grid: clamped %d out-of-domain queries", n_out)
        B = p.shape[0]
        L = len(self.resolutions)
        x = (p.clamp(-1, 1).T + 1) * 0.5  # (3, B)
        res = self.res.to(p.dtype)
        scaled = x[:, None, :] * res[None, :, None]  # (3, L, B)
        cell = torch.minimum(scaled.floor(), (res - 1).view(1, -1, 1))
        w = scaled - cell
        idx = self.corner_index(cell.long())
        # Corner c = x + 2y + 4z; weights are an outer product of per-axis pairs.
        px, py, pz = torch.stack([1 - w, w], 2)  # each (L, 2, B)
        yx = py[:, :, None] * px[:, None]  # (L, 2y, 2x, B)
        weight = (pz[:, :, None, None] * yx[:, None]).reshape(L, 8, B)
        dweight = None
        if jacobian:
            zy = pz[:, :, None] * py[:, None]
            zx = pz[:, :, None] * px[:, None]
            dweight = torch.stack([
                torch.stack([-zy, zy], 3).reshape(L, 8, B),
                torch.stack([-zx, zx], 2).reshape(L, 8, B),
                torch.stack([-yx, yx], 1).reshape(L, 8, B),
            ])
        feats, jac = _Interp.apply(self.table, idx, weight, dweight, 0.5 * res)
        # (F, L, B) -> (B, L*F), level-major
        feats = feats.permute(2, 1, 0).reshape(B, -1)
        if jac is not None:
            jac = jac.permute(3, 1, 0, 2).reshape(B, -1, 3)
            if not all_inside:
                jac = jac * inside.to(p.dtype)[:, None, :]
        return feats, jac


class _Interp(torch.autograd.Function):
    """Weighted corner gather of the hash table.

    Returns features sum_c w_c T[idx_c] with shape (F, L, B) and, when corner
    weight derivatives are given, the Jacobian scale_l * sum_c dw_c T[idx_c]
    with shape (F, L, 3, B). Both are linear in the table, so the backward
    pass is one scatter-add; query positions receive no gradient.
    """

    @staticmethod
    def forward(ctx, table, idx, weight, dweight, scale):
        F = table.shape[0]
        vals = table[:, idx.reshape(-1)].view(F, *idx.shape)  # (F, L, 8, B)
        feats = (vals * weight).sum(2)
        jac = None
        if dweight is not None:
            jac = torch.stack([(vals * dweight[d]).sum(2) for d in range(3)], 2)
            jac = jac * scale.view(1, -1, 1, 1)
        ctx.save_for_backward(idx, weight, dweight if dweight is not None else weight.new_empty(0), scale)
        ctx.has_jac = dweight is not None
        ctx.table_shape = table.shape
        return feats, jac

    @staticmethod
    def backward(ctx, g_feats, g_jac):
        idx, weight, dweight, scale = ctx.saved_tensors
        gv = g_feats[:, :, None] * weight  # (F, L, 8, B)
        if ctx.has_jac and g_jac is not None:
            g_jac = g_jac * scale.view(1, -1, 1, 1)
            for d in range(3):
                gv = gv + g_jac[:, :, d, None] * dweight[d]
        grad = torch.zeros(ctx.table_shape, dtype=gv.dtype, device=gv.device)
        grad.index_add_(1, idx.reshape(-1), gv.reshape(ctx.table_shape[0], -1))
        return grad, None, None, None, None


class ScaleTriplane(nn.Module):
    """Three (position, scale) feature planes for the x, y and z axes.

    The spatial axis spans [-1, 1] with vertices at both ends; the scale axis is
    log-spaced over [s_min, s_max] and queries outside it are clamped.
    """

    def __init__(self, resolution: int = 128, scale_resolution: int = 32, features: int = 8,
                 s_min: float = 1e-3, s_max: float = 1e-2):
        super().__init__()
        if not 0 < s_min < s_max:
            raise ValueError(f"need 0 < s_min < s_max, got {s_min}, {s_max}")
        self.resolution = resolution
        self.scale_resolution = scale_resolution
        self.features = features
        self.planes = nn.Parameter(torch.zeros(3, resolution, scale_resolution, features))
        self.register_buffer("log_range", torch.tensor([math.log(s_min), math.log(s_max)], dtype=torch.float64))
        self.n_clamped = 0

    @property
    def s_min(self) -> float:
        return math.exp(float(self.log_range[0]))

    @property
    def s_max(self) -> float:
        return math.exp(float(self.log_range[1]))

    def set_scale_range(self, s_min: float, s_max: float) -> None:
        if not 0 < s_min < s_max:
            raise ValueError(f"need 0 < s_min < s_max, got {s_min}, {s_max}")
        self.log_range.copy_(torch.tensor([math.log(s_min), math.log(s_max)], dtype=torch.float64))

    def scale_bins(self) -> torch.Tensor:
        """Scale value at each vertex of the scale axis, finest first."""
        lo, hi = self.log_range.tolist()
        return torch.exp(torch.linspace(lo, hi, self.scale_resolution, dtype=torch.float64))

    def scale_coord(self, s: torch.Tensor) -> torch.Tensor:
        lo, hi = self.log_range.tolist()
        s = s.clamp_min(1e-30)
        v = (torch.log(s) - lo) / (hi - lo) * (self.scale_resolution - 1)
        out = (v < 0) | (v > self.scale_resolution - 1)
        if bool(out.any()):
            self.n_clamped += int(out.sum())
        return v.clamp(0, self.scale_resolution - 1)

    def forward(self, p: torch.Tensor, s: torch.Tensor, jacobian: bool = False):
        """Features (B, 3*C); with ``jacobian`` also (B, 3*C) derivatives of each
        plane's features with respect to that plane's spatial coordinate."""
        nx, ns, C = self.resolution, self.scale_resolution, self.features
        inside = (p >= -1) & (p <= 1)
        u = (p.clamp(-1, 1) + 1) * 0.5 * (nx - 1)  # (B, 3)
        v = self.scale_coord(s).to(p.dtype)[:, None].expand(-1, 3)
        i0 = u.floor().long().clamp(max=nx - 2)
        j0 = v.floor().long().clamp(max=ns - 2)
        wu = u - i0.to(p.dtype)
        wv = v - j0.to(p.dtype)
        base = torch.arange(3, device=p.device).view(1, 3) * (nx * ns) + i0 * ns + j0
        flat = self.planes.view(-1, C)
        p00 = flat[base]
        p01 = flat[base + 1]
        p10 = flat[base + ns]
        p11 = flat[base + ns + 1]
        wu_, wv_ = wu[..., None], wv[..., None]
        feats = (1 - wu_) * ((1 - wv_) * p00 + wv_ * p01) + wu_ * ((1 - wv_) * p10 + wv_ * p11)
        feats = feats.reshape(p.shape[0], 3 * C)
        if not jacobian:
            return feats, None
        du = (1 - wv_) * (p10 - p00) + wv_ * (p11 - p01)
        du = du * (0.5 * (nx - 1)) * inside.to(p.dtype)[..., None]
        return feats, du.reshape(p.shape[0], 3 * C)

    def axis_response(self, coords: torch.Tensor, axis: int) -> torch.Tensor:
        """Channel-summed features of plane ``axis`` at every scale vertex.

        ``coords`` are spatial coordinates along that axis, shape (B,); returns (B, scale_resolution).
        """
        nx = self.resolution
        u = (coords.clamp(-1, 1) + 1) * 0.5 * (nx - 1)
        i0 = u.floor().long().clamp(max=nx - 2)
        wu = (u - i0.to(u.dtype))[:, None]
        col = self.planes[axis].sum(dim=-1).to(u.dtype)  # (nx, ns)
        return (1 - wu) * col[i0] + wu * col[i0 + 1]


def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azim = math.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)], 1)


class ScaleField(nn.Module):
    """f(p, s): hash grid + scale-triplane features decoded by a tiny ReLU MLP."""

    def __init__(self, cfg: FieldConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or FieldConfig()
        self.hash = HashGrid(cfg.hash)
        self.triplane = ScaleTriplane(cfg.plane_resolution, cfg.scale_resolution,
                                      cfg.plane_features, cfg.s_min, cfg.s_max)
        self.hidden = nn.Linear(cfg.input_width, cfg.hidden)
        self.out = nn.Linear(cfg.hidden, 1)
        self.log_sharpness = nn.Parameter(torch.tensor(math.log(4 / 0.3)))

    @property
    def sharpness(self) -> torch.Tensor:
        return self.log_sharpness.exp()

    @property
    def scale_range(self) -> tuple[float, float]:
        return self.triplane.s_min, self.triplane.s_max

    def set_scale_range(self, s_min: float, s_max: float) -> None:
        self.cfg.s_min, self.cfg.s_max = float(s_min), float(s_max)
        self.triplane.set_scale_range(s_min, s_max)

    def decode(self, p, hash_feats, s, hash_jac=None, gradient=False):
        tri, tri_du = self.triplane(p, s, jacobian=gradient)
        x = torch.cat([p, hash_feats, tri], dim=-1)
        pre = self.hidden(x)
        f = self.out(torch.relu(pre)).squeeze(-1)
        if not gradient:
            return f, None
        # df/dx = W1^T (w2 * relu'(pre))
        dx = ((pre > 0).to(p.dtype) * self.out.weight[0]) @ self.hidden.weight
        nh = hash_feats.shape[-1]
        grad = dx[:, :3] + torch.einsum("bf,bfd->bd", dx[:, 3:3 + nh], hash_jac)
        C = self.triplane.features
        grad = grad + (dx[:, 3 + nh:] * tri_du).view(-1, 3, C).sum(-1)
        return f, grad

    def forward(self, p: torch.Tensor, s: torch.Tensor, gradient: bool = True):
        """SDF values (B,) and, if ``gradient``, exact d f / d p of shape (B, 3)."""
        h, hj = self.hash(p, jacobian=gradient)
        f, g = self.decode(p, h, s, hj, gradient)
        if not bool(torch.isfinite(f).all()):
            raise FloatingPointError(f"non-finite SDF output; {self.diagnostics()}")
        return f, g

    def sdf(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self(p, s, gradient=False)[0]

    def spatial_gradient(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self(p, s, gradient=True)[1]

    def diagnostics(self) -> str:
        parts = []
        for name, t in self.named_parameters():
            bad = int((~torch.isfinite(t)).sum())
            parts.append(f"{name}: max|.|={t.detach().abs().max().item():.3g}" + (f" NONFINITE={bad}" if bad else ""))
        return "; ".join(parts)

    @torch.no_grad()
    def geometric_init(self, r0: float = 0.5, transition_width: float = 0.3,
                       generator: torch.Generator | None = None) -> "ScaleField":
        """Reset parameters so that f(p, s) ~ |p| - r0.

        Hidden units see the position through evenly spread unit directions with
        zero bias; sum_i relu(d_i . p) is then proportional to |p| up to a few
        percent. Encoder columns of the first layer start small but non-zero so
        that both encoders receive gradient from the first step.
        """
        if not 0 < r0 < 1:
            raise ValueError("r0 must lie in (0, 1)")
        dt = self.hidden.weight.dtype
        nh = self.cfg.hidden
        dirs = torch.as_tensor(fibonacci_directions(nh), dtype=torch.float64)
        # Normalize so the mean radial slope is exactly 1.
        probe = torch.randn(20000, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        probe = probe / probe.norm(dim=1, keepdim=True)
        scale = 1.0 / torch.relu(probe @ dirs.T).sum(1).mean()
        self.hash.table.uniform_(-1e-4, 1e-4, generator=generator)
        self.triplane.planes.zero_()
        w = torch.empty(nh, self.cfg.input_width, dtype=dt)
        w.normal_(0.0, 1e-2, generator=generator)
        w[:, :3] = dirs.to(dt)
        self.hidden.weight.copy_(w)
        self.hidden.bias.zero_()
        self.out.weight.fill_(float(scale))
        self.out.bias.fill_(-r0)
        self.log_sharpness.fill_(math.log(4.0 / transition_width))
        return self
