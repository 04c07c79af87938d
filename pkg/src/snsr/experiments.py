"""Desk-scale experiment runners shared by ``scripts/`` and the acceptance suite.

The desk configuration shrinks the hash table (2^15 entries), the CSR batch
(1024 points x 16 scales) and the eval set so that a 5k-iteration run fits in
about ten minutes on one CPU core. Everything else keeps the library defaults.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .evaluate import ground_truth_mesh
from .field import FieldConfig, HashGridConfig, ScaleField
from .mesh import Mesh, chamfer_between, evaluate_grid, extract_mesh, marching_cubes, sample_surface
from .scene import SceneDataset, generate_synthetic_scene
from .shapes import PATCH_DIRECTION, AnalyticShape
from .train import TrainConfig, ray_mae, train
from .cameras import ray_table

DESK_FIELD = FieldConfig(hash=HashGridConfig(log2_table_size=15))


def desk_config(**overrides) -> TrainConfig:
    base = dict(iterations=5000, csr_points=1024, csr_scales=16, eval_every=1000, eval_rays=1024,
                checkpoint_every=5000, field=FieldConfig.from_dict(DESK_FIELD.to_dict()))
    base.update(overrides)
    return TrainConfig(**base)


def sphere_scene(resolution: int = 128, n_regular: int = 16, n_test: int = 4, supersampling: int = 8):
    return generate_synthetic_scene("sphere", n_regular=n_regular, resolution=resolution,
                                    supersampling=supersampling, n_test_regular=n_test)


def bumpy_scene(resolution: int = 128, n_regular: int = 16, n_closeup: int = 8, n_test_regular: int = 2,
                n_test_closeup: int = 4, supersampling: int = 4):
    """Regular ring plus close-ups of the relief patch: the two-scale scene."""
    return generate_synthetic_scene("bumpy_sphere", n_regular=n_regular, n_closeup=n_closeup,
                                    resolution=resolution, supersampling=supersampling,
                                    n_test_regular=n_test_regular, n_test_closeup=n_test_closeup)


# ---------------------------------------------------------------------------
# region helpers


def patch_bounds(shape: AnalyticShape, pad: float = 0.02):
    """Axis-aligned box around the detail patch (corner arrays lo, hi)."""
    if shape.patch_center is None:
        raise ValueError(f"shape {shape.name!r} has no detail patch")
    radius = float(np.linalg.norm(shape.patch_center))
    rng = np.random.default_rng(0)
    u = rng.standard_normal((20000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    cap = u[u @ PATCH_DIRECTION >= math.cos(shape.patch_angle)] * radius
    cap = np.concatenate([cap, PATCH_DIRECTION[None] * radius])
    return cap.min(0) - pad, cap.max(0) + pad


def patch_region(shape: AnalyticShape, shell: float = 0.05):
    """Points in the patch's cone of directions and within ``shell`` of the base radius."""
    radius = float(np.linalg.norm(shape.patch_center))

    def inside(p):
        p = np.asarray(p, dtype=np.float64)
        return shape.in_patch(p) & (np.abs(np.linalg.norm(p, axis=-1) - radius) < shell)

    return inside


def patch_chamfer(mesh: Mesh, reference: Mesh, shape: AnalyticShape, samples: int = 200_000, seed: int = 0):
    """Chamfer distance restricted to the detail patch."""
    return chamfer_between(mesh, reference, samples, seed, region=patch_region(shape))


def analytic_patch_mesh(shape: AnalyticShape, resolution: int = 192, pad: float = 0.02) -> Mesh:
    lo, hi = patch_bounds(shape, pad)
    return marching_cubes(evaluate_grid(lambda p, _: shape.sdf(p.double()).numpy(), resolution, lo, hi), lo, hi)


def probe_points(shape: AnalyticShape, n: int = 1000, seed: int = 0, jitter: float = 0.01) -> torch.Tensor:
    """Points scattered in a thin shell around the analytic surface."""
    gt = ground_truth_mesh(shape, 96)
    pts = sample_surface(gt, n, seed)
    rng = np.random.default_rng(seed + 1)
    pts = pts + rng.uniform(-jitter, jitter, (n, 1)) * pts / np.linalg.norm(pts, axis=1, keepdims=True)
    return torch.as_tensor(pts)


@torch.no_grad()
def scale_variance_at(field_: ScaleField, points: torch.Tensor, n_scales: int = 32) -> float:
    """Mean over points of the SDF variance across evenly log-spaced scales."""
    dtype = field_.hidden.weight.dtype
    s = field_.triplane.scale_bins().to(dtype)
    if n_scales != len(s):
        lo, hi = field_.scale_range
        s = torch.exp(torch.linspace(math.log(lo), math.log(hi), n_scales, dtype=torch.float64)).to(dtype)
    p = points.to(dtype)
    vals = field_.sdf(p.repeat_interleave(len(s), 0), s.repeat(len(p))).view(len(p), len(s))
    return float(vals.var(dim=1, unbiased=False).mean())


def heldout_mae(field_: ScaleField, dataset: SceneDataset, tag: str, n_samples: int = 64) -> float:
    """Mean angular error over every foreground pixel of the held-out views with ``tag``."""
    views = dataset.select(split="test", tag=tag)
    if not views:
        raise ValueError(f"no held-out {tag!r} views")
    errs, counts = [], []
    for v in views:
        rays = ray_table([v.camera], [v.normals], [v.mask], dtype=field_.hidden.weight.dtype)
        rays = rays.subset(torch.nonzero(rays.masks > 0.5).squeeze(-1))
        errs.append(ray_mae(field_, rays, n_samples))
        counts.append(len(rays))
    return float(np.average(errs, weights=counts))


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunSummary:
    seed: int
    train_seconds: float
    metrics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"seed": self.seed, "train_seconds": self.train_seconds, **self.metrics}


def sphere_run(dataset: SceneDataset, out_dir=None, seed: int = 0, iterations: int = 5000,
               extract_resolution: int = 128, unit_size: int = 16, progress=None):
    """Single-scale end-to-end run: train, extract, score. Returns (summary, field, mesh)."""
    cfg = desk_config(iterations=iterations, seed=seed)
    res = train(dataset, cfg, out_dir, progress=progress)
    t0 = time.perf_counter()
    mesh, _ = extract_mesh(res.field, extract_resolution, unit_size)
    extract_seconds = time.perf_counter() - t0
    gt = ground_truth_mesh(dataset.analytic_shape(), 256)
    summary = RunSummary(seed, res.seconds, {
        "chamfer": chamfer_between(mesh, gt, 100_000, seed) if not mesh.is_empty else float("inf"),
        "mae_heldout": heldout_mae(res.field, dataset, "regular"),
        "extract_seconds": extract_seconds,
        "final_normal_loss": res.log[-1]["normal"] if res.log else float("nan"),
    })
    return summary, res.field, mesh


def patch_extractions(field_: ScaleField, shape: AnalyticShape, reference: Mesh, resolution: int = 96,
                      unit_size: int = 12, n_constant: int = 10, seed: int = 0) -> dict:
    """Bump-region Chamfer of the SMEM mesh and of ``n_constant`` constant-scale meshes.

    Constant scales are evenly spaced over the field's scale range.
    """
    lo, hi = patch_bounds(shape)
    out = {}
    mesh, _ = extract_mesh(field_, resolution, unit_size, "smem", lo=lo, hi=hi)
    out["smem"] = patch_chamfer(mesh, reference, shape, seed=seed) if not mesh.is_empty else float("inf")
    s_lo, s_hi = field_.scale_range
    for s in np.linspace(s_lo, s_hi, n_constant):
        mesh, _ = extract_mesh(field_, resolution, unit_size, "constant", float(s), lo=lo, hi=hi)
        out[f"constant_{s:.6g}"] = patch_chamfer(mesh, reference, shape, seed=seed) if not mesh.is_empty \
            else float("inf")
    return out


def multiscale_runs(dataset: SceneDataset, seeds=(0, 1, 2), iterations: int = 3000, out_dir=None,
                    progress=None) -> list[dict]:
    """Scale-aware vs scale-blind vs no-CSR training on the two-scale scene, per seed.

    Each record holds held-out close-up MAE for the three arms, bump-region
    Chamfer for SMEM and constant-scale extraction (scale-aware arm), probe
    SDF variance across scales and full-mesh Chamfer for the CSR on/off arms.
    """
    shape = dataset.analytic_shape()
    patch_ref = analytic_patch_mesh(shape)
    full_ref = ground_truth_mesh(shape, 256)
    probes = probe_points(shape, 1000)
    records = []
    for seed in seeds:
        rec = {"seed": seed}
        arms = {"aware": {}, "blind": {"freeze_triplane": True}, "no_csr": {"csr_weight": 0.0}}
        for arm, kw in arms.items():
            cfg = desk_config(iterations=iterations, seed=seed, eval_every=iterations, **kw)
            sub = None if out_dir is None else Path(out_dir) / f"{arm}_seed{seed}"
            res = train(dataset, cfg, sub, progress=progress)
            rec[f"{arm}_seconds"] = res.seconds
            rec[f"{arm}_mae_closeup"] = heldout_mae(res.field, dataset, "closeup")
            rec[f"{arm}_mae_regular"] = heldout_mae(res.field, dataset, "regular")
            if arm in ("aware", "no_csr"):
                rec[f"{arm}_probe_variance"] = scale_variance_at(res.field, probes)
                mesh, _ = extract_mesh(res.field, 128, 16)
                rec[f"{arm}_chamfer"] = chamfer_between(mesh, full_ref, 100_000, seed)
            if arm == "aware":
                patch = patch_extractions(res.field, shape, patch_ref, seed=seed)
                rec["aware_patch_smem"] = patch.pop("smem")
                rec["aware_patch_constant"] = patch
        records.append(rec)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "records.json").write_text(json.dumps(records, indent=2))
    return records
