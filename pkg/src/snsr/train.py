"""Training loop for the scale-aware SDF."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cameras import ray_table
from .checkpoint import save_checkpoint
from .field import FieldConfig, ScaleField
from .losses import LossTerms, csr_loss, eikonal_loss, mask_loss, normal_loss
from .render import RayBundle, render_bundle, render_rays
from .scene import SceneDataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "normal", "mask", "eikonal", "csr", "total", "wall_clock", "mae")


@dataclass
class TrainConfig:
    iterations: int = 70_000
    rays: int = 128
    samples: int = 32  # per ray; rays * samples = 4096 points per iteration
    lr: float = 5e-3
    lr_final: float = 5e-4  # cosine decay target
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    csr_weight: float = 4.0
    csr_points: int = 4096
    csr_scales: int = 128
    eval_every: int = 1000
    checkpoint_every: int = 10_000
    eval_rays: int = 4096  # held-out foreground pixels used for the logged MAE
    eval_samples: int = 128
    seed: int = 0
    freeze_triplane: bool = False  # scale-blind ablation: planes stay at zero
    constant_scale: float | None = None  # replace every sample's scale by this value
    scale_margin: float = 1.1
    init_radius: float = 0.5
    threads: int = 0  # 0 keeps torch's default
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        for name in ("rays", "samples", "csr_points", "csr_scales", "eval_every", "checkpoint_every",
                     "eval_rays", "eval_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.samples < 2:
            raise ValueError("need at least 2 samples per ray")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.csr_weight < 0:
            raise ValueError("csr_weight must be non-negative")
        if not (self.lr > 0 and self.lr_final > 0):
            raise ValueError("learning rates must be positive")

    def learning_rate(self, it: int) -> float:
        if self.iterations <= 1:
            return self.lr
        c = 0.5 * (1 + math.cos(math.pi * it / (self.iterations - 1)))
        return self.lr_final + (self.lr - self.lr_final) * c

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "field" in d and isinstance(d["field"], dict):
            d["field"] = FieldConfig.from_dict(d["field"])
        return cls(**d)


# ---------------------------------------------------------------------------
# key = value config files


def _flat_fields(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            yield from _flat_fields(v, prefix + f.name + ".")
        else:
            yield prefix + f.name, f, v


def _parse_value(text: str, f: dataclasses.Field, owner):
    hints = typing.get_type_hints(type(owner))
    tp = hints[f.name]
    args = typing.get_args(tp)
    if type(None) in args:
        if text.lower() == "none":
            return None
        tp = next(a for a in args if a is not type(None))
    if tp is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if tp is int:
        return int(text.replace("_", ""))
    if tp is float:
        return float(text)
    return text


def format_config(cfg: TrainConfig) -> str:
    """Config file text: one ``key = value`` per field; nested fields use dotted keys."""
    lines = ["# snsr training config v1"]
    for key, _, v in _flat_fields(cfg):
        lines.append(f"{key} = {'none' if v is None else v!r}".replace("'", ""))
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``key = value`` lines (``#`` comments, blank lines allowed) over ``base``."""
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    cfg.field = FieldConfig.from_dict(cfg.field.to_dict())
    known = {key: (f, v) for key, f, v in _flat_fields(cfg)}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        owner = cfg
        *path, leaf = key.split(".")
        for part in path:
            owner = getattr(owner, part)
        f = known[key][0]
        try:
            setattr(owner, leaf, _parse_value(value, f, owner))
        except ValueError as e:
            raise ValueError(f"config line {n}: bad value for {key}: {e}") from None
    cfg.__post_init__()
    return cfg


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(format_config(cfg))


# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, reason: str, checkpoint: Path | None):
        super().__init__(f"training diverged at iteration {iteration}: {reason}"
                         + (f"; last good state saved to {checkpoint}" if checkpoint else ""))
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    field: ScaleField
    trace: list[dict]  # per-iteration loss terms
    log: list[dict]  # eval-cadence rows (LOG_COLUMNS)
    config: TrainConfig
    seconds: float = 0.0

    def loss_array(self, key: str = "total") -> np.ndarray:
        return np.array([r[key] for r in self.trace])


def build_field(dataset: SceneDataset, cfg: TrainConfig) -> ScaleField:
    torch.manual_seed(cfg.seed)
    fcfg = FieldConfig.from_dict(cfg.field.to_dict())
    s_min, s_max = dataset.scale_range(cfg.scale_margin)
    fcfg.s_min, fcfg.s_max = s_min, s_max
    field_ = ScaleField(fcfg)
    field_.geometric_init(cfg.init_radius, generator=torch.Generator().manual_seed(cfg.seed))
    return field_


def _eval_rays(dataset: SceneDataset, cfg: TrainConfig):
    views = dataset.select(split="test") or dataset.select(split="train")
    rays = ray_table([v.camera for v in views], [v.normals for v in views], [v.mask for v in views])
    fg = torch.nonzero(rays.masks > 0.5).squeeze(-1)
    if len(fg) > cfg.eval_rays:
        g = torch.Generator().manual_seed(cfg.seed + 1)
        fg = fg[torch.randperm(len(fg), generator=g)[:cfg.eval_rays]].sort().values
    return rays.subset(fg)


def ray_mae(field_: ScaleField, rays, n_samples: int, constant_scale=None) -> float:
    """Mean angular error (degrees) of rendered normals over the given rays."""
    if len(rays) == 0:
        return float("nan")
    if constant_scale is not None:
        pred, _ = render_rays(_ConstantScale(field_, constant_scale), rays, n_samples)
    else:
        pred, _ = render_rays(field_, rays, n_samples)
    truth = rays.normals.double().numpy()
    norm = np.linalg.norm(pred, axis=-1, keepdims=True)
    pred = pred / np.maximum(norm, 1e-30)
    cos = np.clip((pred * truth).sum(-1), -1, 1)
    return float(np.degrees(np.arccos(cos)).mean())


class _ConstantScale(torch.nn.Module):
    """View of a field whose scale input is fixed."""

    def __init__(self, inner: ScaleField, scale: float):
        super().__init__()
        self.inner = inner
        self.scale = scale

    @property
    def sharpness(self):
        return self.inner.sharpness

    def forward(self, p, s, gradient=True):
        return self.inner(p, torch.full_like(s, self.scale), gradient)


def train(dataset: SceneDataset, cfg: TrainConfig, out_dir=None, field_: ScaleField | None = None,
          progress=None) -> TrainResult:
    """Optimize a field on the training views of ``dataset``.

    With ``out_dir`` set, writes ``train_log.csv``, ``config.txt`` and
    checkpoints there. Runs are deterministic for a fixed config.
    """
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.txt")
    train_views = dataset.select(split="train")
    if not train_views:
        raise ValueError("dataset has no training views")
    field_ = field_ if field_ is not None else build_field(dataset, cfg)
    dtype = field_.hidden.weight.dtype
    rays = ray_table([v.camera for v in train_views], [v.normals for v in train_views],
                     [v.mask for v in train_views], dtype=dtype)
    eval_rays = _eval_rays(dataset, cfg)

    if cfg.freeze_triplane:
        with torch.no_grad():
            field_.triplane.planes.zero_()
        field_.triplane.planes.requires_grad_(False)
    params = [p for p in field_.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                           fused=dtype in (torch.float32, torch.float64))
    gen = torch.Generator().manual_seed(cfg.seed)
    s_min, s_max = field_.scale_range
    use_csr = cfg.csr_weight > 0 and not cfg.freeze_triplane

    trace, rows = [], []
    good_state = {k: v.clone() for k, v in field_.state_dict().items()}
    t0 = time.perf_counter()
    csv_fh = open(out / "train_log.csv", "w", newline="") if out is not None else None
    writer = csv.writer(csv_fh) if csv_fh else None
    if writer:
        writer.writerow(LOG_COLUMNS)

    def diverge(it, reason):
        ckpt = None
        if out is not None:
            field_.load_state_dict(good_state)
            ckpt = out / "last_good.ckpt"
            save_checkpoint(field_, ckpt, {"iteration": it, "config": cfg.to_dict(), "diverged": reason})
        if csv_fh:
            csv_fh.close()
        raise TrainingDiverged(it, reason, ckpt)

    try:
        for it in range(cfg.iterations):
            for group in opt.param_groups:
                group["lr"] = cfg.learning_rate(it)
            idx = torch.randint(len(rays), (cfg.rays,), generator=gen)
            batch = rays.subset(idx)
            bundle = RayBundle.from_rays(batch, cfg.samples, gen)
            if cfg.constant_scale is not None:
                bundle.scales = torch.full_like(bundle.scales, cfg.constant_scale)
            try:
                rendered = render_bundle(field_, bundle)
                l_normal, skipped = normal_loss(rendered.normal, batch.normals, batch.masks)
                l_mask = mask_loss(rendered.opacity, batch.masks)
                l_eik = eikonal_loss(rendered.gradients)
                if use_csr:
                    pool = bundle.points.reshape(-1, 3)
                    pick = torch.randint(len(pool), (cfg.csr_points,), generator=gen)
                    scales = s_min + (s_max - s_min) * torch.rand(cfg.csr_points, cfg.csr_scales,
                                                                  generator=gen, dtype=dtype)
                    l_csr = csr_loss(field_, pool[pick].detach(), scales)
                else:
                    l_csr = torch.zeros((), dtype=dtype)
                terms = LossTerms(l_normal, l_mask, l_eik, l_csr, cfg.csr_weight, skipped)
                total = terms.total
            except FloatingPointError as e:
                diverge(it, str(e))
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            row = terms.as_floats()
            row["iteration"] = it
            trace.append(row)
            last = it + 1 == cfg.iterations
            if (it + 1) % cfg.eval_every == 0 or last:
                if not all(bool(torch.isfinite(p).all()) for p in params):
                    diverge(it, f"non-finite parameters; {field_.diagnostics()}")
                try:
                    mae = ray_mae(field_, eval_rays, cfg.eval_samples, cfg.constant_scale)
                except FloatingPointError as e:
                    diverge(it, str(e))
                good_state = {k: v.clone() for k, v in field_.state_dict().items()}
                rec = {**{k: row[k] for k in ("normal", "mask", "eikonal", "csr", "total")},
                       "iteration": it + 1, "wall_clock": time.perf_counter() - t0, "mae": mae}
                rows.append(rec)
                log.info("it %d total %.4g normal %.4g mae %.3f", it + 1, rec["total"], rec["normal"], mae)
                if writer:
                    writer.writerow([rec[c] for c in LOG_COLUMNS])
                    csv_fh.flush()
                if progress:
                    progress(rec)
            if out is not None and ((it + 1) % cfg.checkpoint_every == 0 or last):
                save_checkpoint(field_, out / "field.ckpt", {"iteration": it + 1, "config": cfg.to_dict()})
    finally:
        if csv_fh and not csv_fh.closed:
            csv_fh.close()
    if out is not None and cfg.iterations == 0:
        save_checkpoint(field_, out / "field.ckpt", {"iteration": 0, "config": cfg.to_dict()})
    if out is not None:
        with open(out / "loss_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("iteration", "normal", "mask", "eikonal", "csr", "total"))
            for r in trace:
                w.writerow([r["iteration"]] + [repr(r[k]) for k in ("normal", "mask", "eikonal", "csr", "total")])
    return TrainResult(field_, trace, rows, cfg, time.perf_counter() - t0)
