"""Command line interface: generate, train, extract, render, eval."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("snsr")


def _seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def cmd_generate(args) -> int:
    from .scene import generate_synthetic_scene, save_dataset

    ds = generate_synthetic_scene(
        args.shape, args.regular, args.closeup, args.resolution, args.supersampling,
        n_test_regular=args.test_regular, n_test_closeup=args.test_closeup,
        regular_distance=args.distance, closeup_factor=args.closeup_factor,
    )
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.views)} views to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .scene import load_dataset
    from .train import TrainConfig, load_config, parse_config, train

    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = list(args.set or [])
    if args.iterations is not None:
        overrides.append(f"iterations = {args.iterations}")
    overrides.append(f"seed = {args.seed}")
    cfg = parse_config("\n".join(overrides), cfg)
    ds = load_dataset(args.data)
    result = train(ds, cfg, args.out, progress=lambda r: print(
        f"it {r['iteration']:>6}  total {r['total']:.5f}  normal {r['normal']:.5f}  mae {r['mae']:.3f} deg"))
    print(f"trained {cfg.iterations} iterations in {result.seconds:.1f} s; checkpoint {Path(args.out) / 'field.ckpt'}")
    return 0


def cmd_extract(args) -> int:
    from .checkpoint import load_checkpoint
    from .mesh import extract_mesh, save_mesh, save_ply, scale_colors

    field_, _ = load_checkpoint(args.checkpoint)
    if args.scale_mode == "constant" and args.scale is None:
        raise ValueError("--scale-mode constant needs --scale")
    mesh, assignment = extract_mesh(field_, args.resolution, args.unit_size, args.scale_mode, args.scale,
                                    args.bounds[0], args.bounds[1])
    out = Path(args.out)
    fmt = args.format or (out.suffix.lstrip(".") or "ply")
    save_mesh(mesh, out, fmt)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {out}")
    if args.scale_colors:
        s_min, s_max = field_.scale_range
        colors = scale_colors(mesh.vertex_scale, s_min, s_max) if len(mesh.vertices) else None
        save_ply(mesh, args.scale_colors, colors)
        print(f"wrote scale visualization to {args.scale_colors}")
    bins = np.bincount(assignment.index.ravel(), minlength=field_.triplane.scale_resolution)
    print("units per scale bin: " + " ".join(str(int(b)) for b in bins))
    return 0


def _write_preview(path: Path, normals: np.ndarray) -> None:
    rgb = np.clip(np.round((normals + 1) * 127.5), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def cmd_render(args) -> int:
    from .cameras import load_cameras
    from .checkpoint import load_checkpoint
    from .evaluate import render_normal_map
    from .scene import write_float_image, write_mask

    field_, _ = load_checkpoint(args.checkpoint)
    cams = load_cameras(args.cameras)
    if args.view is not None:
        picked = [c for i, c in enumerate(cams) if c.name == args.view or str(i) == args.view]
        if not picked:
            raise ValueError(f"no camera named {args.view!r} in {args.cameras}")
        cams = picked
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        name = cam.name or f"view{i:03d}"
        normals, opacity = render_normal_map(field_, cam, args.samples)
        write_float_image(out / f"{name}.nrm", normals.astype(np.float32))
        write_mask(out / f"{name}_mask.pgm", opacity > 0.5)
        _write_preview(out / f"{name}.ppm", normals)
        print(f"rendered {name} -> {out / (name + '.nrm')}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import evaluate
    from .mesh import load_mesh
    from .scene import load_dataset

    ds = load_dataset(args.data)
    field_ = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    mesh = load_mesh(args.mesh) if args.mesh else None
    gt = load_mesh(args.ground_truth) if args.ground_truth else None
    report = evaluate(field_, ds, gt, mesh=mesh, split=args.split, n_samples=args.samples,
                      chamfer_samples=args.chamfer_samples, seed=args.seed)
    report.write(args.out)
    print(report.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snsr", description="Scale-aware neural SDF reconstruction from normal maps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=0, help="seed for all random number generators")
        sp.set_defaults(func=fn)
        return sp

    g = add("generate", cmd_generate, "render a synthetic multi-distance normal-map dataset")
    g.add_argument("--shape", default="sphere", choices=["sphere", "torus", "box", "bumpy_sphere"])
    g.add_argument("--regular", type=int, default=16, help="regular training views")
    g.add_argument("--closeup", type=int, default=0, help="close-up training views")
    g.add_argument("--test-regular", type=int, default=4, help="held-out regular views")
    g.add_argument("--test-closeup", type=int, default=0, help="held-out close-up views")
    g.add_argument("--resolution", type=int, default=800, help="image width and height in pixels")
    g.add_argument("--supersampling", type=int, default=8, help="sub-pixel rays per axis")
    g.add_argument("--distance", type=float, default=3.0, help="camera distance of regular views")
    g.add_argument("--closeup-factor", type=float, default=4.0, help="how much closer close-ups are to the surface")
    g.add_argument("--out", required=True, help="output dataset directory")

    t = add("train", cmd_train, "train a field on a dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")
    t.add_argument("--iterations", type=int, help="override the iteration count")
    t.add_argument("--out", required=True, help="output directory (checkpoint, logs)")

    e = add("extract", cmd_extract, "extract a mesh from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True, help="mesh path (.obj or .ply)")
    e.add_argument("--format", choices=["obj", "ply"])
    e.add_argument("--resolution", type=int, default=512, help="grid vertices per axis")
    e.add_argument("--unit-size", type=int, default=64, help="grid vertices per unit per axis")
    e.add_argument("--scale-mode", choices=["smem", "constant"], default="smem")
    e.add_argument("--scale", type=float, help="scale used by --scale-mode constant")
    e.add_argument("--bounds", type=float, nargs=2, default=(-1.0, 1.0), metavar=("LO", "HI"))
    e.add_argument("--scale-colors", metavar="PLY", help="also write a PLY colored by selected scale")

    r = add("render", cmd_render, "render normal maps from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--cameras", required=True, help="camera file (cameras.txt of a dataset)")
    r.add_argument("--view", help="camera name or index (default: all)")
    r.add_argument("--samples", type=int, default=128, help="samples per ray")
    r.add_argument("--out", required=True, help="output directory")

    v = add("eval", cmd_eval, "evaluate a checkpoint and/or mesh on held-out views")
    v.add_argument("--data", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--mesh", help="extracted mesh for the Chamfer distance")
    v.add_argument("--ground-truth", help="ground-truth mesh (default: polygonized analytic shape)")
    v.add_argument("--split", default="test", choices=["train", "test"])
    v.add_argument("--samples", type=int, default=128)
    v.add_argument("--chamfer-samples", type=int, default=100_000)
    v.add_argument("--out", required=True, help="report directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _seed(args.seed)
    try:
        return args.func(args)
    except Exception as e:  # surfaced as a one-line error with exit status 1
        if args.verbose:
            log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
