"""Bump-region Chamfer of SMEM vs constant-scale extraction for a trained field.

    python3 scripts/smem_vs_constant.py --checkpoint runs/multiscale/aware_seed0/field.ckpt
"""

import argparse

from snsr.checkpoint import load_checkpoint
from snsr.experiments import analytic_patch_mesh, patch_extractions
from snsr.shapes import make_shape


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--shape", default="bumpy_sphere")
    ap.add_argument("--resolution", type=int, default=96, help="vertices per axis over the patch box")
    ap.add_argument("--unit-size", type=int, default=12)
    ap.add_argument("--n-constant", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    field, _ = load_checkpoint(args.checkpoint)
    shape = make_shape(args.shape)
    scores = patch_extractions(field, shape, analytic_patch_mesh(shape), args.resolution, args.unit_size,
                               args.n_constant, args.seed)
    for name, cd in scores.items():
        print(f"{name:20s} {cd:.6f}")


if __name__ == "__main__":
    main()
