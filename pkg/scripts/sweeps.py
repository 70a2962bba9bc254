"""Teacher-noise and mask-ratio sweeps on the toy config, one chart per swept parameter.

    python scripts/sweeps.py --out runs/sweeps --steps 2000
"""

import argparse
from pathlib import Path

from sddit.cli import run_sweep
from sddit.config import parse_config

ROOT = Path(__file__).resolve().parent.parent
GRIDS = {
    "teacher_sigma": [0.002, 0.05, 0.5, 5.0, "same_as_student"],
    "mask_ratio": [0.0, 0.2, 0.4, 0.6, 0.8, 0.9],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.yaml")
    ap.add_argument("--out", type=Path, default=Path("runs/sweeps"))
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--eval-samples", type=int, default=256)
    ap.add_argument("--only", choices=sorted(GRIDS), default=None)
    args = ap.parse_args()

    cfg = parse_config(args.config, {"total_steps": args.steps, "out_dir": str(args.out)})
    for param, values in GRIDS.items():
        if args.only and param != args.only:
            continue
        for r in run_sweep(cfg, param, values, args.out, args.eval_samples):
            print(f"{param}={r['value']}: fid={r['fid']:.4f} final_L_G={r['final_L_G']:.4f}")


if __name__ == "__main__":
    main()
