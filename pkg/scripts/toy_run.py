"""Train the two-texture toy model, then plot curves, write sample grids and check class means.

    python scripts/toy_run.py --out runs/toy [--steps 2000] [--seed 0]
"""

import argparse
import json
import math
from pathlib import Path

import numpy as np

from sddit.config import parse_config
from sddit.data import load_dataset
from sddit.evaluation import emit_plots, fid_against_dataset, generate, save_grid
from sddit.training import run_training

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.yaml")
    ap.add_argument("--out", type=Path, default=Path("runs/toy"))
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--eval-interval", type=int, default=0, help="FID every N steps (0 = off)")
    args = ap.parse_args()

    overrides = {"out_dir": str(args.out), "eval_interval": args.eval_interval}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = parse_config(args.config, overrides)
    dataset = load_dataset(cfg.dataset, cfg.seed, cfg.model.input_size)
    state = run_training(cfg, dataset, out_dir=args.out)

    evals = []
    if (args.out / "eval.jsonl").exists():
        evals = [json.loads(line) for line in (args.out / "eval.jsonl").read_text().splitlines() if line]
    emit_plots(state.log, args.out / "plots", evals)

    l_g = [r["L_G"] for r in state.log]
    window = min(100, len(l_g))
    lead, trail = np.mean(l_g[:window]), np.mean(l_g[-window:])
    min_entropy = min((r["teacher_entropy"] for r in state.log if r["teacher_entropy"] is not None), default=math.nan)
    means = dataset.class_means()
    summary = {"steps": state.step, "L_G_lead": float(lead), "L_G_trail": float(trail),
               "min_teacher_entropy": float(min_entropy), "class_mean_dist": {}}
    for c, name in enumerate(dataset.class_names):
        samples = generate(state, c, 64, seed=123)
        save_grid(samples, args.out / "plots" / f"samples_{name}.png")
        m = samples.mean(0)
        summary["class_mean_dist"][name] = [float((m - means[j]).norm()) for j in range(len(means))]
    summary["fid_pixels"] = fid_against_dataset(state, dataset, 128, seed=cfg.seed)["fid"]
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
