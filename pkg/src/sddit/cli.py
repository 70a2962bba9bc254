"""Command line: ``sddit {train,sample,eval-fid,sweep,plot}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, dump_config, parse_config, parse_overrides
from .data import load_dataset
from .evaluation import (
    emit_plots,
    fid_against_dataset,
    generate,
    plot_sweep,
    save_grid,
    save_images,
    write_fid_report,
)
from .training import load_checkpoint, read_metrics, run_training

SWEEP_ALIASES = {"teacher_sigma": "teacher_sigma_mode", "mask_ratio": "mask_ratio"}


def _load_cfg(args) -> RunConfig:
    overrides = parse_overrides(args.set or [])
    if getattr(args, "steps", None) is not None:
        overrides["total_steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    return parse_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    state = run_training(cfg, out_dir=cfg.out_dir, resume=args.resume)
    if state.log:
        last = state.log[-1]
        print(f"trained {state.step} steps; last L_G={last['L_G']:.4f} -> {cfg.out_dir}")
    else:
        print(f"nothing to do (total_steps={cfg.total_steps}) -> {cfg.out_dir}")
    return 0


def cmd_sample(args) -> int:
    state = load_checkpoint(args.ckpt)
    out = Path(args.out) if args.out else Path(args.ckpt).parent.parent / "samples"
    samples = generate(state, args.class_label, args.count, n_steps=args.n_steps, seed=args.seed)
    paths = save_images(samples, out, prefix=f"class{args.class_label}_seed{args.seed}")
    save_grid(samples, out / f"grid_class{args.class_label}_seed{args.seed}.png")
    print(f"wrote {len(paths)} images to {out}")
    return 0


def cmd_eval_fid(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = state.config
    dataset = load_dataset(cfg.dataset, cfg.seed, cfg.model.input_size)
    report = fid_against_dataset(state, dataset, args.count, seed=args.seed, n_steps=args.n_steps)
    out = Path(args.out) if args.out else Path(args.ckpt).parent.parent / "fid.json"
    write_fid_report(report, out)
    print(json.dumps(report))
    return 0


def _parse_sweep_value(raw: str):
    try:
        return float(raw)
    except ValueError:
        return raw.strip()


def run_sweep(cfg: RunConfig, param: str, values: list, out_root: Path, eval_samples: int | None = None) -> list[dict]:
    """Train and evaluate one run per value; writes ``sweep_<param>.json`` and ``sweep_<param>.png``."""
    key = SWEEP_ALIASES.get(param, param)
    sweep_dir = out_root / f"sweep_{param}"
    results = []
    for value in values:
        run_dir = sweep_dir / str(value)
        run_cfg = parse_config(None, {**_flatten(dataclasses.asdict(cfg)), key: value, "out_dir": str(run_dir)})
        dataset = load_dataset(run_cfg.dataset, run_cfg.seed, run_cfg.model.input_size)
        state = run_training(run_cfg, dataset, out_dir=run_dir)
        report = fid_against_dataset(state, dataset, eval_samples or run_cfg.eval_samples, seed=run_cfg.seed)
        write_fid_report(report, run_dir / "fid.json")
        tail = state.log[-100:]
        final_lg = sum(r["L_G"] for r in tail) / len(tail) if tail else float("nan")
        results.append({"value": value, "fid": report["fid"], "final_L_G": final_lg, "steps": state.step})
    sweep_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / f"sweep_{param}.json").write_text(json.dumps({"param": param, "results": results}, indent=2))
    plot_sweep(param, results, sweep_dir)
    return results


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            flat.update(_flatten(v, f"{prefix}{k}."))
        else:
            flat[prefix + k] = v
    return flat


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    values = [_parse_sweep_value(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValueError("--values is empty")
    out_root = Path(cfg.out_dir)
    dump_config(cfg, out_root / f"sweep_{args.param}" / "base_config.yaml")
    results = run_sweep(cfg, args.param, values, out_root, args.eval_samples)
    for r in results:
        print(f"{args.param}={r['value']}: fid={r['fid']:.4f} final_L_G={r['final_L_G']:.4f}")
    return 0


def cmd_plot(args) -> int:
    run = Path(args.run)
    metrics = read_metrics(run / "metrics.jsonl")
    evals = read_metrics(run / "eval.jsonl") if (run / "eval.jsonl").exists() else None
    sweeps = {}
    for f in sorted(run.glob("sweep_*/sweep_*.json")) + sorted(run.glob("sweep_*.json")):
        data = json.loads(f.read_text())
        sweeps[data["param"]] = data["results"]
    paths = emit_plots(metrics, Path(args.out) if args.out else run / "plots", evals, sweeps)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sddit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", type=Path, default=None, help="YAML run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--steps", type=int, default=None, help="override total_steps")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None, help="override out_dir")

    p = sub.add_parser("train", help="train a model")
    add_config_args(p)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--class", dest="class_label", type=int, required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-steps", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-fid", help="Frechet distance of samples vs the training data")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-steps", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval_fid)

    p = sub.add_parser("sweep", help="mask-ratio or teacher-noise grid")
    add_config_args(p)
    p.add_argument("--param", required=True, help="teacher_sigma, mask_ratio or a dotted config key")
    p.add_argument("--values", required=True, help="comma separated, e.g. 0.002,0.5,same_as_student")
    p.add_argument("--eval-samples", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="plot a run directory")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line cause, nonzero exit
        print(f"sddit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
