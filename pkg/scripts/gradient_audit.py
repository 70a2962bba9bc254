"""Analytic vs central-difference gradients of L_G + L_D on the tiny double-precision config.

    python scripts/gradient_audit.py [--seed 0] [--per-tensor]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from audit import gradient_audit  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-tensor", action="store_true")
    args = ap.parse_args()
    result = gradient_audit(args.seed)
    if args.per_tensor:
        for name, err in sorted(result["per_tensor"].items(), key=lambda kv: -kv[1]):
            print(f"{err:10.2e}  {name}")
    print(f"parameters            {result['n_params']}")
    print(f"worst tensor rel err  {result['max_tensor_rel_err']:.2e}")
    print(f"global rel err        {result['global_rel_err']:.2e}")
    print(f"max |dL/d teacher|    {result['teacher_grad_max']}")
    print(f"max |dL_D/d decoder|  {result['decoder_LD_grad_max']}")


if __name__ == "__main__":
    main()
