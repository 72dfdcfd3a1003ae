"""Train and evaluate every single-map and pyramid variant (rows a-f).

    python3 scripts/run_ablation.py --config configs/desk.cfg --out runs/ablation [--steps N]
"""
import argparse
import sys

from deskfpn.config import load_config
from deskfpn.experiments import ensure_dataset
from deskfpn.train import ABLATION_ROWS, ablate, load_scenes


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/desk.cfg")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--steps", type=int)
    p.add_argument("--rows", default="abcdef", help="subset of rows to run, e.g. 'ac'")
    args = p.parse_args(argv)
    cfg = load_config(args.config)
    train_dir, eval_dir = ensure_dataset(cfg, f"{args.out}/data")
    rows = [r for r in ABLATION_ROWS if r[0] in args.rows]
    res = ablate(cfg, load_scenes(train_dir), load_scenes(eval_dir), args.out, rows, args.steps)
    keys = ["AR100", "AR1k", "AR1k_s", "AR1k_m", "AR1k_l"]
    print("row".ljust(14) + "".join(k.rjust(10) for k in keys))
    for name, m in res.items():
        print(name.ljust(14) + "".join(f"{m[k]:10.4f}" for k in keys))
    return 0


if __name__ == "__main__":
    sys.exit(main())
