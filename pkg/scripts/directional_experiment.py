"""FPN-RPN vs the single-map C4 baseline on the synthetic multi-octave data.

    python3 scripts/directional_experiment.py --config configs/desk.cfg --out runs/directional
"""
import argparse
import sys
import time

from deskfpn.config import load_config
from deskfpn.experiments import compare_variants


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/desk.cfg")
    p.add_argument("--out", default="runs/directional")
    p.add_argument("--data", help="existing dataset root with train/ and eval/")
    args = p.parse_args(argv)
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    res = compare_variants(cfg, args.out, ("fpn", "c4"), args.data)
    keys = ["AR100", "AR1k", "AR1k_s", "AR1k_m", "AR1k_l", "seconds"]
    print("variant".ljust(10) + "".join(k.rjust(10) for k in keys))
    for v, m in res.items():
        print(v.ljust(10) + "".join(f"{m[k]:10.4f}" for k in keys))
    gap = res["fpn"]["AR1k"] - res["c4"]["AR1k"]
    gap_s = res["fpn"]["AR1k_s"] - res["c4"]["AR1k_s"]
    print(f"AR1k gap {100 * gap:+.1f} points, AR1k_s gap {100 * gap_s:+.1f} points, "
          f"total {time.perf_counter() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
