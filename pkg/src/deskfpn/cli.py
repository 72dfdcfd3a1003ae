"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, arguments or inputs),
2 runtime failure (divergence, failed gradient check, unexpected errors).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import VARIANTS, ConfigError, RunConfig, load_config, validate
from .data import DataSpec, generate_dataset
from .train import (CheckpointError, TrainingDiverged, ablate, evaluate, load_run, load_scenes,
                    train_detector, train_masks, train_rpn)

log = logging.getLogger("deskfpn")


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "variant", None) is not None:
        cfg.model.variant = args.variant
    if getattr(args, "steps", None) is not None:
        cfg.optim.steps = args.steps
        cfg.optim.decay_step = min(cfg.optim.decay_step, args.steps)
    return validate(cfg)


def _data_spec(cfg: RunConfig) -> DataSpec:
    d = cfg.data
    return DataSpec(d.image_size, d.min_size, d.max_size, d.min_objects, d.max_objects)


def _split(path: str, name: str) -> Path:
    p = Path(path)
    if (p / name / "annotations.txt").exists():
        return p / name
    if (p / "annotations.txt").exists():
        return p
    raise ConfigError(f"no dataset found at {p} (expected {p / name} or annotations.txt)")


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    spec = _data_spec(cfg)
    out = Path(args.out)
    n_train = cfg.data.train_images if args.n_train is None else args.n_train
    n_eval = cfg.data.eval_images if args.n_eval is None else args.n_eval
    generate_dataset(out / "train", n_train, cfg.seed, spec)
    # eval scenes come from a disjoint seed stream
    generate_dataset(out / "eval", n_eval, cfg.seed + 1_000_003, spec)
    print(f"wrote {n_train} train and {n_eval} eval images to {out}")


def cmd_train_rpn(args) -> None:
    cfg = _config(args)
    scenes = load_scenes(_split(args.data, "train"))
    resume = load_run(args.resume)[1] if args.resume else None
    res = train_rpn(cfg, scenes, args.out, resume=resume, log_every=args.log_every)
    print(f"rpn checkpoint: {res.checkpoint} (final loss {res.losses[-1]:.4f})" if res.losses else
          f"rpn checkpoint: {res.checkpoint}")


def cmd_train_det(args) -> None:
    cfg = _config(args)
    scenes = load_scenes(_split(args.data, "train"))
    _, rpn_weights = load_run(args.rpn)
    resume = load_run(args.resume)[1] if args.resume else None
    res = train_detector(cfg, scenes, rpn_weights, args.out, resume=resume, log_every=args.log_every)
    print(f"detection checkpoint: {res.checkpoint}")


def cmd_train_mask(args) -> None:
    cfg = _config(args)
    scenes = load_scenes(_split(args.data, "train"))
    resume = load_run(args.resume)[1] if args.resume else None
    res = train_masks(cfg, scenes, args.out, resume=resume, log_every=args.log_every)
    print(f"mask checkpoint: {res.checkpoint}")


def _print_table(rows: dict[str, dict[str, float]]) -> None:
    keys = list(next(iter(rows.values())).keys())
    print("run".ljust(14) + "".join(k.rjust(10) for k in keys))
    for name, m in rows.items():
        print(name.ljust(14) + "".join(f"{m[k]:10.4f}" for k in keys))


def cmd_eval(args) -> None:
    scenes = load_scenes(_split(args.data, "eval"))
    cfg = load_config(args.config) if args.config else None
    metrics = evaluate(args.checkpoint, scenes, args.task, args.out, cfg)
    _print_table({args.task: metrics})
    if args.out:
        print(f"report: {Path(args.out) / 'metrics.txt'}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    data = Path(args.data) if args.data else Path(args.out) / "data"
    if not (data / "train" / "annotations.txt").exists():
        spec = _data_spec(cfg)
        generate_dataset(data / "train", cfg.data.train_images, cfg.seed, spec)
        generate_dataset(data / "eval", cfg.data.eval_images, cfg.seed + 1_000_003, spec)
    results = ablate(cfg, load_scenes(data / "train"), load_scenes(data / "eval"), args.out)
    _print_table(results)


def composed_grad_check(seed: int = 0, max_coords: int = 40) -> float:
    """Finite-difference check through backbone -> FPN -> shared RPN head at float64."""
    from .models import ProposalNet

    with T.default_dtype(np.float64):
        cfg = RunConfig(seed=seed)
        cfg.backbone.stem_channels = 4
        cfg.backbone.stage_channels = [4, 4, 8, 8]
        cfg.model.d = 8
        cfg.model.with_p6 = False
        net = ProposalNet(cfg)
        rng = np.random.default_rng(seed)
        image = T.Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))
        logits, deltas = net(image)
        wl = rng.standard_normal(logits.shape)
        wd = rng.standard_normal(deltas.shape)

        def f():
            lg, dl = net(image)
            return T.add(T.sum(T.mul(lg, T.Tensor(wl))), T.sum(T.mul(dl, T.Tensor(wd))))

        tensors = [image] + [p for _, p in net.named_parameters()]
        return T.grad_check(f, tensors, eps=1e-6, max_coords=max_coords, seed=seed)


def cmd_grad_check(args) -> int:
    err = composed_grad_check(args.seed or 0)
    print(f"max relative error: {err:.3e}")
    return 0 if err < 1e-4 else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskfpn", description="Feature pyramid detectors at desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", help="key = value run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--variant", choices=VARIANTS)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    common(g, data=False)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-eval", type=int)
    g.set_defaults(func=cmd_gen_data)

    for name, fn in (("train-rpn", cmd_train_rpn), ("train-det", cmd_train_det), ("train-mask", cmd_train_mask)):
        t = sub.add_parser(name)
        common(t)
        t.add_argument("--steps", type=int)
        t.add_argument("--resume", help="checkpoint to continue from")
        t.add_argument("--log-every", type=int, default=50)
        if name == "train-det":
            t.add_argument("--rpn", required=True, help="trained rpn checkpoint")
        t.set_defaults(func=fn)

    e = sub.add_parser("eval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--task", choices=("proposals", "detection", "masks"), required=True)
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every pyramid and single-map variant")
    common(a, data=False)
    a.add_argument("--data", help="dataset directory (generated under --out if missing)")
    a.add_argument("--steps", type=int)
    a.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("grad-check", help="finite-difference check of the composed network")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
        return rc or 0
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
