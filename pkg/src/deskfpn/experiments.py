"""Desk-scale experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

import dataclasses
import time
from pathlib import Path

from .config import RunConfig
from .data import DataSpec, generate_dataset, read_dataset
from .train import evaluate, train_rpn

EVAL_SEED_OFFSET = 1_000_003


def data_spec(cfg: RunConfig) -> DataSpec:
    d = cfg.data
    return DataSpec(d.image_size, d.min_size, d.max_size, d.min_objects, d.max_objects)


def ensure_dataset(cfg: RunConfig, root: str | Path) -> tuple[Path, Path]:
    """Generate train/eval splits under ``root`` unless they already exist."""
    root = Path(root)
    spec = data_spec(cfg)
    train, evals = root / "train", root / "eval"
    if not (train / "annotations.txt").exists():
        generate_dataset(train, cfg.data.train_images, cfg.seed, spec)
    if not (evals / "annotations.txt").exists():
        generate_dataset(evals, cfg.data.eval_images, cfg.seed + EVAL_SEED_OFFSET, spec)
    return train, evals


def compare_variants(cfg: RunConfig, out_dir: str | Path, variants=("fpn", "c4"),
                     data_dir: str | Path | None = None) -> dict[str, dict[str, float]]:
    """Train one RPN per variant with identical settings and evaluate proposals.

    Reports land in ``out_dir/<variant>/metrics.txt``; the returned dict also
    carries wall-clock seconds per variant under ``seconds``.
    """
    out = Path(out_dir)
    train_dir, eval_dir = ensure_dataset(cfg, data_dir or out / "data")
    train, evals = read_dataset(train_dir), read_dataset(eval_dir)
    results = {}
    for v in variants:
        t0 = time.perf_counter()
        vcfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, variant=v))
        run = train_rpn(vcfg, train, out / v)
        metrics = evaluate(run.checkpoint, evals, "proposals", out / v, vcfg)
        results[v] = {**metrics, "seconds": time.perf_counter() - t0}
    return results
