"""Training loops, checkpoints, evaluation and the ablation driver.

Every random stream is derived from the master seed and the step index, so a
run resumed from a checkpoint replays exactly the losses of an uninterrupted
one.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, dump_config, load_config
from .data import CLASSES, SyntheticScene, read_dataset
from .detector import detector_loss, sample_rois
from .masks import build_mask_targets, generate_mask_proposals, mask_level_shapes, mask_loss
from .metrics import (EvalConfig, ImageDetections, average_precision, average_recall,
                      mask_iou_matrix, write_report)
from .models import DetectionModel, MaskNet, ProposalNet, detect
from .nn import SGD, Module, load_weights, save_weights
from .rpn import assign_anchor_labels, all_anchors, rpn_loss

log = logging.getLogger(__name__)

TASKS = ("rpn", "detection", "masks")
CHECKPOINT = "checkpoint.bin"


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def learning_rate(cfg: RunConfig, step: int) -> float:
    """Linear warmup, then base lr, divided by 1/decay_factor after decay_step."""
    o = cfg.optim
    lr = o.lr * (o.decay_factor if step >= o.decay_step else 1.0)
    if step < o.warmup_steps:
        lr *= (step + 1) / o.warmup_steps
    return lr


def batch_indices(cfg: RunConfig, n_images: int, step: int) -> np.ndarray:
    bs = cfg.optim.batch_size
    per_epoch = max(n_images // bs, 1)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([cfg.seed, 11, epoch]).permutation(n_images)
    if n_images < bs:
        return np.resize(perm, bs)
    return perm[k * bs : (k + 1) * bs]


def stack_images(scenes: list[SyntheticScene], idx) -> T.Tensor:
    return T.Tensor(np.stack([scenes[i].image for i in idx]))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(out_dir: Path, task: str, model: Module, opt: SGD | None, step: int,
                    cfg: RunConfig) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.data for name, p in model.state_dict().items()}
    if opt is not None:
        arrays.update({f"optim.velocity.{k}": v for k, v in opt.velocity.items()})
    arrays[f"meta.task.{task}"] = np.array([1.0])
    arrays["meta.step"] = np.array([float(step)])
    path = out_dir / CHECKPOINT
    save_weights(path, arrays)
    (out_dir / "config.cfg").write_text(dump_config(cfg))
    return path


def checkpoint_task(arrays: dict[str, np.ndarray]) -> str:
    tasks = [k.split(".", 2)[2] for k in arrays if k.startswith("meta.task.")]
    if len(tasks) != 1:
        raise CheckpointError("checkpoint does not record its task")
    return tasks[0]


def load_model_weights(model: Module, arrays: dict[str, np.ndarray]) -> None:
    params = {k: v for k, v in arrays.items() if not k.startswith(("optim.", "meta."))}
    model.load_state_dict(params)


def resolve_checkpoint(path: str | Path) -> Path:
    p = Path(path)
    return p / CHECKPOINT if p.is_dir() else p


def load_run(path: str | Path) -> tuple[RunConfig, dict[str, np.ndarray]]:
    ckpt = resolve_checkpoint(path)
    if not ckpt.exists():
        raise CheckpointError(f"no checkpoint at {ckpt}")
    cfg = load_config(ckpt.parent / "config.cfg")
    return cfg, load_weights(ckpt)


def build_model(task: str, cfg: RunConfig) -> Module:
    if task == "rpn":
        return ProposalNet(cfg)
    if task == "detection":
        return DetectionModel(cfg, len(CLASSES))
    if task == "masks":
        return MaskNet(cfg)
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: Module
    losses: list[float]
    checkpoint: Path | None


def _run(task: str, cfg: RunConfig, model: Module, params: dict, scenes, step_loss, out_dir,
         resume: dict[str, np.ndarray] | None, steps: int | None, log_every: int) -> TrainResult:
    opt = SGD(params, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay)
    start = 0
    if resume is not None:
        if checkpoint_task(resume) != task:
            raise CheckpointError(f"cannot resume a {checkpoint_task(resume)} checkpoint as {task}")
        load_model_weights(model, resume)
        for k in opt.velocity:
            opt.velocity[k] = resume[f"optim.velocity.{k}"].astype(opt.velocity[k].dtype)
        start = int(resume["meta.step"][0])
    total = cfg.optim.steps if steps is None else steps
    losses = []
    lines = []
    for step in range(start, total):
        idx = batch_indices(cfg, len(scenes), step)
        rng = np.random.default_rng([cfg.seed, 13, step])
        loss, parts = step_loss(idx, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"{task}: loss became {value} at step {step} (parts {parts})")
        loss.backward()
        opt.step(learning_rate(cfg, step))
        losses.append(value)
        terms = " ".join(f"{k}={v:.6f}" for k, v in parts.items())
        lines.append(f"step={step} lr={learning_rate(cfg, step):.6g} loss={value:.6f} {terms}")
        if log_every and step % log_every == 0:
            log.info("%s step %d loss %.4f %s", task, step, value, terms)
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = save_checkpoint(out_dir, task, model, opt, total, cfg)
        with open(out_dir / "log.txt", "a") as fh:
            fh.write("".join(line + "\n" for line in lines))
    return TrainResult(model, losses, ckpt)


def train_rpn(cfg: RunConfig, scenes: list[SyntheticScene], out_dir=None, resume=None,
              steps: int | None = None, log_every: int = 0) -> TrainResult:
    model = ProposalNet(cfg)
    size = scenes[0].image.shape[1:]
    anchors = all_anchors(model.anchor_grids(tuple(size)))
    labels = [assign_anchor_labels(anchors, s.boxes) for s in scenes]

    def step_loss(idx, rng):
        logits, deltas = model(stack_images(scenes, idx))
        loss, cls, reg = rpn_loss(logits, deltas, anchors, [labels[i] for i in idx],
                                  [scenes[i].boxes for i in idx], rng, cfg.rpn.batch_anchors,
                                  cfg.rpn.positive_fraction)
        return loss, {"cls": cls, "reg": reg}

    return _run("rpn", cfg, model, model.state_dict(), scenes, step_loss, out_dir, resume, steps, log_every)


def fixed_proposals(model: ProposalNet, scenes: list[SyntheticScene], top_n: int, batch: int = 8):
    out = []
    for s in range(0, len(scenes), batch):
        out += [p.boxes for p in model.propose(stack_images(scenes, range(s, min(s + batch, len(scenes)))), top_n)]
    return out


def train_detector(cfg: RunConfig, scenes: list[SyntheticScene], rpn_weights: dict[str, np.ndarray],
                   out_dir=None, resume=None, steps: int | None = None, log_every: int = 0) -> TrainResult:
    """Train the detector on proposals from a frozen, separately trained RPN."""
    if checkpoint_task(rpn_weights) != "rpn":
        raise CheckpointError("train_detector needs an rpn checkpoint")
    model = DetectionModel(cfg, len(CLASSES))
    load_model_weights(model.proposal, rpn_weights)
    proposals = fixed_proposals(model.proposal, scenes, cfg.rpn.post_nms_top_n_train)
    det = model.detector
    params = {f"detector.{k}": p for k, p in det.named_parameters()}

    def step_loss(idx, rng):
        boxes, owner, labels, targets = [], [], [], []
        for n, i in enumerate(idx):
            s = sample_rois(proposals[i], scenes[i].boxes, scenes[i].labels, rng,
                            cfg.detector.rois_per_image, cfg.detector.fg_fraction)
            boxes.append(s.boxes)
            owner.append(np.full(len(s.boxes), n))
            labels.append(s.labels)
            targets.append(s.targets)
        rois = det.rois(np.concatenate(boxes), np.concatenate(owner))
        logits, deltas = det(stack_images(scenes, idx), rois)
        labels = np.concatenate(labels)
        loss, cls, reg = detector_loss(logits, deltas, labels, np.concatenate(targets))
        acc = float((logits.data.argmax(axis=1) == labels).mean())
        return loss, {"cls": cls, "reg": reg, "acc": acc}

    return _run("detection", cfg, model, params, scenes, step_loss, out_dir, resume, steps, log_every)


def train_masks(cfg: RunConfig, scenes: list[SyntheticScene], out_dir=None, resume=None,
                steps: int | None = None, log_every: int = 0) -> TrainResult:
    model = MaskNet(cfg)
    shapes = mask_level_shapes(tuple(scenes[0].image.shape[1:]))
    targets = [build_mask_targets(s.boxes, s.masks, shapes, cfg.mask.resolution) for s in scenes]

    def step_loss(idx, rng):
        outputs = model(stack_images(scenes, idx))
        loss, score, mask = mask_loss(outputs, [targets[i] for i in idx], rng, cfg.mask.sample_per_image,
                                      cfg.mask.positive_fraction, cfg.mask.loss_weight)
        return loss, {"score": score, "mask": mask}

    return _run("masks", cfg, model, model.state_dict(), scenes, step_loss, out_dir, resume, steps, log_every)


# ---------------------------------------------------------------- evaluation


def _timed(fn, n_images):
    t0 = time.perf_counter()
    out = fn()
    return out, (time.perf_counter() - t0) / max(n_images, 1)


def evaluate_proposals(model: ProposalNet, scenes: list[SyntheticScene], budgets=(100, 1000),
                       batch: int = 8) -> tuple[dict[str, float], float]:
    props, per_image = _timed(lambda: fixed_proposals(model, scenes, max(budgets), batch), len(scenes))
    gts = [s.boxes for s in scenes]
    metrics = {}
    for b in budgets:
        tag = "1k" if b == 1000 else str(b)
        ar = average_recall(props, gts, b)
        for k, v in ar.items():
            metrics[k.replace("AR", f"AR{tag}", 1)] = v
    return metrics, per_image


def evaluate_detection(model: DetectionModel, scenes: list[SyntheticScene],
                       batch: int = 8) -> tuple[dict[str, float], float]:
    def run():
        out = []
        for s in range(0, len(scenes), batch):
            out += detect(stack_images(scenes, range(s, min(s + batch, len(scenes)))), model)
        return out

    dets, per_image = _timed(run, len(scenes))
    metrics = average_precision([ImageDetections(d.boxes, d.scores, d.classes) for d in dets],
                                [(s.boxes, s.labels) for s in scenes], EvalConfig())
    return metrics, per_image


def evaluate_masks(model: MaskNet, scenes: list[SyntheticScene], top_n: int = 1000,
                   budgets=(100, 1000)) -> tuple[dict[str, float], float]:
    def run():
        props = []
        for i in range(len(scenes)):
            with T.no_grad():
                outputs = model(stack_images(scenes, [i]))
            props.append(generate_mask_proposals(outputs, top_n))
        return props

    props, per_image = _timed(run, len(scenes))
    metrics = {}
    size = tuple(scenes[0].image.shape[1:])
    pasted = [[p.paste(size) for p in ps] for ps in props]
    ious = [mask_iou_matrix(pasted[i], scenes[i].masks) for i in range(len(scenes))]
    areas = [np.array([m.sum() for m in s.masks], dtype=np.float64) for s in scenes]
    dummy = [np.zeros((len(p), 4)) for p in props]
    for b in budgets:
        tag = "1k" if b == 1000 else str(b)
        ar = average_recall(dummy, [s.boxes for s in scenes], b, ious=ious, gt_areas=areas)
        for k, v in ar.items():
            metrics[k.replace("AR", f"segAR{tag}", 1)] = v
    return metrics, per_image


def evaluate(checkpoint: str | Path, scenes: list[SyntheticScene], task: str, out_dir=None,
             cfg: RunConfig | None = None) -> dict[str, float]:
    """Metrics for a checkpoint. The report is deterministic; wall-clock
    per-image inference time goes to a separate ``timing.txt``."""
    stored_cfg, arrays = load_run(checkpoint)
    cfg = cfg or stored_cfg
    found = checkpoint_task(arrays)
    wanted = {"proposals": "rpn", "detection": "detection", "masks": "masks"}.get(task, task)
    if found != wanted:
        raise CheckpointError(f"checkpoint was trained for {found!r}, cannot evaluate {task!r}")
    model = build_model(found, cfg)
    load_model_weights(model, arrays)
    if found == "rpn":
        metrics, per_image = evaluate_proposals(model, scenes)
    elif found == "detection":
        metrics, per_image = evaluate_detection(model, scenes)
    else:
        metrics, per_image = evaluate_masks(model, scenes, cfg.mask.top_n)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / "metrics.txt", metrics, {"task": task, "variant": cfg.model.variant,
                                                    "images": str(len(scenes))})
        (out / "timing.txt").write_text(f"seconds_per_image = {per_image:.6f}\n")
    return metrics


# ---------------------------------------------------------------- ablation

ABLATION_ROWS = (("a", "c4"), ("b", "c5"), ("c", "fpn"), ("d", "bottomup"), ("e", "nolateral"),
                 ("f", "finest"))


def ablate(cfg: RunConfig, train: list[SyntheticScene], evals: list[SyntheticScene], out_dir,
           rows=ABLATION_ROWS, steps: int | None = None) -> dict[str, dict[str, float]]:
    """Train and evaluate one RPN per structural variant; one report per row."""
    out = Path(out_dir)
    results = {}
    for row, variant in rows:
        vcfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, variant=variant))
        run_dir = out / f"{row}_{variant}"
        res = train_rpn(vcfg, train, run_dir, steps=steps)
        results[f"{row}_{variant}"] = evaluate(res.checkpoint, evals, "proposals", run_dir, vcfg)
    return results


def load_scenes(path: str | Path) -> list[SyntheticScene]:
    return read_dataset(path)
