"""Training loop, inference, and evaluation."""

from __future__ import annotations

import contextlib
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .config import RunConfig
from .data import DataError, Sample, augment, collate, resize_mask, resize_to_model
from .losses import LossConfig, composite
from .metrics import EvalReport, auc, confusion_matrix, dsc, f1_mcc, hausdorff, iou, mre_px
from .model import MultiTaskNet, RoutingError, decode_detection
from .optim import AdamW, CosineSchedule
from .tasks import Kind, TaskSpec

logger = logging.getLogger(__name__)

METRIC_LOG = "metrics.jsonl"
LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"


class EmptyDatasetError(DataError):
    pass


def single_thread():
    """Pin BLAS to one thread (bit-exact deterministic mode)."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


# ---------------------------------------------------------------------------
# batch plan
# ---------------------------------------------------------------------------


class BatchPlan:
    """Deterministic round-robin schedule of task-homogeneous batches.

    Each epoch shuffles every subtask's samples with a generator keyed by
    (seed, epoch, subtask), cuts them into batches, and interleaves
    subtasks batch by batch.  Step ``t`` maps to a batch without any
    hidden state, which is what makes resuming exact.
    """

    def __init__(self, sizes: dict[str, int], batch_size: int, seed: int):
        self.sizes = dict(sizes)
        self.batch_size = batch_size
        self.seed = seed
        counts = {sid: -(-n // batch_size) for sid, n in self.sizes.items()}
        self.slots: list[tuple[str, int]] = []
        for r in range(max(counts.values())):
            for sid in self.sizes:
                if r < counts[sid]:
                    self.slots.append((sid, r))
        self.steps_per_epoch = len(self.slots)
        self._cache: dict[tuple[int, str], np.ndarray] = {}

    def _perm(self, epoch: int, sid: str) -> np.ndarray:
        key = (epoch, sid)
        if key not in self._cache:
            rng = np.random.default_rng([self.seed, epoch, zlib.crc32(sid.encode())])
            self._cache = {key: rng.permutation(self.sizes[sid])}
        return self._cache[key]

    def batch(self, t: int) -> tuple[str, np.ndarray, int]:
        epoch, slot = divmod(t, self.steps_per_epoch)
        sid, r = self.slots[slot]
        perm = self._perm(epoch, sid)
        return sid, perm[r * self.batch_size : (r + 1) * self.batch_size], epoch


# ---------------------------------------------------------------------------
# inference / evaluation
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    id: str
    subtask_id: str
    kind: Kind
    mask: np.ndarray | None = None  # original resolution class map
    class_index: int | None = None
    probs: np.ndarray | None = None
    box: tuple[float, float, float, float] | None = None
    score: float | None = None
    keypoints_px: np.ndarray | None = None  # [M,2] original pixels

    def to_json(self) -> dict:
        d: dict = {"id": self.id, "subtask_id": self.subtask_id, "kind": self.kind.value}
        if self.class_index is not None:
            d["class_index"] = int(self.class_index)
            d["probs"] = [float(p) for p in self.probs]
        if self.box is not None:
            d["box"] = [float(v) for v in self.box]
            d["score"] = float(self.score)
        if self.keypoints_px is not None:
            d["keypoints"] = [[float(x), float(y)] for x, y in self.keypoints_px]
        return d


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def predict(model: MultiTaskNet, samples: Sequence[Sample], batch_size: int = 16) -> list[Prediction]:
    """Decode model outputs for original-resolution samples (order preserved)."""
    size = model.config.input_size
    out: list[Prediction] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        # keep each forward task-homogeneous
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(chunk):
            groups.setdefault(s.task.subtask_id, []).append(i)
        preds: list[Prediction | None] = [None] * len(chunk)
        for sid, idx in groups.items():
            batch = collate([resize_to_model(chunk[i], size) for i in idx])
            y = model(batch.images, sid, train=False).data.astype(np.float64)
            task = batch.task
            for row, i in enumerate(idx):
                s = chunk[i]
                p = Prediction(id=s.id, subtask_id=sid, kind=task.kind)
                if task.kind is Kind.SEGMENTATION:
                    p.mask = resize_mask(np.argmax(y[row], axis=0).astype(np.uint8), s.orig_size)
                elif task.kind is Kind.CLASSIFICATION:
                    p.probs = _softmax_np(y[row], axis=0)
                    p.class_index = int(np.argmax(y[row]))
                elif task.kind is Kind.DETECTION:
                    p.box, p.score = decode_detection(y[row : row + 1])
                else:
                    h0, w0 = s.orig_size
                    p.keypoints_px = y[row].reshape(-1, 2) * np.array([w0, h0], dtype=np.float64)
                preds[i] = p
        out.extend(preds)
    return out


def oracle_predictions(samples: Sequence[Sample]) -> list[Prediction]:
    """Ground truth wrapped as predictions; scores perfectly by construction."""
    out = []
    for s in samples:
        p = Prediction(id=s.id, subtask_id=s.task.subtask_id, kind=s.task.kind)
        if s.task.kind is Kind.SEGMENTATION:
            p.mask = np.asarray(s.label, dtype=np.uint8)
        elif s.task.kind is Kind.CLASSIFICATION:
            p.class_index = int(s.label)
            p.probs = np.eye(s.task.num_classes)[p.class_index]
        elif s.task.kind is Kind.DETECTION:
            p.box, p.score = tuple(float(v) for v in s.label), 1.0
        else:
            p.keypoints_px = np.asarray(s.label, dtype=np.float64).reshape(-1, 2)
        out.append(p)
    return out


def _seg_scores(pred: np.ndarray, gt: np.ndarray, k: int) -> tuple[float, float]:
    d, h = [], []
    for c in range(1, k):
        d.append(dsc(pred == c, gt == c))
        h.append(hausdorff(pred == c, gt == c))
    return float(np.mean(d)), float(np.mean(h))


def score_predictions(samples: Sequence[Sample], predictions: Sequence[Prediction]) -> EvalReport:
    """Per-subtask metrics, averaged over samples; categories averaged over subtasks."""
    by_id = {p.id: p for p in predictions}
    groups: dict[str, list[Sample]] = {}
    tasks: dict[str, TaskSpec] = {}
    for s in samples:
        groups.setdefault(s.task.subtask_id, []).append(s)
        tasks[s.task.subtask_id] = s.task
    report = EvalReport()
    for sid, group in groups.items():
        task = tasks[sid]
        try:
            preds = [by_id[s.id] for s in group]
        except KeyError as exc:
            raise DataError(f"no prediction for sample {exc.args[0]!r}") from None
        if task.kind is Kind.SEGMENTATION:
            vals = [_seg_scores(np.asarray(p.mask), np.asarray(s.label), task.num_classes) for s, p in zip(group, preds)]
            report.add(sid, task.kind.value, {"DSC": np.mean([v[0] for v in vals]), "HD": np.mean([v[1] for v in vals])})
        elif task.kind is Kind.CLASSIFICATION:
            y_true = np.array([int(s.label) for s in group])
            y_pred = np.array([p.class_index for p in preds])
            probs = np.stack([np.asarray(p.probs, dtype=np.float64) for p in preds])
            f1, mcc = f1_mcc(confusion_matrix(y_true, y_pred, task.num_classes))
            report.add(sid, task.kind.value, {"AUC": auc(probs, y_true), "F1": f1, "MCC": mcc})
        elif task.kind is Kind.DETECTION:
            report.add(sid, task.kind.value, {"IoU": np.mean([iou(p.box, s.label) for s, p in zip(group, preds)])})
        else:
            errs = [mre_px(p.keypoints_px, s.label) for s, p in zip(group, preds)]
            report.add(sid, task.kind.value, {"MRE": np.mean(errs)})
    return report


def evaluate(model: MultiTaskNet, samples: Sequence[Sample]) -> EvalReport:
    if not samples:
        raise EmptyDatasetError("evaluate needs a non-empty dataset")
    return score_predictions(samples, predict(model, samples))


def mean_loss(model: MultiTaskNet, model_samples: Sequence, batch_size: int, loss_config=None) -> float:
    """Composite loss in eval mode (no dropout, no augmentation), sample-weighted."""
    total, n = 0.0, 0
    for start in range(0, len(model_samples), batch_size):
        chunk = model_samples[start : start + batch_size]
        batch = collate(chunk)
        out = model(batch.images, batch.task.subtask_id, train=False)
        total += composite(batch, out, loss_config or LossConfig()).item() * len(chunk)
        n += len(chunk)
    return total / n


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: MultiTaskNet
    losses: list[dict] = field(default_factory=list)  # {"step", "subtask", "loss"}
    log: list[dict] = field(default_factory=list)  # validation events
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    total_steps: int = 0
    lr_trace: list[dict] = field(default_factory=list)


def make_checkpoint(model, optimizer, schedule, config: RunConfig, extra: dict) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        params=model.state_dict(),
        config_digest=model.config.digest(),
        model_config=model.config.to_dict(),
        optimizer={
            "header": {**optimizer.hyperparameters(), "steps": optimizer.steps, "step_count": optimizer.step_count},
            "m": {k: v.copy() for k, v in optimizer.m.items()},
            "v": {k: v.copy() for k, v in optimizer.v.items()},
        },
        scheduler=schedule.state(),
        rng={"seed": config.run_seed, "scheme": "default_rng([seed, step])"},
        extra=extra,
    )


def load_model(path, config=None) -> MultiTaskNet:
    """Rebuild a model from a checkpoint, refusing one whose config digest differs."""
    from .model import ModelConfig

    raw = ckpt_io.load(path)
    mcfg = config if config is not None else ModelConfig.from_dict(raw.model_config)
    if raw.config_digest != mcfg.digest():
        raise ckpt_io.CheckpointError("checkpoint config digest does not match the model configuration")
    model = MultiTaskNet(mcfg)
    model.load_state_dict(raw.params)
    return model


def train(
    config: RunConfig,
    train_sets: dict[str, list[Sample]],
    val_sets: dict[str, list[Sample]] | None = None,
    out_dir=None,
    resume=None,
    subtasks: Sequence[str] | None = None,
    stop_after: int | None = None,
    record_lr: bool = False,
) -> TrainResult:
    """Optimize the network on task-homogeneous batches.

    ``subtasks`` restricts training to a subset of the model's subtasks
    (default: all).  ``stop_after`` halts after that many global steps and
    writes the last checkpoint, simulating an interrupted run.
    """
    config.validate()
    model = MultiTaskNet(config.model)
    active = list(subtasks) if subtasks is not None else [t.subtask_id for t in config.model.tasks]
    for sid in active:
        if sid not in model.tasks:
            raise RoutingError(f"unknown subtask_id {sid!r}")
        if not train_sets.get(sid):
            raise EmptyDatasetError(f"subtask {sid!r} has no training samples")
    size = config.model.input_size
    model_sets = {sid: [resize_to_model(s, size) for s in train_sets[sid]] for sid in active}
    opt_cfg = config.optim
    seed = config.run_seed
    plan = BatchPlan({sid: len(v) for sid, v in model_sets.items()}, opt_cfg.batch_size, seed)
    total = opt_cfg.steps if opt_cfg.steps else opt_cfg.epochs * plan.steps_per_epoch

    optimizer = AdamW(
        model.params,
        model.group_of,
        betas=(opt_cfg.beta1, opt_cfg.beta2),
        eps=opt_cfg.eps,
        weight_decay=opt_cfg.weight_decay,
    )
    schedule = CosineSchedule({"backbone": opt_cfg.backbone_lr, "heads": opt_cfg.head_lr}, total, opt_cfg.min_lr)
    result = TrainResult(model=model, total_steps=total)
    out = Path(out_dir) if out_dir is not None else None
    best_score = float("inf")

    if resume is not None:
        state = ckpt_io.load(resume, expected_digest=config.model.digest())
        model.load_state_dict(state.params)
        for k in model.params:
            optimizer.m[k] = state.optimizer["m"][k].copy()
            optimizer.v[k] = state.optimizer["v"][k].copy()
        optimizer.steps = {k: int(v) for k, v in state.optimizer["header"]["steps"].items()}
        optimizer.step_count = int(state.optimizer["header"]["step_count"])
        schedule.load_state(state.scheduler)
        best_score = float(state.extra.get("best_score", best_score))
        result.losses = list(state.extra.get("losses", []))
        if schedule.total_steps != total:
            raise ckpt_io.CheckpointError(
                f"checkpoint was written for {schedule.total_steps} total steps, config gives {total}"
            )

    eval_sets = val_sets if val_sets else {sid: train_sets[sid] for sid in active}
    eval_sets = {sid: v for sid, v in eval_sets.items() if sid in active and v}
    eval_model_sets = {sid: [resize_to_model(s, size) for s in v] for sid, v in eval_sets.items()}

    def extra_state() -> dict:
        return {"best_score": best_score, "losses": result.losses, "seed": seed}

    ctx = single_thread() if config.deterministic else contextlib.nullcontext()
    with ctx:
        end = total if stop_after is None else min(total, stop_after)
        for t in range(schedule.t, end):
            sid, idx, epoch = plan.batch(t)
            rng = np.random.default_rng([seed, t])
            chosen = [augment(model_sets[sid][i], rng, train=opt_cfg.augment) for i in idx]
            batch = collate(chosen)
            model.zero_grad()
            outputs = model(batch.images, sid, train=True, rng=rng)
            loss = composite(batch, outputs, config.loss)
            ad.backward(loss)
            lrs = schedule.lrs()
            if record_lr:
                result.lr_trace.append({"step": t, **lrs})
            optimizer.step(lrs)
            schedule.advance()
            result.losses.append({"step": t, "subtask": sid, "loss": float(loss.item())})

            epoch_done = (t + 1) % plan.steps_per_epoch == 0
            periodic = opt_cfg.eval_every and epoch_done and (epoch + 1) % opt_cfg.eval_every == 0
            if periodic or t + 1 == total:
                record = _validation_event(model, eval_sets, eval_model_sets, opt_cfg.batch_size, t, epoch, result, config.loss)
                result.log.append(record)
                if out is not None:
                    out.mkdir(parents=True, exist_ok=True)
                    with open(out / METRIC_LOG, "a") as fh:
                        fh.write(json.dumps(record, sort_keys=True) + "\n")
                    if record["val_loss"] < best_score:
                        best_score = record["val_loss"]
                        result.best_checkpoint = ckpt_io.save(
                            make_checkpoint(model, optimizer, schedule, config, extra_state()), out / BEST_CKPT
                        )
                elif record["val_loss"] < best_score:
                    best_score = record["val_loss"]
        if out is not None:
            result.last_checkpoint = ckpt_io.save(
                make_checkpoint(model, optimizer, schedule, config, extra_state()), out / LAST_CKPT
            )
    return result


def _validation_event(model, eval_sets, eval_model_sets, batch_size, t, epoch, result, loss_config) -> dict:
    losses = {sid: mean_loss(model, ms, batch_size, loss_config) for sid, ms in eval_model_sets.items()}
    samples = [s for v in eval_sets.values() for s in v]
    report = evaluate(model, samples)
    recent = [r["loss"] for r in result.losses[-50:]]
    return {
        "step": t + 1,
        "epoch": epoch + 1,
        "train_loss_recent": float(np.mean(recent)),
        "val_loss": float(np.mean(list(losses.values()))),
        "val_loss_by_subtask": losses,
        "category_means": report.category_means,
        "subtasks": report.subtasks,
    }
