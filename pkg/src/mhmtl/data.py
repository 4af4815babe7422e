"""Synthetic ultrasound phantoms, resizing, photometric augmentation and dataset I/O.

Phantoms are a speckled, slowly varying background with one to three
ellipses.  Every label is computed from the generating ellipse parameters,
so ground truth is exact by construction.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .tasks import ConfigError, Kind, TaskSpec, task_index

# network input normalization, applied in collate()
INPUT_MEAN = 0.25
INPUT_STD = 0.25

MANIFEST_NAME = "manifest.jsonl"
TASKS_NAME = "tasks.json"


class DataError(Exception):
    """Base class for dataset loading failures."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class MalformedRecordError(DataError, ValueError):
    pass


class UnknownSubtaskError(DataError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class Ellipse:
    cx: float  # pixels, x = column
    cy: float  # pixels, y = row
    a: float  # semi-major
    b: float  # semi-minor
    theta: float  # radians, major axis angle from +x
    intensity: float

    def half_extents(self) -> tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2), math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2)

    def endpoints(self) -> np.ndarray:
        """Axis endpoints: major +, major -, minor +, minor - as (x, y) pixels."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array(
            [
                [self.cx + self.a * c, self.cy + self.a * s],
                [self.cx - self.a * c, self.cy - self.a * s],
                [self.cx - self.b * s, self.cy + self.b * c],
                [self.cx + self.b * s, self.cy - self.b * c],
            ]
        )

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def ellipse_mask(shape: tuple[int, int], e: Ellipse) -> np.ndarray:
    """Pixels whose centres fall inside the ellipse."""
    h, w = shape
    ys = np.arange(h)[:, None] + 0.5 - e.cy
    xs = np.arange(w)[None, :] + 0.5 - e.cx
    c, s = math.cos(e.theta), math.sin(e.theta)
    u = xs * c + ys * s
    v = -xs * s + ys * c
    return (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0


def mask_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight normalized (cx, cy, w, h) box around the nonzero pixels of ``mask``."""
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return ((x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h)


@dataclass
class Sample:
    """One image at original resolution with exactly one task-typed label.

    label: uint8 mask [H0,W0] | int class | (cx,cy,w,h) normalized box |
    float array [M,2] of (x, y) keypoints in original pixels.
    """

    id: str
    image: np.ndarray  # float32 [H0, W0] in [0, 1]
    task: TaskSpec
    label: Any
    orig_size: tuple[int, int]
    meta: dict = field(default_factory=dict, compare=False)


@dataclass
class ModelSample:
    """A sample resized to network resolution with training targets."""

    id: str
    image: np.ndarray  # float32 [H, W] in [0, 1]
    task: TaskSpec
    target: Any  # uint8 mask [H,W] | int | box (4,) | normalized keypoints (2M,)
    orig_size: tuple[int, int]
    source: Sample | None = None


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _stream(seed: int, task: TaskSpec) -> np.random.Generator:
    key = zlib.crc32(task.subtask_id.encode())
    return np.random.default_rng([int(seed), key])


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys = np.linspace(-1, 1, h)[:, None]
    xs = np.linspace(-1, 1, w)[None, :]
    gx, gy = rng.uniform(-0.06, 0.06, size=2)
    bx, by = rng.uniform(-0.6, 0.6, size=2)
    blob = 0.08 * np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / 0.5)
    return 0.22 + gx * xs + gy * ys + blob


def _random_ellipse(rng, h, w, scale_range, intensity, axis_ratio=None, theta_range=(-math.pi / 3, math.pi / 3)):
    side = min(h, w)
    a = rng.uniform(*scale_range) * side
    ratio = rng.uniform(0.45, 0.95) if axis_ratio is None else rng.uniform(*axis_ratio)
    b = a * ratio
    theta = rng.uniform(*theta_range)
    probe = Ellipse(0.0, 0.0, a, b, theta, intensity)
    ex, ey = probe.half_extents()
    cx = rng.uniform(ex + 1, w - ex - 1)
    cy = rng.uniform(ey + 1, h - ey - 1)
    return Ellipse(cx, cy, a, b, theta, intensity)


def _class_bucket(k: int, c: int) -> tuple[tuple[float, float], float]:
    """Axis-ratio range and intensity for class bucket ``c`` of ``k``."""
    lo, hi = 0.35, 1.0
    span = (hi - lo) / k
    ratio = (lo + (c + 0.15) * span, lo + (c + 0.85) * span)
    intensity = 0.5 + 0.45 * (c + 0.5) / k
    return ratio, intensity


def generate(
    seed: int,
    task: TaskSpec,
    count: int,
    orig_size: tuple[int, int] | None = None,
    size_range: tuple[int, int] = (300, 800),
) -> list[Sample]:
    """Deterministic phantoms for ``task``.

    With ``orig_size=None`` each image's height and width are drawn
    independently from ``size_range``.  The output is a pure function of
    (seed, task, count, orig_size, size_range).
    """
    if count < 1:
        raise ConfigError(f"count: must be >= 1, got {count}")
    if task.kind is Kind.REGRESSION and task.num_keypoints > 4:
        raise ConfigError(f"num_keypoints: phantoms provide at most 4 axis endpoints, got {task.num_keypoints}")
    if task.kind is Kind.SEGMENTATION and task.num_classes > 4:
        raise ConfigError(f"num_classes: phantoms hold at most 3 labeled ellipses (K <= 4), got {task.num_classes}")
    rng = _stream(seed, task)
    if task.kind is Kind.CLASSIFICATION:
        classes = rng.permutation(np.arange(count) % task.num_classes)
    samples = []
    for n in range(count):
        if orig_size is None:
            h, w = (int(v) for v in rng.integers(size_range[0], size_range[1] + 1, size=2))
        else:
            h, w = int(orig_size[0]), int(orig_size[1])
        field_ = _background(rng, h, w)
        speckle = rng.gamma(4.0, 0.25, size=(h, w))

        n_labeled = task.num_classes - 1 if task.kind is Kind.SEGMENTATION else 1
        n_total = max(n_labeled, int(rng.integers(1, 4)))
        distractors = [
            _random_ellipse(rng, h, w, (0.06, 0.14), float(rng.uniform(0.03, 0.1))) for _ in range(n_total - n_labeled)
        ]
        if task.kind is Kind.CLASSIFICATION:
            ratio, inten = _class_bucket(task.num_classes, int(classes[n]))
            labeled = [_random_ellipse(rng, h, w, (0.2, 0.32), inten, axis_ratio=ratio)]
        else:
            labeled = [
                _random_ellipse(rng, h, w, (0.18, 0.32), float(rng.uniform(0.65, 0.95))) for _ in range(n_labeled)
            ]

        intensity = field_.copy()
        label_map = np.zeros((h, w), dtype=np.uint8)
        for e in distractors:
            intensity[ellipse_mask((h, w), e)] = e.intensity
        for c, e in enumerate(labeled, start=1):
            m = ellipse_mask((h, w), e)
            intensity[m] = e.intensity
            label_map[m] = c
        image = np.clip(intensity * speckle, 0.0, 1.0).astype(np.float32)

        primary = labeled[0]
        if task.kind is Kind.SEGMENTATION:
            label: Any = label_map
        elif task.kind is Kind.CLASSIFICATION:
            label = int(classes[n])
        elif task.kind is Kind.DETECTION:
            label = mask_box(ellipse_mask((h, w), primary))
        else:
            label = primary.endpoints()[: task.num_keypoints].astype(np.float64)
        samples.append(
            Sample(
                id=f"{task.subtask_id}_{n:05d}",
                image=image,
                task=task,
                label=label,
                orig_size=(h, w),
                meta={"ellipses": [e.to_dict() for e in labeled], "distractors": [e.to_dict() for e in distractors]},
            )
        )
    return samples


# ---------------------------------------------------------------------------
# resize / augment / batch
# ---------------------------------------------------------------------------


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if image.shape == (h, w):
        return image.astype(np.float32, copy=True)
    out = Image.fromarray(np.asarray(image, dtype=np.float32)).resize((w, h), Image.BILINEAR)
    return np.asarray(out, dtype=np.float32)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if mask.shape == (h, w):
        return mask.copy()
    out = Image.fromarray(np.asarray(mask, dtype=np.uint8)).resize((w, h), Image.NEAREST)
    return np.asarray(out, dtype=np.uint8)


def normalize_keypoints(points_px, orig_size) -> np.ndarray:
    """[M,2] original-pixel (x, y) -> flat [2M] normalized coordinates."""
    h0, w0 = orig_size
    pts = np.asarray(points_px, dtype=np.float64).reshape(-1, 2)
    return (pts / np.array([w0, h0], dtype=np.float64)).reshape(-1)


def denormalize_keypoints(flat, orig_size) -> np.ndarray:
    h0, w0 = orig_size
    return np.asarray(flat, dtype=np.float64).reshape(-1, 2) * np.array([w0, h0], dtype=np.float64)


def resize_to_model(sample: Sample, model_size: tuple[int, int] = (256, 256)) -> ModelSample:
    kind = sample.task.kind
    if sample.label is None:  # unlabeled input, e.g. single-image prediction
        target: Any = None
    elif kind is Kind.SEGMENTATION:
        target = resize_mask(sample.label, model_size)
    elif kind is Kind.CLASSIFICATION:
        target = int(sample.label)
    elif kind is Kind.DETECTION:
        target = np.asarray(sample.label, dtype=np.float64)
    else:
        target = normalize_keypoints(sample.label, sample.orig_size)
    return ModelSample(
        id=sample.id,
        image=resize_image(sample.image, model_size),
        task=sample.task,
        target=target,
        orig_size=tuple(sample.orig_size),
        source=sample,
    )


def augment(sample: ModelSample, rng: np.random.Generator, train: bool = True) -> ModelSample:
    """Random brightness/contrast and Gaussian noise, each with probability 0.5.

    Photometric only, so labels are untouched.  Identity when ``train`` is false.
    """
    if not train:
        return sample
    img = sample.image.astype(np.float32, copy=True)
    lo, hi = 0.0, 1.0
    span = hi - lo
    if rng.random() < 0.5:
        img = img + np.float32(rng.uniform(-0.2, 0.2) * span)
    if rng.random() < 0.5:
        img = img * np.float32(rng.uniform(0.8, 1.2))
    if rng.random() < 0.5:
        sigma = rng.uniform(0.0, 0.03) * span
        img = img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32)
    return replace(sample, image=np.clip(img, lo, hi).astype(np.float32))


@dataclass
class Batch:
    task: TaskSpec
    images: np.ndarray  # [N,1,H,W], normalized
    targets: np.ndarray | None  # None for unlabeled inputs
    samples: list[ModelSample]


def collate(samples: Sequence[ModelSample], dtype=np.float32) -> Batch:
    """Stack model-space samples of one subtask into network inputs and targets."""
    from .losses import BatchError

    if not samples:
        raise BatchError("cannot collate an empty batch")
    task = samples[0].task
    ids = {s.task.subtask_id for s in samples}
    if len(ids) != 1:
        raise BatchError(f"batch mixes subtasks {sorted(ids)}; batches must be task-homogeneous")
    images = np.stack([s.image for s in samples])[:, None].astype(dtype)
    images = (images - INPUT_MEAN) / INPUT_STD
    if any(s.target is None for s in samples):
        targets = None
    elif task.kind is Kind.SEGMENTATION:
        targets = np.stack([s.target for s in samples]).astype(np.int64)
    elif task.kind is Kind.CLASSIFICATION:
        targets = np.array([s.target for s in samples], dtype=np.int64)
    else:
        targets = np.stack([np.asarray(s.target, dtype=np.float64) for s in samples])
    return Batch(task=task, images=images.astype(dtype), targets=targets, samples=list(samples))


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Grayscale float32 image in [0, 1]; colour channels are averaged."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3].astype(np.float64).mean(axis=2)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return (np.asarray(arr, dtype=np.float64) / scale).astype(np.float32)


def write_png(path: Path, array_u8: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array_u8, dtype=np.uint8)).save(path, format="PNG")


def label_to_json(sample: Sample):
    kind = sample.task.kind
    if kind is Kind.CLASSIFICATION:
        return {"class_index": int(sample.label)}
    if kind is Kind.DETECTION:
        return {"box": [float(v) for v in sample.label]}
    if kind is Kind.REGRESSION:
        return {"keypoints": [[float(x), float(y)] for x, y in np.asarray(sample.label).reshape(-1, 2)]}
    raise ValueError("segmentation labels are stored as mask files")


def save_dataset(samples: Sequence[Sample], out_dir: str | os.PathLike) -> Path:
    """Write images, masks, ``tasks.json`` and ``manifest.jsonl``; returns the manifest path."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    tasks: dict[str, TaskSpec] = {}
    lines = []
    for s in samples:
        known = tasks.setdefault(s.task.subtask_id, s.task)
        if known != s.task:
            raise ConfigError(f"subtask_id {s.task.subtask_id!r} used with two different TaskSpecs")
        rec: dict[str, Any] = {
            "id": s.id,
            "subtask_id": s.task.subtask_id,
            "image_path": f"images/{s.id}.png",
            "orig_size": [int(s.orig_size[0]), int(s.orig_size[1])],
        }
        write_png(root / rec["image_path"], _to_u8(s.image))
        if s.task.kind is Kind.SEGMENTATION:
            rec["label_path"] = f"masks/{s.id}.png"
            write_png(root / rec["label_path"], np.asarray(s.label, dtype=np.uint8))
        else:
            rec["label"] = label_to_json(s)
        lines.append(json.dumps(rec, sort_keys=True))
    (root / TASKS_NAME).write_text(json.dumps([t.to_dict() for t in tasks.values()], indent=2, sort_keys=True) + "\n")
    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@dataclass
class Manifest:
    root: Path
    records: list[dict]
    tasks: dict[str, TaskSpec]


def _manifest_path(path) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() else p


def read_manifest(path, tasks: Sequence[TaskSpec] | None = None) -> Manifest:
    mpath = _manifest_path(path)
    if not mpath.exists():
        raise MissingFileError(f"manifest not found: {mpath}")
    if tasks is None:
        tpath = mpath.parent / TASKS_NAME
        if not tpath.exists():
            raise MissingFileError(f"no task list given and {tpath} does not exist")
        try:
            tasks = [TaskSpec.from_dict(d) for d in json.loads(tpath.read_text())]
        except (json.JSONDecodeError, ConfigError) as exc:
            raise MalformedRecordError(f"{tpath}: {exc}") from exc
    index = task_index(tasks)
    records = []
    for lineno, line in enumerate(mpath.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"{mpath}:{lineno}: not valid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise MalformedRecordError(f"{mpath}:{lineno}: record must be an object")
        missing = {"id", "subtask_id", "image_path", "orig_size"} - set(rec)
        if missing:
            raise MalformedRecordError(f"{mpath}:{lineno}: record missing field(s) {sorted(missing)}")
        if ("label" in rec) == ("label_path" in rec):
            raise MalformedRecordError(f"{mpath}:{lineno}: record {rec['id']!r} needs exactly one of label/label_path")
        if rec["subtask_id"] not in index:
            raise UnknownSubtaskError(f"record {rec['id']!r}: unknown subtask_id {rec['subtask_id']!r}")
        records.append(rec)
    return Manifest(root=mpath.parent, records=records, tasks=index)


def _parse_label(rec: dict, task: TaskSpec, root: Path, orig_size) -> Any:
    rid = rec["id"]
    try:
        if task.kind is Kind.SEGMENTATION:
            mpath = root / rec["label_path"]
            if not mpath.exists():
                raise MissingFileError(f"record {rid!r}: mask file not found: {mpath}")
            with Image.open(mpath) as im:
                mask = np.asarray(im, dtype=np.uint8)
            if mask.shape != tuple(orig_size):
                raise MalformedRecordError(f"record {rid!r}: mask shape {mask.shape} != orig_size {tuple(orig_size)}")
            if mask.max(initial=0) >= task.num_classes:
                raise MalformedRecordError(f"record {rid!r}: mask value >= K={task.num_classes}")
            return mask
        label = rec["label"]
        if task.kind is Kind.CLASSIFICATION:
            c = int(label["class_index"])
            if not 0 <= c < task.num_classes:
                raise MalformedRecordError(f"record {rid!r}: class_index {c} outside [0, {task.num_classes})")
            return c
        if task.kind is Kind.DETECTION:
            box = tuple(float(v) for v in label["box"])
            if len(box) != 4:
                raise MalformedRecordError(f"record {rid!r}: box needs 4 values")
            return box
        pts = np.asarray(label["keypoints"], dtype=np.float64)
        if pts.shape != (task.num_keypoints, 2):
            raise MalformedRecordError(f"record {rid!r}: expected {task.num_keypoints} keypoints, got {pts.shape}")
        return pts
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise MalformedRecordError(f"record {rid!r}: bad label ({exc})") from exc


def load_manifest(path, tasks: Sequence[TaskSpec] | None = None) -> list[Sample]:
    """Load every record of a manifest, in file order."""
    man = read_manifest(path, tasks)
    samples = []
    for rec in man.records:
        task = man.tasks[rec["subtask_id"]]
        ipath = man.root / rec["image_path"]
        if not ipath.exists():
            raise MissingFileError(f"record {rec['id']!r}: image not found: {ipath}")
        try:
            image = read_image(ipath)
        except OSError as exc:
            raise MalformedRecordError(f"record {rec['id']!r}: unreadable image {ipath} ({exc})") from exc
        try:
            orig = (int(rec["orig_size"][0]), int(rec["orig_size"][1]))
        except (TypeError, ValueError, IndexError) as exc:
            raise MalformedRecordError(f"record {rec['id']!r}: bad orig_size") from exc
        if image.shape != orig:
            raise MalformedRecordError(f"record {rec['id']!r}: image shape {image.shape} != orig_size {orig}")
        label = _parse_label(rec, task, man.root, orig)
        samples.append(Sample(id=str(rec["id"]), image=image, task=task, label=label, orig_size=orig))
    return samples
