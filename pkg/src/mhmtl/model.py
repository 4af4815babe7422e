"""Multi-head multi-task network.

A plain five-stage convolutional encoder produces C1..C5 at strides
2, 4, 8, 16, 32.  Global tasks (classification, regression) read only C5
through GAP -> dropout -> affine.  Dense tasks (segmentation, detection)
read the stride-4 FPN map ``P_out``.  The task id picks the branch with
ordinary control flow, so the FPN is never built for global tasks.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .tasks import ConfigError, Kind, TaskSpec, task_index

logger = logging.getLogger(__name__)

N_STAGES = 5


class RoutingError(KeyError):
    """Unknown subtask id, or a task sent down the wrong branch."""


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (256, 256)
    encoder_widths: tuple[int, ...] = (8, 16, 24, 32, 48)
    fpn_channels: int = 32
    dropout_rate: float = 0.2
    convs_per_stage: int = 1
    downsample: str = "pool"
    seg_upsample: str = "nearest"
    init_seed: int = 0
    tasks: list[TaskSpec] = field(default_factory=list)

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.encoder_widths = tuple(int(v) for v in self.encoder_widths)
        self.tasks = [t if isinstance(t, TaskSpec) else TaskSpec.from_dict(t) for t in self.tasks]
        self.validate()

    def validate(self) -> None:
        h, w = self.input_size if len(self.input_size) == 2 else (0, 0)
        if len(self.input_size) != 2 or h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"input_size: {self.input_size} must be two positive multiples of 32")
        if len(self.encoder_widths) != N_STAGES or min(self.encoder_widths) < 1:
            raise ConfigError(f"encoder_widths: need {N_STAGES} positive stage widths, got {self.encoder_widths}")
        if self.fpn_channels < 1:
            raise ConfigError("fpn_channels: must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate: must lie in [0, 1)")
        if self.convs_per_stage not in (1, 2):
            raise ConfigError("convs_per_stage: must be 1 or 2")
        if self.downsample not in ("pool", "stride"):
            raise ConfigError("downsample: must be 'pool' or 'stride'")
        if self.seg_upsample not in ("nearest", "bilinear"):
            raise ConfigError("seg_upsample: must be 'nearest' or 'bilinear'")
        task_index(self.tasks)

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "encoder_widths": list(self.encoder_widths),
            "fpn_channels": self.fpn_channels,
            "dropout_rate": self.dropout_rate,
            "convs_per_stage": self.convs_per_stage,
            "downsample": self.downsample,
            "seg_upsample": self.seg_upsample,
            "init_seed": self.init_seed,
            "tasks": [t.to_dict() for t in self.tasks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"model: unknown key(s) {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        """Stable hash of everything that determines parameter shapes and forward behaviour."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class FeaturePyramid:
    C1: Tensor
    C2: Tensor
    C3: Tensor
    C4: Tensor
    C5: Tensor
    P_out: Tensor | None = None

    def levels(self) -> list[Tensor]:
        return [self.C1, self.C2, self.C3, self.C4, self.C5]


CLASSIFIER_GAIN = 0.1


def _init_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(6.0)) -> np.ndarray:
    """U(-gain/sqrt(fan_in), +gain/sqrt(fan_in)); the default gain suits ReLU layers."""
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class MultiTaskNet:
    """Shared encoder + FPN with one head per subtask.

    Parameters live in ``self.params`` keyed by dotted names.  Names starting
    with ``encoder.`` or ``fpn.`` form the backbone group; ``heads.<id>.``
    names belong to exactly one subtask.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.tasks = task_index(config.tasks)
        self.params: dict[str, Tensor] = {}
        self.counters: Counter = Counter()
        self._build(np.random.default_rng(config.init_seed))

    # -- construction -----------------------------------------------------
    def _conv(self, rng, name: str, c_in: int, c_out: int, k: int, gain: float = math.sqrt(6.0)) -> None:
        self.params[f"{name}.weight"] = Tensor(
            _init_uniform(rng, (c_out, c_in, k, k), c_in * k * k, gain), requires_grad=True, name=f"{name}.weight"
        )
        self.params[f"{name}.bias"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True, name=f"{name}.bias")

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        c_in = 1
        for s, width in enumerate(cfg.encoder_widths, start=1):
            self._conv(rng, f"encoder.stage{s}.conv1", c_in, width, 3)
            if cfg.convs_per_stage == 2:
                self._conv(rng, f"encoder.stage{s}.conv2", width, width, 3)
            c_in = width
        d = cfg.fpn_channels
        for level in range(2, 6):
            self._conv(rng, f"fpn.lateral{level}", cfg.encoder_widths[level - 1], d, 1)
        self._conv(rng, "fpn.smooth", d, d, 3)
        for task in cfg.tasks:
            self._add_head(rng, task)

    def _add_head(self, rng, task: TaskSpec) -> None:
        prefix = f"heads.{task.subtask_id}"
        d = self.config.fpn_channels
        if task.kind.is_dense:
            self._conv(rng, f"{prefix}.conv", d, d, 3)
            self._conv(rng, f"{prefix}.proj", d, task.output_width, 1, gain=1.0)
        else:
            c5 = self.config.encoder_widths[-1]
            # small classifier layer: pooled C5 features share a large common
            # component, and full-scale logits start far from uniform
            gain = CLASSIFIER_GAIN if task.kind is Kind.CLASSIFICATION else 1.0
            self.params[f"{prefix}.fc.weight"] = Tensor(
                _init_uniform(rng, (task.output_width, c5), c5, gain=gain), requires_grad=True, name=f"{prefix}.fc.weight"
            )
            self.params[f"{prefix}.fc.bias"] = Tensor(
                np.zeros(task.output_width, np.float32), requires_grad=True, name=f"{prefix}.fc.bias"
            )

    # -- parameter bookkeeping -------------------------------------------
    @staticmethod
    def group_of(name: str) -> str:
        return "heads" if name.startswith("heads.") else "backbone"

    def head_params(self, subtask_id: str) -> dict[str, Tensor]:
        prefix = f"heads.{subtask_id}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != model shape {self.params[k].shape}")
            self.params[k].data = np.ascontiguousarray(arr, dtype=self.params[k].dtype).copy()
            self.params[k].grad = None

    def astype(self, dtype) -> "MultiTaskNet":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    # -- forward pieces ---------------------------------------------------
    def _apply_conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        pad = w.shape[-1] // 2
        return ad.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, padding=pad)

    def _as_input(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
        h, w = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (h, w):
            raise ShapeError(f"expected input [N,1,{h},{w}], got {x.shape}; resize before calling the model")
        dtype = next(iter(self.params.values())).dtype
        if x.dtype != dtype:
            x = Tensor(x.data.astype(dtype))
        return x

    def encode(self, image) -> FeaturePyramid:
        x = self._as_input(image)
        pool = self.config.downsample == "pool"
        feats = []
        for s in range(1, N_STAGES + 1):
            x = ad.relu(self._apply_conv(x, f"encoder.stage{s}.conv1", stride=1 if pool else 2))
            if self.config.convs_per_stage == 2:
                x = ad.relu(self._apply_conv(x, f"encoder.stage{s}.conv2"))
            if pool:
                # 2x2 windows keep cell o centred on input pixels 2o..2o+1;
                # a stride-2 3x3 conv shifts it by half a pixel per stage
                x = ad.pool_max2d(x, 2)
            feats.append(x)
        self.counters["encode"] += 1
        return FeaturePyramid(*feats)

    def fpn(self, pyramid: FeaturePyramid) -> Tensor:
        """Top-down pathway from C5 to C2 with lateral 1x1 projections, then a 3x3 smooth."""
        top = self._apply_conv(pyramid.C5, "fpn.lateral5")
        for level, c in ((4, pyramid.C4), (3, pyramid.C3), (2, pyramid.C2)):
            lateral = self._apply_conv(c, f"fpn.lateral{level}")
            top = ad.add(lateral, ad.upsample_nearest(top, 2))
        p_out = self._apply_conv(top, "fpn.smooth")
        pyramid.P_out = p_out
        self.counters["fpn"] += 1
        return p_out

    def _task(self, subtask_id: str | TaskSpec) -> TaskSpec:
        key = subtask_id.subtask_id if isinstance(subtask_id, TaskSpec) else subtask_id
        try:
            return self.tasks[key]
        except KeyError:
            raise RoutingError(f"unknown subtask_id {key!r}") from None

    def forward_global(self, image, task, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        task = self._task(task)
        if task.kind.is_dense:
            raise RoutingError(f"{task.subtask_id!r} is a dense task; use forward_dense")
        pyr = self.encode(image)
        pooled = ad.pool_avg_global(pyr.C5)
        pooled = ad.dropout(pooled, self.config.dropout_rate, train, rng)
        prefix = f"heads.{task.subtask_id}.fc"
        out = ad.affine(pooled, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])
        if task.kind is Kind.REGRESSION:
            out = ad.sigmoid(out)
        return out

    def forward_dense(self, image, task, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        task = self._task(task)
        if not task.kind.is_dense:
            raise RoutingError(f"{task.subtask_id!r} is a global task; use forward_global")
        pyr = self.encode(image)
        p_out = self.fpn(pyr)
        prefix = f"heads.{task.subtask_id}"
        hidden = ad.relu(self._apply_conv(p_out, f"{prefix}.conv"))
        out = self._apply_conv(hidden, f"{prefix}.proj")
        if task.kind is Kind.SEGMENTATION:
            if self.config.seg_upsample == "bilinear":
                return ad.upsample_bilinear(out, 4)
            return ad.upsample_nearest(out, 4)
        # channels: cx, cy, w, h (sigmoid) and the raw objectness logit
        box = ad.sigmoid(out[:, 0:4])
        return ad.concat([box, out[:, 4:5]], axis=1)

    def forward(self, image, task, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Route by task kind: dense tasks through the FPN, global tasks through C5 only."""
        spec = self._task(task)
        if spec.kind.is_dense:
            return self.forward_dense(image, spec, train, rng)
        return self.forward_global(image, spec, train, rng)

    __call__ = forward


def encode_detection_target(x_gt: float, y_gt: float, grid_h: int, grid_w: int) -> tuple[int, int]:
    """Grid cell (i, j) = (floor(y * h'), floor(x * w')) containing a normalized centre."""
    i = math.floor(y_gt * grid_h)
    j = math.floor(x_gt * grid_w)
    if not (0 <= i < grid_h and 0 <= j < grid_w):
        logger.warning("detection centre (%s, %s) outside [0,1); clamping to the grid", x_gt, y_gt)
        i = min(max(i, 0), grid_h - 1)
        j = min(max(j, 0), grid_w - 1)
    return i, j


def decode_detection(pred) -> tuple[tuple[float, float, float, float], float]:
    """Box and score at the cell with the largest objectness logit.

    ``pred`` is a single-image detection output [1,5,h',w'] whose first four
    channels are already sigmoid-activated.  Ties go to the smallest (i, j)
    in row-major order.
    """
    arr = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError(f"decode_detection takes one image, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.shape[0] != 5:
        raise ShapeError(f"detection output needs 5 channels, got {arr.shape[0]}")
    flat = int(np.argmax(arr[4]))
    i, j = divmod(flat, arr.shape[2])
    box = tuple(float(v) for v in arr[:4, i, j])
    logit = float(arr[4, i, j])
    score = 1.0 / (1.0 + math.exp(-logit)) if logit >= 0 else math.exp(logit) / (1.0 + math.exp(logit))
    return box, score


def decode_cell(pred) -> tuple[int, int]:
    """(i, j) of the maximal objectness logit, same tie rule as decode_detection."""
    arr = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if arr.ndim == 4:
        arr = arr[0]
    return divmod(int(np.argmax(arr[4])), arr.shape[2])
