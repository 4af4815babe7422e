"""Subtask descriptors shared by the model, losses, data and training code."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


class Kind(str, Enum):
    SEGMENTATION = "Segmentation"
    CLASSIFICATION = "Classification"
    DETECTION = "Detection"
    REGRESSION = "Regression"

    @property
    def is_dense(self) -> bool:
        return self in (Kind.SEGMENTATION, Kind.DETECTION)

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, Kind):
            return value
        for k in cls:
            if str(value).lower() == k.value.lower():
                return k
        raise ConfigError(f"kind: unknown task kind {value!r}; expected one of {[k.value for k in cls]}")


@dataclass(frozen=True)
class TaskSpec:
    """One subtask: its kind plus class count K or keypoint count M."""

    subtask_id: str
    kind: Kind
    num_classes: int | None = None
    num_keypoints: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        if not self.subtask_id:
            raise ConfigError("subtask_id: must be a non-empty string")
        needs_k = self.kind in (Kind.SEGMENTATION, Kind.CLASSIFICATION)
        if needs_k:
            if self.num_classes is None or int(self.num_classes) < 2:
                raise ConfigError(f"num_classes: {self.kind.value} task {self.subtask_id!r} needs K >= 2")
        elif self.num_classes is not None:
            raise ConfigError(f"num_classes: not allowed for {self.kind.value} task {self.subtask_id!r}")
        if self.kind is Kind.REGRESSION:
            if self.num_keypoints is None or int(self.num_keypoints) < 1:
                raise ConfigError(f"num_keypoints: regression task {self.subtask_id!r} needs M >= 1")
        elif self.num_keypoints is not None:
            raise ConfigError(f"num_keypoints: only regression tasks take M ({self.subtask_id!r})")

    @property
    def output_width(self) -> int:
        if self.kind is Kind.CLASSIFICATION:
            return int(self.num_classes)
        if self.kind is Kind.REGRESSION:
            return 2 * int(self.num_keypoints)
        if self.kind is Kind.SEGMENTATION:
            return int(self.num_classes)
        return 5

    def to_dict(self) -> dict:
        d = {"subtask_id": self.subtask_id, "kind": self.kind.value}
        if self.num_classes is not None:
            d["num_classes"] = int(self.num_classes)
        if self.num_keypoints is not None:
            d["num_keypoints"] = int(self.num_keypoints)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        if not isinstance(d, dict):
            raise ConfigError(f"tasks: each entry must be a mapping, got {d!r}")
        unknown = set(d) - {"subtask_id", "kind", "num_classes", "num_keypoints"}
        if unknown:
            raise ConfigError(f"tasks: unknown field(s) {sorted(unknown)}")
        if "subtask_id" not in d or "kind" not in d:
            raise ConfigError("tasks: every task needs 'subtask_id' and 'kind'")
        return cls(
            subtask_id=str(d["subtask_id"]),
            kind=Kind.parse(d["kind"]),
            num_classes=d.get("num_classes"),
            num_keypoints=d.get("num_keypoints"),
        )


def task_index(tasks) -> dict[str, TaskSpec]:
    """Map subtask_id -> TaskSpec, rejecting duplicate ids."""
    out: dict[str, TaskSpec] = {}
    for t in tasks:
        if t.subtask_id in out:
            raise ConfigError(f"tasks: duplicate subtask_id {t.subtask_id!r}")
        out[t.subtask_id] = t
    return out
