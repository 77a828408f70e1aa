"""Confusion-matrix accumulation and IoU/mIoU reporting over class subsets.

Confusion rows are ground truth, columns are prediction.  Classes absent
from both ground truth and predictions have undefined IoU and are excluded
from subset means (standard segmentation-tooling behaviour); the report
surfaces them as null entries.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .core import PredictionMap
from .errors import DimensionError, ValidationError
from .labelspace import LabelSpace


@dataclass
class ConfusionMatrix:
    """C x C counts (row = ground truth, column = prediction) plus an
    ignored-pixel tally."""

    counts: np.ndarray
    ignored: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        if num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("confusion matrices have different class counts")
        return ConfusionMatrix(
            counts=self.counts + other.counts,
            ignored=self.ignored + other.ignored,
        )


def update_confusion(
    cm: ConfusionMatrix,
    pred: PredictionMap | np.ndarray,
    gt: np.ndarray,
    ignore_index: int = 255,
) -> ConfusionMatrix:
    """Tally one image; pixels whose ground truth is the ignore index are
    counted separately.  Mutates and returns ``cm``."""
    pred_arr = pred.labels if isinstance(pred, PredictionMap) else np.asarray(pred)
    gt_arr = np.asarray(gt)
    if pred_arr.shape != gt_arr.shape:
        raise DimensionError(
            f"prediction {pred_arr.shape} and ground truth {gt_arr.shape} differ"
        )
    C = cm.num_classes
    if np.any(pred_arr >= C):
        raise ValidationError("prediction contains class indices out of range")
    mask = gt_arr != ignore_index
    if np.any(gt_arr[mask] >= C):
        raise ValidationError("ground truth contains class indices out of range")
    g = gt_arr[mask].astype(np.int64)
    p = pred_arr[mask].astype(np.int64)
    cm.counts += np.bincount(g * C + p, minlength=C * C).reshape(C, C)
    cm.ignored += int((~mask).sum())
    return cm


def iou(cm: ConfusionMatrix, c: int) -> float | None:
    """TP / (TP + FP + FN) for class c; None when the class never occurs."""
    if not 0 <= c < cm.num_classes:
        raise ValidationError(f"class {c} out of range [0, {cm.num_classes})")
    tp = int(cm.counts[c, c])
    fp = int(cm.counts[:, c].sum()) - tp
    fn = int(cm.counts[c, :].sum()) - tp
    denom = tp + fp + fn
    if denom == 0:
        return None
    return tp / denom


def miou(cm: ConfusionMatrix, subset) -> float:
    """Mean IoU over the subset's classes with defined IoU."""
    values = [iou(cm, c) for c in subset]
    defined = [v for v in values if v is not None]
    if not defined:
        raise ValidationError("every class in the subset has undefined IoU")
    return float(sum(defined) / len(defined))


@dataclass
class EvalReport:
    """Per-class IoU (None = undefined) and subset mIoUs for one label space."""

    label_space: LabelSpace
    per_class_iou: list[float | None]
    miou_by_subset: dict[str, float]
    pixels_evaluated: int = 0
    pixels_ignored: int = 0
    entries_skipped: int = 0
    skipped_ids: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "label_space": self.label_space.to_json_dict(),
            "per_class_iou": {
                name: self.per_class_iou[i]
                for i, name in enumerate(self.label_space.class_names)
            },
            "miou_by_subset": dict(self.miou_by_subset),
            "pixels_evaluated": self.pixels_evaluated,
            "pixels_ignored": self.pixels_ignored,
            "entries_skipped": self.entries_skipped,
            "skipped_ids": list(self.skipped_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2) + "\n"

    def to_text_table(self) -> str:
        names = self.label_space.class_names
        width = max(len("class"), *(len(n) for n in names))
        lines = [f"{'class':<{width}}  IoU"]
        for i, name in enumerate(names):
            v = self.per_class_iou[i]
            cell = f"{v:.6f}" if v is not None else "undefined"
            lines.append(f"{name:<{width}}  {cell}")
        lines.append("")
        swidth = max([len("subset")] + [len(s) for s in self.miou_by_subset])
        lines.append(f"{'subset':<{swidth}}  mIoU")
        for name, value in self.miou_by_subset.items():
            lines.append(f"{name:<{swidth}}  {value:.6f}")
        if self.entries_skipped:
            lines.append("")
            lines.append(f"skipped entries: {self.entries_skipped}")
        return "\n".join(lines) + "\n"


def build_report(
    cm: ConfusionMatrix,
    space: LabelSpace,
    subsets: list[str] | None = None,
) -> EvalReport:
    """Evaluate a confusion matrix over the label space's named subsets."""
    if cm.num_classes != space.num_classes:
        raise DimensionError(
            f"confusion matrix has {cm.num_classes} classes, space has {space.num_classes}"
        )
    subset_names = list(space.eval_subsets) if subsets is None else list(subsets)
    return EvalReport(
        label_space=space,
        per_class_iou=[iou(cm, c) for c in range(space.num_classes)],
        miou_by_subset={name: miou(cm, space.subset(name)) for name in subset_names},
        pixels_evaluated=int(cm.counts.sum()),
        pixels_ignored=cm.ignored,
    )


@dataclass
class ReportDelta:
    """Differences ``b - a`` between two reports on the same label space."""

    label_space: LabelSpace
    per_class_delta: list[float | None]
    miou_delta_by_subset: dict[str, float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "name", "delta"])
        for i, name in enumerate(self.label_space.class_names):
            d = self.per_class_delta[i]
            writer.writerow(["class", name, "" if d is None else format(d, ".17g")])
        for name, d in self.miou_delta_by_subset.items():
            writer.writerow(["subset", name, format(d, ".17g")])
        return buf.getvalue()


def compare_reports(a: EvalReport, b: EvalReport) -> ReportDelta:
    """Per-class and per-subset differences b - a; spaces must match."""
    if a.label_space != b.label_space:
        raise ValidationError("reports were built on different label spaces")
    if set(a.miou_by_subset) != set(b.miou_by_subset):
        missing = set(a.miou_by_subset) ^ set(b.miou_by_subset)
        raise ValidationError(f"reports disagree on subsets: {sorted(missing)}")
    deltas: list[float | None] = []
    for va, vb in zip(a.per_class_iou, b.per_class_iou):
        deltas.append(None if va is None or vb is None else vb - va)
    return ReportDelta(
        label_space=a.label_space,
        per_class_delta=deltas,
        miou_delta_by_subset={
            name: b.miou_by_subset[name] - a.miou_by_subset[name]
            for name in a.miou_by_subset
        },
    )
