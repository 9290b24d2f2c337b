"""Exact segmentation metrics: Dice overlap, class-wise IoU, class reduction
and the per-subset cross-evaluation matrix.

All scores are integer pixel counts combined in double precision, so they
match a brute-force counting oracle exactly. Conventions: Dice of two empty
masks is 1.0 (one empty, one not is 0.0); mean IoU skips classes absent from
both prediction and truth unless ``include_absent`` is set.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import LabelMap


@dataclass(frozen=True)
class ClassMapping:
    """Total map from a fine class space onto a coarse one."""

    source_classes: int
    target_classes: int
    table: tuple[int, ...]

    def __post_init__(self):
        if len(self.table) != self.source_classes:
            raise ValueError(
                f"mapping table length {len(self.table)} != source_classes "
                f"{self.source_classes}")
        if self.target_classes < 2:
            raise ValueError("target_classes must be >= 2")
        bad = [t for t in self.table if not (0 <= t < self.target_classes)]
        if bad:
            raise ValueError(f"mapping table entries {bad} outside "
                             f"[0, {self.target_classes})")

    @classmethod
    def identity(cls, num_classes: int) -> "ClassMapping":
        return cls(num_classes, num_classes, tuple(range(num_classes)))

    @property
    def is_identity(self) -> bool:
        return (self.source_classes == self.target_classes
                and self.table == tuple(range(self.source_classes)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.table, dtype=np.int32)

    def to_dict(self) -> dict:
        return {"source_classes": self.source_classes,
                "target_classes": self.target_classes,
                "table": list(self.table)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMapping":
        return cls(d["source_classes"], d["target_classes"], tuple(d["table"]))


@dataclass
class MetricReport:
    metric_name: str
    per_item: dict[str, float]
    aggregate: float
    item_count: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "metric", "value"])
        for sid in sorted(self.per_item):
            w.writerow([sid, self.metric_name, repr(self.per_item[sid])])
        w.writerow(["__aggregate__", self.metric_name, repr(self.aggregate)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric_name, "aggregate": self.aggregate,
                           "item_count": self.item_count,
                           "per_item": dict(sorted(self.per_item.items()))},
                          indent=1, sort_keys=True)


def _as_bool_mask(mask) -> np.ndarray:
    if isinstance(mask, LabelMap):
        return mask.data != 0
    arr = np.asarray(mask)
    if arr.dtype != bool:
        arr = arr != 0
    return arr


def dsc(pred, truth) -> float:
    """Dice overlap 2|Y∩Z| / (|Y|+|Z|) of two foreground masks."""
    y = _as_bool_mask(pred)
    z = _as_bool_mask(truth)
    if y.shape != z.shape:
        raise ValueError(f"mask shape mismatch: {y.shape} vs {z.shape}")
    inter = int(np.count_nonzero(y & z))
    size = int(np.count_nonzero(y)) + int(np.count_nonzero(z))
    if size == 0:
        return 1.0
    return 2.0 * inter / size


def global_dsc(preds, truths) -> float:
    """Dice over the concatenation of all cases (sum of counts, not a mean)."""
    if len(preds) != len(truths):
        raise ValueError(f"paired lists differ in length: {len(preds)} vs {len(truths)}")
    inter = 0
    size = 0
    for p, t in zip(preds, truths):
        y = _as_bool_mask(p)
        z = _as_bool_mask(t)
        if y.shape != z.shape:
            raise ValueError(f"mask shape mismatch: {y.shape} vs {z.shape}")
        inter += int(np.count_nonzero(y & z))
        size += int(np.count_nonzero(y)) + int(np.count_nonzero(z))
    if size == 0:
        return 1.0
    return 2.0 * inter / size


def _check_pair(pred: LabelMap, truth: LabelMap) -> None:
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise ValueError("label map dims mismatch")
    if pred.num_classes != truth.num_classes:
        raise ValueError("label map num_classes mismatch")


def confusion(pred: LabelMap, truth: LabelMap) -> np.ndarray:
    """K x K counts, rows = truth class, columns = predicted class."""
    _check_pair(pred, truth)
    return _kernels.confusion_counts(pred.data.ravel(), truth.data.ravel(),
                                     pred.num_classes)


def class_iou(pred: LabelMap, truth: LabelMap, class_id: int) -> float:
    """Intersection over union of one class; 0.0 when the union is empty."""
    if class_id >= pred.num_classes or class_id < 0:
        raise ValueError(f"class_id {class_id} outside [0, {pred.num_classes})")
    cm = confusion(pred, truth)
    inter = int(cm[class_id, class_id])
    union = int(cm[class_id, :].sum() + cm[:, class_id].sum() - cm[class_id, class_id])
    if union == 0:
        return 0.0
    return inter / union


def iou_per_class(pred: LabelMap, truth: LabelMap) -> np.ndarray:
    """IoU per class; NaN marks classes absent from both maps."""
    cm = confusion(pred, truth)
    inter = np.diag(cm).astype(np.float64)
    union = (cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)).astype(np.float64)
    out = np.full(pred.num_classes, np.nan)
    present = union > 0
    out[present] = inter[present] / union[present]
    return out


def miou(pred: LabelMap, truth: LabelMap, include_absent: bool = False) -> float:
    """Mean IoU over classes; absent-from-both classes are excluded unless
    ``include_absent`` counts them as 0."""
    per = iou_per_class(pred, truth)
    if include_absent:
        return float(np.nan_to_num(per, nan=0.0).mean())
    vals = per[~np.isnan(per)]
    if vals.size == 0:
        return 0.0
    return float(vals.mean())


def pixel_accuracy(pred: LabelMap, truth: LabelMap) -> float:
    _check_pair(pred, truth)
    return float(np.count_nonzero(pred.data == truth.data) / pred.data.size)


def mean_foreground_dsc(pred: LabelMap, truth: LabelMap) -> float:
    """Mean Dice over foreground classes present in prediction or truth."""
    cm = confusion(pred, truth)
    scores = []
    for c in range(1, pred.num_classes):
        size = int(cm[c, :].sum() + cm[:, c].sum())
        if size == 0:
            continue
        scores.append(2.0 * int(cm[c, c]) / size)
    if not scores:
        return 1.0
    return float(np.mean(scores))


def reduce_classes(label: LabelMap, mapping: ClassMapping) -> LabelMap:
    """Pixel-wise lookup into the mapping table."""
    if label.num_classes != mapping.source_classes:
        raise ValueError(f"label has {label.num_classes} classes, mapping expects "
                         f"{mapping.source_classes}")
    table = mapping.as_array()
    return LabelMap(table[label.data], num_classes=mapping.target_classes)


@dataclass
class CrossEvalMatrix:
    """Per-generation scores of both subset models on both reference subsets,
    plus the merged pseudo-label quality and the test score (one table row)."""

    generation: int
    entries: dict[tuple[str, str], float]  # (model_slot, subset) -> score
    merged_reference_score: float
    test_score: float

    CELLS = (("1", "1"), ("2", "1"), ("1", "2"), ("2", "2"))

    def validate(self) -> None:
        for cell in self.CELLS:
            if cell not in self.entries:
                raise ValueError(f"cross-eval matrix missing cell M{cell[0]}@R{cell[1]}")

    def row(self) -> list[float]:
        self.validate()
        return [self.entries[c] for c in self.CELLS] + [self.merged_reference_score,
                                                        self.test_score]


CROSS_EVAL_HEADER = ["generation", "m1_at_r1", "m2_at_r1", "m1_at_r2", "m2_at_r2",
                     "merged_reference", "test"]


def cross_eval_csv(matrices: list[CrossEvalMatrix]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CROSS_EVAL_HEADER)
    for m in matrices:
        w.writerow([m.generation] + [repr(v) for v in m.row()])
    return buf.getvalue()


def score_maps(pred: LabelMap, truth: LabelMap, metric: str,
               mapping: ClassMapping | None = None) -> float:
    """One sample's score under the named metric, optionally in reduced space.

    With a mapping, inputs still in the source space are reduced; inputs
    already living in the target space pass through.
    """
    if mapping is not None and not mapping.is_identity:
        def to_target(m: LabelMap) -> LabelMap:
            if m.num_classes == mapping.target_classes:
                return m
            return reduce_classes(m, mapping)
        pred = to_target(pred)
        truth = to_target(truth)
    if metric == "dice":
        return mean_foreground_dsc(pred, truth)
    if metric == "miou":
        return miou(pred, truth)
    if metric == "accuracy":
        return pixel_accuracy(pred, truth)
    raise ValueError(f"unknown metric {metric!r}")


def cross_eval_matrix(models: dict, partition, bundle, generation: int, *,
                      metric: str = "dice", mapping: ClassMapping | None = None,
                      test_model=None) -> CrossEvalMatrix:
    """Evaluate both subset models on both reference subsets.

    Cells score each model's predictions against each subset's (hidden)
    ground truth; the merged column scores the pseudo labels these models
    produce under the cross-subset rule over the whole reference set; the
    test column scores ``test_model`` (falling back to fusing the two subset
    models) on the test set.
    """
    from . import learners  # local import: metrics must not depend on learners at import time

    for slot in ("1", "2"):
        if slot not in models or models[slot] is None:
            raise ValueError(f"generation {generation}: missing model for subset {slot}")
    subsets = {"1": list(partition.subset1_ids), "2": list(partition.subset2_ids)}
    preds: dict[tuple[str, str], LabelMap] = {}
    for slot, model in models.items():
        for sub, ids in subsets.items():
            for sid in ids:
                sample = bundle.sample_by_id(sid)
                preds[(slot, sid)], _ = learners.predict(model, sample.image)

    entries = {}
    for slot in ("1", "2"):
        for sub in ("1", "2"):
            scores = [score_maps(preds[(slot, sid)], bundle.reference_truth(sid),
                                 metric, mapping) for sid in subsets[sub]]
            entries[(slot, sub)] = float(np.mean(scores))

    # cross rule: subset 1 is labelled by the model trained on subset 2
    merged_scores = []
    for sub, producer in (("1", "2"), ("2", "1")):
        for sid in subsets[sub]:
            merged_scores.append(score_maps(preds[(producer, sid)],
                                            bundle.reference_truth(sid), metric, mapping))
    merged = float(np.mean(merged_scores))

    test_scores = []
    for sample in bundle.test:
        if test_model is not None:
            pred, _ = learners.predict(test_model, sample.image)
        else:
            votes = [learners.predict(models[s], sample.image)[0] for s in ("1", "2")]
            pred = learners.fuse_majority(votes)
        test_scores.append(score_maps(pred, sample.label, metric, mapping))
    test = float(np.mean(test_scores))

    matrix = CrossEvalMatrix(generation, entries, merged, test)
    matrix.validate()
    return matrix
