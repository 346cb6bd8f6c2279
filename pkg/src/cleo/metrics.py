"""Confusion-matrix accumulation, per-class IoU, and group-wise reports.

Evaluation happens in the final evaluation label space: background plus the
unsplit, split, and retained classes. Background is excluded from every mean
(matching the 19-class urban-scenes convention); classes whose IoU is 0/0
are undefined and skipped rather than counted as zero, unless requested
otherwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ontology import (
    BACKGROUND,
    ClassGroupAssignment,
    LabelGrid,
    TaskSequence,
    class_groups,
    eval_label_space,
    exhausted_parents,
    intro_tasks,
)


def _as_flat(grid) -> np.ndarray:
    if isinstance(grid, LabelGrid):
        return grid.flat()
    return np.asarray(grid).reshape(-1)


class ConfusionMatrix:
    """Square pixel-count matrix over an evaluation label space.

    Entry (g, p) counts pixels with ground truth g predicted as p.
    Accumulation is associative and matrices over the same space merge by
    entry-wise addition.
    """

    def __init__(self, space):
        self.space = tuple(space)
        self._pos = {c: i for i, c in enumerate(self.space)}
        k = len(self.space)
        self.counts = np.zeros((k, k), dtype=np.int64)

    def accumulate(self, predicted, truth) -> "ConfusionMatrix":
        pred = _as_flat(predicted)
        true = _as_flat(truth)
        if pred.shape != true.shape:
            raise ValueError("prediction and truth grids differ in shape")
        k = len(self.space)
        lookup = np.full(int(max(self.space)) + 1, -1)
        for c, i in self._pos.items():
            lookup[c] = i
        if pred.size:
            if pred.min() < 0 or true.min() < 0:
                raise ValueError("negative label id")
            if pred.max() >= len(lookup) or true.max() >= len(lookup):
                raise ValueError("label outside the evaluation space")
        p_idx = lookup[pred]
        t_idx = lookup[true]
        if np.any(p_idx < 0) or np.any(t_idx < 0):
            raise ValueError("label outside the evaluation space")
        flat = np.bincount(t_idx * k + p_idx, minlength=k * k)
        self.counts += flat.reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.space != self.space:
            raise ValueError("confusion matrices span different spaces")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())


def iou(cm: ConfusionMatrix, cid: int) -> float | None:
    """TP / (TP + FP + FN); None when the class never occurs."""
    i = cm._pos[cid]
    tp = int(cm.counts[i, i])
    fp = int(cm.counts[:, i].sum()) - tp
    fn = int(cm.counts[i, :].sum()) - tp
    denom = tp + fp + fn
    return None if denom == 0 else tp / denom


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class GroupReport:
    per_class: dict[int, float | None]
    unsplit_miou: float | None
    split_miou: float | None
    retained_miou: float | None
    all_miou: float | None
    groups: ClassGroupAssignment = field(repr=False, default=None)


def group_report(
    cm: ConfusionMatrix,
    groups: ClassGroupAssignment,
    undefined_as_zero: bool = False,
) -> GroupReport:
    """Group-wise unweighted mIoU; background never enters a mean."""
    evaluated = sorted(groups.evaluated)
    per_class: dict[int, float | None] = {}
    for c in evaluated:
        v = iou(cm, c)
        if v is None and undefined_as_zero:
            v = 0.0
        per_class[c] = v

    retained_parents = [p for p in groups.retained if p != BACKGROUND]
    return GroupReport(
        per_class=per_class,
        unsplit_miou=_mean(per_class[c] for c in sorted(groups.unsplit)),
        split_miou=_mean(per_class[c] for c in sorted(groups.split)),
        retained_miou=_mean(per_class[c] for c in sorted(retained_parents)),
        all_miou=_mean(per_class.values()),
        groups=groups,
    )


def map_predictions_to_eval(pred_ids: np.ndarray, seq: TaskSequence) -> np.ndarray:
    """Fold model predictions into the evaluation space.

    Exhaustively split parents keep a logit but no longer denote content;
    predicting one counts as background.
    """
    pred = np.asarray(pred_ids)
    exhausted = exhausted_parents(seq)
    if not exhausted:
        return pred
    out = pred.copy()
    for c in exhausted:
        out[out == c] = BACKGROUND
    return out


def evaluate_predictions(
    pred_ids, truth_ids, seq: TaskSequence
) -> tuple[ConfusionMatrix, GroupReport]:
    """Confusion matrix and group report over the final evaluation space."""
    cm = ConfusionMatrix(eval_label_space(seq))
    cm.accumulate(map_predictions_to_eval(_as_flat(pred_ids), seq), truth_ids)
    return cm, group_report(cm, class_groups(seq))


def taskwise_classes(seq: TaskSequence) -> list[list[int]]:
    """Evaluated classes per task column; task 0 includes retained parents."""
    groups = class_groups(seq)
    evaluated = groups.evaluated
    intro = intro_tasks(seq)
    columns: list[list[int]] = [[] for _ in seq.tasks]
    for c in sorted(evaluated):
        t = intro.get(c)
        if t is not None and t >= 1:
            columns[t].append(c)
        else:
            # task-0 classes plus never-introduced retained holders
            columns[0].append(c)
    return columns


def taskwise_report(
    cm: ConfusionMatrix, seq: TaskSequence
) -> list[tuple[str, float | None]]:
    """Per-task mIoU of the final model, one column per task plus All."""
    groups = class_groups(seq)
    report = group_report(cm, groups)
    rows: list[tuple[str, float | None]] = []
    for t, classes in enumerate(taskwise_classes(seq)):
        rows.append((f"task_{t}", _mean(report.per_class[c] for c in classes)))
    rows.append(("all", report.all_miou))
    return rows


# ---------------------------------------------------------------------------
# CSV emission

def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def write_group_report_csv(path, report: GroupReport, seq: TaskSequence) -> None:
    """One row per evaluated class (name, group, IoU) plus group footers."""
    groups = report.groups or class_groups(seq)
    onto = seq.ontology
    membership: dict[int, str] = {}
    for c in groups.unsplit:
        membership[c] = "unsplit"
    for c in groups.split:
        membership[c] = "split"
    for c in groups.retained:
        if c != BACKGROUND:
            membership[c] = "retained"

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "group", "iou"])
        for c in sorted(report.per_class):
            w.writerow([onto.name_of(c), membership[c], _fmt(report.per_class[c])])
        w.writerow(["unsplit", "", _fmt(report.unsplit_miou)])
        w.writerow(["split", "", _fmt(report.split_miou)])
        w.writerow(["retained", "", _fmt(report.retained_miou)])
        w.writerow(["all", "", _fmt(report.all_miou)])


def write_taskwise_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([name for name, _ in rows])
        w.writerow([_fmt(v) for _, v in rows])


def write_comparison_csv(path, summaries: list[dict]) -> None:
    """Merge run summaries into one method-by-group table."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "unsplit", "split", "retained", "all"])
        for s in summaries:
            w.writerow(
                [
                    s["method"],
                    _fmt(s.get("unsplit_miou")),
                    _fmt(s.get("split_miou")),
                    _fmt(s.get("retained_miou")),
                    _fmt(s.get("all_miou")),
                ]
            )
