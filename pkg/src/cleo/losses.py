"""Softmax, cross-entropy, and the three distillation variants.

Distillation compares a frozen teacher's probabilities over the previous
label space against the student's probabilities regrouped into that space:

* standard - new-class mass is dropped and the remainder renormalized, so
  the student is penalized for moving mass onto classes the teacher never
  saw.
* mib - background absorbs all current-task mass, modelling the background
  shift of class-incremental segmentation.
* moon - every evolving parent absorbs the mass of its new children, so
  refining a known class into subclasses is not penalized. With splits from
  background only, this reduces exactly to mib.

All accumulation is in float64; logs are floored at 1e-12 so losses stay
finite even where the standard variant can reach zero probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ontology import BACKGROUND, TaskSequence, label_space_at

LOG_FLOOR = 1e-12
DROPPED = -1

MODES = ("standard", "mib", "moon")


class DegenerateInputError(ValueError):
    """Renormalization denominator vanished in standard mode."""


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, label: int) -> float:
    """Negative log-probability of the labelled class, floored at 1e-12."""
    return float(-np.log(max(float(p[label]), LOG_FLOOR)))


@dataclass(frozen=True)
class DistillationSpec:
    """Grouping table mapping every student class to one teacher class.

    group_of holds, per student-space position, the teacher-space position
    whose group contains it, or DROPPED for classes the standard variant
    zeroes out.
    """

    mode: str
    teacher_space: tuple[int, ...]
    student_space: tuple[int, ...]
    group_of: tuple[int, ...]

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if len(self.group_of) != len(self.student_space):
            raise ValueError("group_of must cover the student space")
        covered = {g for g in self.group_of if g != DROPPED}
        if covered != set(range(len(self.teacher_space))):
            raise ValueError("group_of image must cover the teacher space")

    @property
    def group_index(self) -> np.ndarray:
        return np.asarray(self.group_of, dtype=np.int64)

    @classmethod
    def build(cls, seq: TaskSequence, t: int, mode: str) -> "DistillationSpec":
        """Grouping table for distilling task t-1 knowledge while learning t."""
        if t < 1:
            raise ValueError("distillation needs a previous task")
        teacher = label_space_at(seq, t - 1)
        student = label_space_at(seq, t)
        teacher_pos = {c: i for i, c in enumerate(teacher)}
        new_classes = set(seq.tasks[t].introduced)

        parent_of_new: dict[int, int] = {}
        for s in seq.tasks[t].splits:
            for c in s.children:
                parent_of_new[c] = s.parent

        group_of: list[int] = []
        for c in student:
            if c not in new_classes:
                group_of.append(teacher_pos[c])
            elif mode == "standard":
                group_of.append(DROPPED)
            elif mode == "mib":
                group_of.append(teacher_pos[BACKGROUND])
            else:  # moon: each new class joins its evolving parent's group
                group_of.append(teacher_pos[parent_of_new[c]])
        return cls(
            mode=mode,
            teacher_space=tuple(teacher),
            student_space=tuple(student),
            group_of=tuple(group_of),
        )


def regroup(p_student: np.ndarray, spec: DistillationSpec) -> np.ndarray:
    """Student probabilities expressed over the teacher space.

    Accepts a single vector or an (N, C) batch. Grouped modes sum each
    group's members in student-index order; standard mode drops new-class
    mass and renormalizes what remains.
    """
    p = np.asarray(p_student, dtype=np.float64)
    single = p.ndim == 1
    rows = p.reshape(1, -1) if single else p
    if rows.shape[1] != len(spec.student_space):
        raise ValueError("probability vector does not match the student space")

    nt = len(spec.teacher_space)
    groups = spec.group_index
    kept = groups != DROPPED
    if spec.mode == "standard":
        out = np.zeros((rows.shape[0], nt))
        old_cols = np.flatnonzero(kept)
        denom = rows[:, old_cols].sum(axis=1)
        if np.any(denom < LOG_FLOOR):
            raise DegenerateInputError(
                "all probability mass sits on dropped classes"
            )
        out[:, groups[old_cols]] = rows[:, old_cols] / denom[:, None]
    else:
        out = np.zeros((rows.shape[0], nt))
        # fixed summation order over student indices keeps results bit-stable
        for j in range(rows.shape[1]):
            out[:, groups[j]] += rows[:, j]
    return out[0] if single else out


def kd_loss(
    q_teacher: np.ndarray, z_student: np.ndarray, spec: DistillationSpec
) -> float:
    """Distillation cross-entropy between teacher probabilities and the
    regrouped student softmax, for one pixel."""
    q = np.asarray(q_teacher, dtype=np.float64)
    p_hat = regroup(softmax(z_student), spec)
    return float(-(q * np.log(np.maximum(p_hat, LOG_FLOOR))).sum())


def kd_loss_batch(
    q_teacher: np.ndarray, z_student: np.ndarray, spec: DistillationSpec
) -> np.ndarray:
    q = np.asarray(q_teacher, dtype=np.float64)
    p_hat = regroup(softmax(z_student), spec)
    return -(q * np.log(np.maximum(p_hat, LOG_FLOOR))).sum(axis=-1)


def kd_grad(
    q_teacher: np.ndarray, z_student: np.ndarray, spec: DistillationSpec
) -> np.ndarray:
    """Exact gradient of kd_loss with respect to the student logits.

    Grouped modes use d/dz_k = p_k (sum_c q_c - q_g(k)/p_hat_g(k)); the
    standard mode differentiates the renormalized expression directly, under
    which dropped-class logits cancel and receive zero gradient. Terms where
    the log floor is active contribute no gradient, matching the implemented
    loss.
    """
    q = np.atleast_2d(np.asarray(q_teacher, dtype=np.float64))
    z = np.asarray(z_student, dtype=np.float64)
    single = z.ndim == 1
    zr = z.reshape(1, -1) if single else z

    p = softmax(zr)
    groups = spec.group_index
    kept = groups != DROPPED

    if spec.mode == "standard":
        old_cols = np.flatnonzero(kept)
        denom = p[:, old_cols].sum(axis=1, keepdims=True)
        if np.any(denom < LOG_FLOOR):
            raise DegenerateInputError(
                "all probability mass sits on dropped classes"
            )
        p_hat = np.zeros((zr.shape[0], len(spec.teacher_space)))
        p_hat[:, groups[old_cols]] = p[:, old_cols] / denom
        active = p_hat > LOG_FLOOR
        q_eff = np.where(active, q, 0.0)
        # sub-simplex softmax over the old classes: d/dz_k = (p_hat_k - q_k) * [k old]
        grad = np.zeros_like(zr)
        q_sum = q_eff.sum(axis=1, keepdims=True)
        grad[:, old_cols] = (
            p[:, old_cols] / denom * q_sum - q_eff[:, groups[old_cols]]
        )
    else:
        p_hat = regroup(p, spec)
        ratio = np.where(p_hat > LOG_FLOOR, q / np.maximum(p_hat, LOG_FLOOR), 0.0)
        weight = (ratio * p_hat).sum(axis=1, keepdims=True)
        grad = p * (weight - ratio[:, groups])
    return grad[0] if single else grad


class MissingTeacherError(ValueError):
    """Distillation requested without teacher probabilities."""


def total_loss(
    z_student: np.ndarray,
    labels: np.ndarray,
    distill_weight: float,
    spec: DistillationSpec | None = None,
    q_teacher: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus weighted distillation over a pixel batch.

    Returns the scalar objective and its gradient with respect to the
    student logits (already divided by the batch size).
    """
    z = np.asarray(z_student, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("empty batch")
    labels = np.asarray(labels)
    n = z.shape[0]

    p = softmax(z)
    rows = np.arange(n)
    ce = -np.log(np.maximum(p[rows, labels], LOG_FLOOR))
    grad = p.copy()
    grad[rows, labels] -= 1.0

    loss = float(ce.mean())
    if distill_weight > 0.0:
        if spec is None or q_teacher is None:
            raise MissingTeacherError(
                "distill_weight > 0 requires teacher probabilities and a spec"
            )
        loss += distill_weight * float(kd_loss_batch(q_teacher, z, spec).mean())
        grad += distill_weight * kd_grad(q_teacher, z, spec)
    return loss, grad / n
