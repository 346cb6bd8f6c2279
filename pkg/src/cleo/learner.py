"""Continually trained pixel classifier with an expandable head.

The model is a single tanh hidden layer over per-pixel features followed by
a linear classification head whose width grows with the label space. All
training state lives in plain float64 arrays, gradients are closed-form, and
every random choice flows from one experiment seed, so runs are bit-for-bit
reproducible.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import losses as L
from .ontology import TaskSequence, eval_label_space, final_eval_map, label_space_at
from .rng import Xoshiro256StarStar, derive_seed
from .validation import as_feature_matrix, as_label_vector, encode_labels

HEAD_INIT_MODES = ("copy_parent", "zero", "random")
METHODS = ("finetune", "joint", "kd_standard", "mib", "moon")

# distillation mode per method (None = plain cross-entropy)
_METHOD_MODE = {"kd_standard": "standard", "mib": "mib", "moon": "moon"}

# substream tags so training, init, and expansion never share a stream
_INIT_STREAM = 1
_TRAIN_STREAM = 2
_EXPAND_STREAM = 3


class NumericError(RuntimeError):
    """Training produced a non-finite objective."""


@dataclass
class TrainConfig:
    lr_first: float = 0.01
    lr_later: float = 0.001
    epochs: int = 30
    batch_pixels: int = 256
    distill_weight: float = 1.0
    momentum: float = 0.0
    seed: int = 0
    head_init: str = "copy_parent"

    def __post_init__(self):
        if self.lr_first <= 0 or self.lr_later <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_pixels < 1:
            raise ValueError("batch_pixels must be >= 1")
        if self.distill_weight < 0:
            raise ValueError("distill_weight must be >= 0")
        if self.head_init not in HEAD_INIT_MODES:
            raise ValueError(f"unknown head_init {self.head_init!r}")


@dataclass
class ModelParams:
    w_hidden: np.ndarray  # (d_in, H)
    b_hidden: np.ndarray  # (H,)
    w_head: np.ndarray    # (H, C)
    b_head: np.ndarray    # (C,)

    @property
    def d_in(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def hidden_units(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def num_outputs(self) -> int:
        return self.w_head.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.w_hidden.copy(),
            self.b_hidden.copy(),
            self.w_head.copy(),
            self.b_head.copy(),
        )

    def arrays(self):
        return (self.w_hidden, self.b_hidden, self.w_head, self.b_head)


@dataclass(frozen=True)
class TeacherSnapshot:
    """Frozen copy of the previous-task model and its label space."""

    params: ModelParams
    label_space: tuple[int, ...]

    @classmethod
    def of(cls, params: ModelParams, label_space) -> "TeacherSnapshot":
        return cls(params=params.copy(), label_space=tuple(label_space))


def _xavier(rng: Xoshiro256StarStar, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    u = np.array([rng.uniform() for _ in range(n)])
    return ((2.0 * u - 1.0) * bound).reshape(shape)


def init_model(d_in: int, hidden_units: int, c0: int, seed: int) -> ModelParams:
    """Seeded Xavier-uniform weights, zero biases."""
    if d_in < 1 or hidden_units < 1 or c0 < 1:
        raise ValueError("degenerate architecture")
    rng = Xoshiro256StarStar(derive_seed(seed, _INIT_STREAM))
    return ModelParams(
        w_hidden=_xavier(rng, d_in, hidden_units, (d_in, hidden_units)),
        b_hidden=np.zeros(hidden_units),
        w_head=_xavier(rng, hidden_units, c0, (hidden_units, c0)),
        b_head=np.zeros(c0),
    )


def expand_head(
    model: ModelParams,
    new_classes,
    splits,
    mode: str,
    space_before,
    seed: int = 0,
) -> ModelParams:
    """Append one head column per new class.

    copy_parent gives each child its split parent's column and lowers both
    the children's and the parent's bias by ln(m+1), which redistributes the
    parent's probability mass inside its group without changing any grouped
    probability. zero and random initialize fresh columns.
    """
    if mode not in HEAD_INIT_MODES:
        raise ValueError(f"unknown head_init {mode!r}")
    new_classes = list(new_classes)
    col_of = {cid: i for i, cid in enumerate(space_before)}
    parent_of = {}
    group_size = {}
    for s in splits:
        for c in s.children:
            parent_of[c] = s.parent
        group_size[s.parent] = len(s.children)

    h = model.hidden_units
    old_c = model.num_outputs
    out = ModelParams(
        w_hidden=model.w_hidden.copy(),
        b_hidden=model.b_hidden.copy(),
        w_head=np.zeros((h, old_c + len(new_classes))),
        b_head=np.zeros(old_c + len(new_classes)),
    )
    out.w_head[:, :old_c] = model.w_head
    out.b_head[:old_c] = model.b_head

    if mode == "random":
        rng = Xoshiro256StarStar(derive_seed(seed, _EXPAND_STREAM))
        fresh = _xavier(rng, h, old_c + len(new_classes), (h, len(new_classes)))
        out.w_head[:, old_c:] = fresh
        return out
    if mode == "zero":
        return out

    for offset, cid in enumerate(new_classes):
        if cid not in parent_of:
            raise ValueError(f"no split assigns a parent to class id {cid}")
        parent = parent_of[cid]
        if parent not in col_of:
            raise ValueError(f"unknown parent id {parent}")
        pc = col_of[parent]
        shrink = math.log(group_size[parent] + 1)
        out.w_head[:, old_c + offset] = model.w_head[:, pc]
        out.b_head[old_c + offset] = model.b_head[pc] - shrink
    for parent, m in group_size.items():
        if parent in col_of:
            out.b_head[col_of[parent]] -= math.log(m + 1)
    return out


def forward(model: ModelParams, features) -> np.ndarray:
    """Per-pixel logits: head(tanh(hidden(x)))."""
    X = as_feature_matrix(features, model.d_in)
    hidden = np.tanh(X @ model.w_hidden + model.b_hidden)
    return hidden @ model.w_head + model.b_head


@dataclass
class Gradients:
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_head: np.ndarray
    b_head: np.ndarray

    def arrays(self):
        return (self.w_hidden, self.b_hidden, self.w_head, self.b_head)


def backward(
    model: ModelParams,
    features,
    label_idx,
    teacher_probs=None,
    spec=None,
    distill_weight: float = 0.0,
) -> tuple[float, Gradients]:
    """Objective and its exact gradients for one pixel batch.

    label_idx indexes the model's output columns; the composite objective is
    mean cross-entropy plus distill_weight times the distillation loss.
    """
    X = as_feature_matrix(features, model.d_in)
    y = as_label_vector(label_idx, X.shape[0])
    hidden = np.tanh(X @ model.w_hidden + model.b_hidden)
    logits = hidden @ model.w_head + model.b_head

    loss, d_logits = L.total_loss(
        logits, y, distill_weight, spec=spec, q_teacher=teacher_probs
    )
    d_hidden = d_logits @ model.w_head.T
    d_pre = d_hidden * (1.0 - hidden * hidden)
    grads = Gradients(
        w_hidden=X.T @ d_pre,
        b_hidden=d_pre.sum(axis=0),
        w_head=hidden.T @ d_logits,
        b_head=d_logits.sum(axis=0),
    )
    return loss, grads


def _sgd(
    model: ModelParams,
    X: np.ndarray,
    y_idx: np.ndarray,
    *,
    lr: float,
    epochs: int,
    batch_pixels: int,
    momentum: float,
    rng: Xoshiro256StarStar,
    distill_weight: float = 0.0,
    teacher_probs: np.ndarray | None = None,
    spec=None,
) -> tuple[ModelParams, list[float]]:
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    model = model.copy()
    velocity = [np.zeros_like(a) for a in model.arrays()]
    trace = []
    order = list(range(n))
    for _ in range(epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, n, batch_pixels):
            idx = order[start : start + batch_pixels]
            q = teacher_probs[idx] if teacher_probs is not None else None
            loss, grads = backward(
                model, X[idx], y_idx[idx], q, spec, distill_weight
            )
            epoch_loss += loss * len(idx)
            for vel, param, grad in zip(velocity, model.arrays(), grads.arrays()):
                vel *= momentum
                vel += grad
                param -= lr * vel
        mean_loss = epoch_loss / n
        if not math.isfinite(mean_loss):
            raise NumericError(f"non-finite objective: {mean_loss}")
        trace.append(mean_loss)
    return model, trace


def train_task(
    model: ModelParams,
    seq: TaskSequence,
    t: int,
    dataset,
    teacher: TeacherSnapshot | None,
    cfg: TrainConfig,
    distill_mode: str | None = None,
) -> tuple[ModelParams, list[float]]:
    """Minibatch SGD over one task's pixels.

    The dataset must already be projected into task t's label space; the
    teacher (required when distilling at t >= 1) supplies per-pixel
    probabilities over the previous label space.
    """
    space = label_space_at(seq, t)
    X = as_feature_matrix(dataset.features)
    y_idx = encode_labels(as_label_vector(dataset.labels, X.shape[0]), space)

    distill = cfg.distill_weight if (distill_mode and t >= 1) else 0.0
    spec = None
    teacher_probs = None
    if distill > 0.0:
        if teacher is None:
            raise L.MissingTeacherError(
                f"task {t}: distillation requires a teacher snapshot"
            )
        spec = L.DistillationSpec.build(seq, t, distill_mode)
        teacher_probs = L.softmax(forward(teacher.params, X))

    rng = Xoshiro256StarStar(derive_seed(cfg.seed, _TRAIN_STREAM, t))
    return _sgd(
        model,
        X,
        y_idx,
        lr=cfg.lr_first if t == 0 else cfg.lr_later,
        epochs=cfg.epochs,
        batch_pixels=cfg.batch_pixels,
        momentum=cfg.momentum,
        rng=rng,
        distill_weight=distill,
        teacher_probs=teacher_probs,
        spec=spec,
    )


@dataclass(frozen=True)
class Checkpoint:
    params: ModelParams
    label_space: tuple[int, ...]


@dataclass
class RunResult:
    method: str
    checkpoints: list[Checkpoint]
    traces: list[list[float]] = field(default_factory=list)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def run_sequence(
    seq: TaskSequence,
    datasets,
    method: str,
    cfg: TrainConfig,
    d_in: int,
    hidden_units: int = 32,
) -> RunResult:
    """Run a full continual (or joint) experiment over a task sequence.

    datasets holds one task dataset per task, each with .features, .labels
    (projected into the task's label space) and .finest (leaf-level labels,
    needed to relabel the union for joint training).
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if len(datasets) != len(seq.tasks):
        raise ValueError(
            f"{len(datasets)} datasets for {len(seq.tasks)} tasks"
        )

    if method == "joint":
        space = eval_label_space(seq)
        fem = final_eval_map(seq)
        X = np.concatenate([as_feature_matrix(d.features) for d in datasets])
        finest = np.concatenate([as_label_vector(d.finest) for d in datasets])
        table = np.zeros(seq.ontology.num_classes, dtype=np.int64)
        for leaf, target in fem.items():
            table[leaf] = target
        y_idx = encode_labels(table[finest], space)
        model = init_model(d_in, hidden_units, len(space), cfg.seed)
        rng = Xoshiro256StarStar(derive_seed(cfg.seed, _TRAIN_STREAM, 0))
        model, trace = _sgd(
            model,
            X,
            y_idx,
            lr=cfg.lr_first,
            epochs=cfg.epochs,
            batch_pixels=cfg.batch_pixels,
            momentum=cfg.momentum,
            rng=rng,
        )
        return RunResult(
            method=method,
            checkpoints=[Checkpoint(model, tuple(space))],
            traces=[trace],
        )

    mode = _METHOD_MODE.get(method)
    model = init_model(d_in, hidden_units, len(label_space_at(seq, 0)), cfg.seed)
    checkpoints: list[Checkpoint] = []
    traces: list[list[float]] = []
    teacher = None
    for t in range(len(seq.tasks)):
        if t >= 1:
            teacher = TeacherSnapshot.of(model, label_space_at(seq, t - 1))
            model = expand_head(
                model,
                seq.tasks[t].introduced,
                seq.tasks[t].splits,
                cfg.head_init,
                label_space_at(seq, t - 1),
                seed=cfg.seed,
            )
        model, trace = train_task(
            model, seq, t, datasets[t], teacher if mode else None, cfg, mode
        )
        checkpoints.append(Checkpoint(model.copy(), tuple(label_space_at(seq, t))))
        traces.append(trace)
    return RunResult(method=method, checkpoints=checkpoints, traces=traces)


# ---------------------------------------------------------------------------
# checkpoint files: little-endian binary with magic "CLEO"

_MAGIC = b"CLEO"
_VERSION = 1


def save_checkpoint(path, params: ModelParams, class_names) -> None:
    names = list(class_names)
    if len(names) != params.num_outputs:
        raise ValueError("one class name per head column required")
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack(
        "<IIII", _VERSION, params.d_in, params.hidden_units, params.num_outputs
    )
    for arr in params.arrays():
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf += struct.pack("<I", len(names))
    for name in names:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[ModelParams, list[str]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, d_in, hidden, c = struct.unpack_from("<IIII", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 20

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        return arr.astype(np.float64)

    params = ModelParams(
        w_hidden=take((d_in, hidden)),
        b_hidden=take((hidden,)),
        w_head=take((hidden, c)),
        b_head=take((c,)),
    )
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    names = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        names.append(raw[off : off + ln].decode("utf-8"))
        off += ln
    return params, names


# ---------------------------------------------------------------------------
# sklearn-style facade

class TanhPixelClassifier(BaseEstimator, ClassifierMixin):
    """Pixel classifier with the standard fit/predict estimator surface.

    Wraps the same float64 model and seeded SGD as the continual loop, so it
    composes with sklearn tooling (cross-validation, pipelines) while staying
    bit-reproducible. `classes` may be passed to fit when the label space is
    wider than the labels present in the batch.
    """

    def __init__(
        self,
        hidden_units: int = 32,
        lr: float = 0.01,
        epochs: int = 30,
        batch_pixels: int = 256,
        momentum: float = 0.0,
        seed: int = 0,
    ):
        self.hidden_units = hidden_units
        self.lr = lr
        self.epochs = epochs
        self.batch_pixels = batch_pixels
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y, classes=None):
        X = as_feature_matrix(X)
        y = as_label_vector(y, X.shape[0])
        self.classes_ = (
            np.unique(y) if classes is None else np.asarray(list(classes))
        )
        y_idx = encode_labels(y, self.classes_)
        model = init_model(
            X.shape[1], self.hidden_units, len(self.classes_), self.seed
        )
        rng = Xoshiro256StarStar(derive_seed(self.seed, _TRAIN_STREAM, 0))
        self.params_, self.loss_trace_ = _sgd(
            model,
            X,
            y_idx,
            lr=self.lr,
            epochs=self.epochs,
            batch_pixels=self.batch_pixels,
            momentum=self.momentum,
            rng=rng,
        )
        return self

    @classmethod
    def from_params(cls, params: ModelParams, classes) -> "TanhPixelClassifier":
        est = cls(hidden_units=params.hidden_units)
        est.params_ = params
        est.classes_ = np.asarray(list(classes))
        est.loss_trace_ = []
        return est

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("classifier is not fitted")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        return forward(self.params_, X)

    def predict_proba(self, X) -> np.ndarray:
        return L.softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
