"""Continual learning over evolving label ontologies.

Class sets grow and refine across a task sequence; grouped distillation
keeps a student consistent with its frozen teacher while known classes split
into finer ones. Ships ontology/task-sequence modelling, the distillation
losses with exact gradients, a small continually trained pixel classifier,
synthetic hierarchical benchmarks, group-wise mIoU evaluation, and a CLI.
"""

from .ontology import (
    BACKGROUND,
    ClassGroupAssignment,
    LabelGrid,
    Ontology,
    SplitSpec,
    TaskSequence,
    TaskSpec,
    class_groups,
    eval_label_space,
    evolving_set,
    final_eval_map,
    infer_splits,
    label_space_at,
    load_sequence,
    project_ground_truth,
    save_sequence,
    validate_sequence,
)
from .losses import (
    DistillationSpec,
    cross_entropy,
    kd_grad,
    kd_loss,
    regroup,
    softmax,
    total_loss,
)
from .learner import (
    ModelParams,
    TanhPixelClassifier,
    TeacherSnapshot,
    TrainConfig,
    backward,
    expand_head,
    forward,
    init_model,
    run_sequence,
    train_task,
)
from .metrics import ConfusionMatrix, GroupReport, group_report, iou, taskwise_report
from .presets import PRESET_NAMES, load_preset
from .synthdata import (
    Benchmark,
    FeatureGrid,
    GaussianClassModel,
    SceneSpec,
    build_class_model,
    generate_benchmark,
    generate_scene,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
