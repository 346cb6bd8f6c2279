"""Synthetic hierarchical segmentation scenes with controllable difficulty.

Scenes are rectangle tilings of a grid; each region carries one leaf class
whose per-pixel features are an isotropic Gaussian around the class mean.
Means follow the ontology: root classes sit on well-separated anchors, and
every descendant is placed on a sphere around its parent with a radius that
halves per level. Separation and noise are chosen so the Bayes error is
negligible at the parent level, which lets benchmarks attribute IoU losses
to forgetting rather than to data difficulty.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ontology import (
    BACKGROUND,
    LabelGrid,
    Ontology,
    OntologyError,
    TaskSequence,
    final_eval_map,
    project_ground_truth,
    read_label_grid,
    write_label_grid,
)
from .rng import Xoshiro256StarStar, derive_seed

_ANCHOR_STREAM = 11
_SCENE_STREAM = 12
_EVAL_STREAM = 13

_MAX_PLACEMENT_DRAWS = 10_000


@dataclass
class FeatureGrid:
    """Per-pixel feature vectors for one scene, shape (H, W, d_in)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3 or arr.size == 0:
            raise ValueError("feature grid must be a non-empty 3-d array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature grid contains non-finite values")
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def d_in(self) -> int:
        return self.values.shape[2]

    def pixels(self) -> np.ndarray:
        return self.values.reshape(-1, self.values.shape[2])


@dataclass(frozen=True)
class GaussianClassModel:
    """Class means over feature space plus the shared leaf noise scale."""

    means: dict[int, np.ndarray]  # every class, inner nodes included
    sigma: float
    d_in: int

    def leaf_mean(self, cid: int) -> np.ndarray:
        return self.means[cid]


@dataclass(frozen=True)
class SceneSpec:
    height: int = 24
    width: int = 24
    regions: int = 12
    min_side: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dimensions must be positive")
        if self.regions < 1:
            raise ValueError("need at least one region")
        if self.min_side < 1:
            raise ValueError("min_side must be positive")


def build_class_model(
    ontology: Ontology,
    d_in: int,
    anchor_sep: float,
    child_radius: float,
    sigma: float,
    seed: int,
) -> GaussianClassModel:
    """Place class means: separated root anchors, children on parent spheres.

    Root anchors are redrawn until pairwise distances reach anchor_sep; the
    radius for descendants halves at each level below the root so subtrees
    stay closer to their parent than to any other family.
    """
    if d_in < 2:
        raise ValueError("d_in must be at least 2")
    if child_radius < 0:
        raise ValueError("child_radius must be non-negative")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")

    rng = Xoshiro256StarStar(derive_seed(seed, _ANCHOR_STREAM))
    means: dict[int, np.ndarray] = {}

    roots = [c for c in range(len(ontology)) if ontology.parent_of(c) is None]
    placed: list[np.ndarray] = []
    draws = 0
    for cid in roots:
        while True:
            draws += 1
            if draws > _MAX_PLACEMENT_DRAWS:
                raise RuntimeError(
                    "inseparable configuration: could not place root anchors"
                )
            candidate = anchor_sep * np.array(rng.unit_vector(d_in))
            if all(
                np.linalg.norm(candidate - other) >= anchor_sep
                for other in placed
            ):
                break
        placed.append(candidate)
        means[cid] = candidate

    # depth-ordered walk keeps the draw sequence deterministic. Children are
    # redrawn until siblings point in well-spread directions (a split stays
    # learnable and the parent's remainder does not ride along with any one
    # child) and until every previously placed class keeps its distance, so
    # pairwise Bayes errors stay controlled by sigma alone.
    frontier = list(roots)
    depth = {c: 0 for c in roots}
    sibling_sets: dict[int, list[np.ndarray]] = {}
    while frontier:
        nxt: list[int] = []
        for parent in frontier:
            radius = child_radius * (0.5 ** depth[parent])
            siblings = sibling_sets.setdefault(parent, [])
            for child in ontology.children_of(parent):
                family = {parent, *ontology.children_of(parent)}
                for attempt in range(_MAX_PLACEMENT_DRAWS):
                    offset = radius * np.array(rng.unit_vector(d_in))
                    if radius == 0:
                        break
                    if any(
                        np.linalg.norm(offset - o) < 1.45 * radius
                        for o in siblings
                    ):
                        continue
                    pos = means[parent] + offset
                    if all(
                        np.linalg.norm(pos - placed) >= 0.6 * radius
                        for cid, placed in means.items()
                        if cid not in family
                    ):
                        break
                else:
                    raise RuntimeError(
                        "inseparable configuration: could not separate "
                        f"children of {ontology.name_of(parent)!r}"
                    )
                siblings.append(offset)
                means[child] = means[parent] + offset
                depth[child] = depth[parent] + 1
                nxt.append(child)
        frontier = nxt
    return GaussianClassModel(means=means, sigma=float(sigma), d_in=d_in)


def _tile(spec: SceneSpec, rng: Xoshiro256StarStar) -> list[tuple[int, int, int, int]]:
    """Partition the grid into axis-aligned rectangles by recursive splits."""
    rects = [(0, 0, spec.height, spec.width)]  # (top, left, h, w)
    while len(rects) < spec.regions:
        rects.sort(key=lambda r: (-(r[2] * r[3]), r[0], r[1]))
        for i, (top, left, h, w) in enumerate(rects):
            longer = max(h, w)
            if longer < 2 * spec.min_side:
                continue
            cut = spec.min_side + rng.below(longer - 2 * spec.min_side + 1)
            if h >= w:
                a = (top, left, cut, w)
                b = (top + cut, left, h - cut, w)
            else:
                a = (top, left, h, cut)
                b = (top, left + cut, h, w - cut)
            rects[i : i + 1] = [a, b]
            break
        else:
            raise ValueError(
                "region constraints unsatisfiable: grid too small for "
                f"{spec.regions} regions with min_side={spec.min_side}"
            )
    return rects


def generate_scene(
    model: GaussianClassModel,
    spec: SceneSpec,
    leaves,
    preferred=None,
    bias: float = 0.0,
    void_share: float = 0.0,
) -> tuple[FeatureGrid, LabelGrid]:
    """One scene: tiled regions, a leaf class per region, Gaussian features.

    With probability `void_share` a region holds background content (when the
    ontology keeps background childless); with probability `bias` the class
    is drawn from `preferred` instead of from all leaves. The finest grid
    records the drawn leaf ids.
    """
    leaves = list(leaves)
    if not leaves:
        raise ValueError("no leaf classes to draw from")
    preferred = list(preferred) if preferred else []
    draw_void = void_share > 0.0 and BACKGROUND in leaves
    rng = Xoshiro256StarStar(derive_seed(spec.seed, _SCENE_STREAM))

    rects = _tile(spec, rng)
    labels = np.zeros((spec.height, spec.width), dtype=np.int32)
    for top, left, h, w in rects:
        if draw_void and rng.uniform() < void_share:
            cls = BACKGROUND
        else:
            pool = preferred if (preferred and rng.uniform() < bias) else leaves
            cls = pool[rng.below(len(pool))]
        labels[top : top + h, left : left + w] = cls

    n = spec.height * spec.width * model.d_in
    noise = np.array(rng.normals(n)).reshape(spec.height, spec.width, model.d_in)
    base = np.zeros((spec.height, spec.width, model.d_in))
    for cid in np.unique(labels):
        base[labels == cid] = model.means[int(cid)]
    values = base + model.sigma * noise
    return FeatureGrid(values), LabelGrid(labels)


@dataclass
class Scene:
    features: FeatureGrid
    labels: LabelGrid  # task-projected (task scenes) or evaluation ids (eval)
    finest: LabelGrid


@dataclass
class TaskDataset:
    task: int
    scenes: list[Scene]

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([s.features.pixels() for s in self.scenes])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([s.labels.flat() for s in self.scenes])

    @property
    def finest(self) -> np.ndarray:
        return np.concatenate([s.finest.flat() for s in self.scenes])


@dataclass
class Benchmark:
    seq: TaskSequence
    per_task: list[TaskDataset]
    eval_scenes: list[Scene]

    @property
    def eval_features(self) -> np.ndarray:
        return np.concatenate([s.features.pixels() for s in self.eval_scenes])

    @property
    def eval_labels(self) -> np.ndarray:
        return np.concatenate([s.labels.flat() for s in self.eval_scenes])


def content_leaves(seq: TaskSequence, t: int) -> list[int]:
    """Leaves whose task-t projection is not background."""
    onto = seq.ontology
    current = set(seq.tasks[t].introduced)
    out = []
    for leaf in onto.leaves():
        if leaf in current or any(a in current for a in onto.ancestors(leaf)):
            out.append(leaf)
    return out


def generate_benchmark(
    seq: TaskSequence,
    model: GaussianClassModel,
    scenes_per_task: int,
    spec: SceneSpec,
    eval_scenes: int = 24,
    bias: float = 0.7,
    void_share: float = 0.0,
    min_eval_pixels: int = 200,
) -> Benchmark:
    """Per-task training scenes plus one shared evaluation set.

    Task scenes prefer content of the classes being introduced (and carry
    void_share of background content, mirroring the unlabeled areas that
    drive background shift); the eval set draws uniformly and is regenerated
    (up to 5 attempts) until every class that can appear under final_eval_map
    has at least min_eval_pixels pixels.
    """
    onto = seq.ontology
    # background is a valid content leaf where the ontology leaves it childless
    all_leaves = list(onto.leaves())
    fem = final_eval_map(seq)
    fem_table = np.zeros(onto.num_classes, dtype=np.int32)
    for leaf, target in fem.items():
        fem_table[leaf] = target

    per_task = []
    for t in range(len(seq.tasks)):
        preferred = content_leaves(seq, t)
        scenes = []
        for k in range(scenes_per_task):
            sspec = SceneSpec(
                height=spec.height,
                width=spec.width,
                regions=spec.regions,
                min_side=spec.min_side,
                seed=derive_seed(spec.seed, t, k),
            )
            feats, finest = generate_scene(
                model, sspec, all_leaves, preferred, bias, void_share
            )
            scenes.append(
                Scene(
                    features=feats,
                    labels=project_ground_truth(seq, t, finest),
                    finest=finest,
                )
            )
        per_task.append(TaskDataset(task=t, scenes=scenes))

    reachable = set(int(v) for v in fem.values()) - {BACKGROUND}
    for attempt in range(5):
        scenes = []
        for k in range(eval_scenes):
            sspec = SceneSpec(
                height=spec.height,
                width=spec.width,
                regions=spec.regions,
                min_side=spec.min_side,
                seed=derive_seed(spec.seed, _EVAL_STREAM, attempt, k),
            )
            feats, finest = generate_scene(model, sspec, all_leaves)
            scenes.append(
                Scene(
                    features=feats,
                    labels=LabelGrid(fem_table[finest.labels]),
                    finest=finest,
                )
            )
        counts = np.bincount(
            np.concatenate([s.labels.flat() for s in scenes]),
            minlength=onto.num_classes,
        )
        if all(counts[c] >= min_eval_pixels for c in reachable):
            return Benchmark(seq=seq, per_task=per_task, eval_scenes=scenes)
    raise RuntimeError(
        "evaluation set kept missing classes after 5 attempts; "
        "increase eval_scenes or the grid size"
    )


# ---------------------------------------------------------------------------
# files: "CLFG" feature binaries, label-grid text, dataset manifests

_MAGIC = b"CLFG"
_VERSION = 1


def write_feature_grid(grid: FeatureGrid, path) -> None:
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<IIII", _VERSION, grid.height, grid.width, grid.d_in)
    buf += np.ascontiguousarray(grid.values, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_feature_grid(path) -> FeatureGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a feature grid file")
    version, h, w, d = struct.unpack_from("<IIII", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported feature grid version {version}")
    values = np.frombuffer(raw, dtype="<f8", count=h * w * d, offset=20)
    return FeatureGrid(values.reshape(h, w, d).astype(np.float64))


def save_dataset(benchmark: Benchmark, outdir) -> list[Path]:
    """Write scene files plus one manifest per task and one for eval."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def dump(scenes, dirname, manifest_name, task_field):
        folder = outdir / dirname
        folder.mkdir(exist_ok=True)
        entries = []
        for i, scene in enumerate(scenes):
            f = folder / f"scene_{i:03d}.clfg"
            l = folder / f"scene_{i:03d}_labels.txt"
            g = folder / f"scene_{i:03d}_finest.txt"
            write_feature_grid(scene.features, f)
            write_label_grid(scene.labels, l)
            write_label_grid(scene.finest, g)
            written.extend([f, l, g])
            entries.append(
                {
                    "features": str(f.relative_to(outdir)),
                    "labels": str(l.relative_to(outdir)),
                    "finest": str(g.relative_to(outdir)),
                }
            )
        manifest = outdir / manifest_name
        manifest.write_text(
            json.dumps({"task": task_field, "scenes": entries}, indent=2) + "\n",
            encoding="utf-8",
        )
        written.append(manifest)

    for ds in benchmark.per_task:
        dump(ds.scenes, f"task_{ds.task:02d}", f"task_{ds.task:02d}.json", ds.task)
    dump(benchmark.eval_scenes, "eval", "eval.json", "eval")
    return written


def load_dataset(seq: TaskSequence, outdir) -> Benchmark:
    outdir = Path(outdir)

    def read_scenes(manifest_path):
        obj = json.loads(manifest_path.read_text(encoding="utf-8"))
        scenes = []
        for entry in obj["scenes"]:
            scenes.append(
                Scene(
                    features=read_feature_grid(outdir / entry["features"]),
                    labels=read_label_grid(outdir / entry["labels"]),
                    finest=read_label_grid(outdir / entry["finest"]),
                )
            )
        return obj["task"], scenes

    per_task = []
    for t in range(len(seq.tasks)):
        manifest = outdir / f"task_{t:02d}.json"
        if not manifest.exists():
            raise FileNotFoundError(f"missing manifest for task {t}: {manifest}")
        task, scenes = read_scenes(manifest)
        if task != t:
            raise OntologyError(f"{manifest}: manifest task {task} != {t}")
        per_task.append(TaskDataset(task=t, scenes=scenes))
    _, eval_scenes = read_scenes(outdir / "eval.json")
    return Benchmark(seq=seq, per_task=per_task, eval_scenes=eval_scenes)
