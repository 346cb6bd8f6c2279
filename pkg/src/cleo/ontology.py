"""Evolving class ontologies and task sequences.

An Ontology is a forest of named classes with a distinguished background
class (id 0). A TaskSequence introduces disjoint class subsets task by task;
from task 1 on, every introduced class is split out of an earlier class (or
out of background, for entirely new classes). This module validates sequence
well-formedness, derives label spaces and evolving sets, projects leaf-level
ground truth into each task's label space, and assigns every class to the
unsplit / split / retained evaluation groups.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

BACKGROUND = 0
BACKGROUND_NAME = "background"


class OntologyError(ValueError):
    """Raised for structurally malformed ontologies or grids."""


class Ontology:
    """Rooted class forest; ids are dense and assigned by declaration order.

    Node 0 is always the background class. Parents may be declared in any
    order; links are resolved by name after all nodes are read.
    """

    def __init__(self, nodes: Sequence[tuple[str, Optional[str]]]):
        if not nodes:
            raise OntologyError("ontology has no classes")
        self._names: list[str] = []
        seen: set[str] = set()
        for name, _ in nodes:
            if not name:
                raise OntologyError("empty class name")
            if name in seen:
                raise OntologyError(f"duplicate class name {name!r}")
            seen.add(name)
            self._names.append(name)
        self._ids = {name: i for i, name in enumerate(self._names)}

        root_name, root_parent = nodes[0]
        if root_name != BACKGROUND_NAME or root_parent is not None:
            raise OntologyError(
                "class 0 must be named 'background' and have no parent"
            )

        self._parents: list[Optional[int]] = []
        for name, parent in nodes:
            if parent is None:
                self._parents.append(None)
            elif parent not in self._ids:
                raise OntologyError(f"unknown parent {parent!r} of {name!r}")
            else:
                self._parents.append(self._ids[parent])

        self._children: list[tuple[int, ...]] = [()] * len(self._names)
        kids: dict[int, list[int]] = {}
        for cid, pid in enumerate(self._parents):
            if pid is not None:
                kids.setdefault(pid, []).append(cid)
        for pid, cs in kids.items():
            self._children[pid] = tuple(cs)

        # cycle check: every node must reach a parentless root
        for cid in range(len(self._names)):
            node, hops = cid, 0
            while node is not None:
                node = self._parents[node]
                hops += 1
                if hops > len(self._names):
                    raise OntologyError(
                        f"parent links of {self._names[cid]!r} form a cycle"
                    )

    def __len__(self) -> int:
        return len(self._names)

    @property
    def num_classes(self) -> int:
        return len(self._names)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Ontology)
            and self._names == other._names
            and self._parents == other._parents
        )

    def __hash__(self):
        return hash(tuple(self._names))

    def name_of(self, cid: int) -> str:
        return self._names[cid]

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise OntologyError(f"unknown class name {name!r}") from None

    def parent_of(self, cid: int) -> Optional[int]:
        return self._parents[cid]

    def children_of(self, cid: int) -> tuple[int, ...]:
        return self._children[cid]

    def is_leaf(self, cid: int) -> bool:
        return not self._children[cid]

    def leaves(self) -> tuple[int, ...]:
        return tuple(c for c in range(len(self._names)) if not self._children[c])

    def ancestors(self, cid: int) -> Iterator[int]:
        """Strict ancestors of cid, nearest first."""
        node = self._parents[cid]
        while node is not None:
            yield node
            node = self._parents[node]

    def descendants(self, cid: int) -> Iterator[int]:
        stack = list(self._children[cid])
        while stack:
            node = stack.pop()
            yield node
            stack.extend(self._children[node])

    def nodes(self) -> list[tuple[str, Optional[str]]]:
        return [
            (name, None if pid is None else self._names[pid])
            for name, pid in zip(self._names, self._parents)
        ]


@dataclass(frozen=True)
class SplitSpec:
    """One class map: parent evolves into children at some task.

    exhaustive is True iff the parent ceases to denote any remaining content
    after the split.
    """

    parent: int
    children: tuple[int, ...]
    exhaustive: bool = False

    def __post_init__(self):
        if not self.children:
            raise ValueError("split has no children")
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class TaskSpec:
    index: int
    introduced: tuple[int, ...]
    splits: tuple[SplitSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "introduced", tuple(self.introduced))
        object.__setattr__(self, "splits", tuple(self.splits))


@dataclass(frozen=True)
class TaskSequence:
    ontology: Ontology
    tasks: tuple[TaskSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))

    @property
    def final_task(self) -> int:
        return len(self.tasks) - 1

    def task(self, t: int) -> TaskSpec:
        if not 0 <= t <= self.final_task:
            raise IndexError(f"task index {t} outside 0..{self.final_task}")
        return self.tasks[t]


@dataclass
class LabelGrid:
    """Per-pixel integer class labels for one scene."""

    labels: np.ndarray  # (H, W) integer array

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.size == 0:
            raise OntologyError("label grid must be a non-empty 2-d array")
        self.labels = arr.astype(np.int32, copy=False)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)


@dataclass(frozen=True)
class ClassGroupAssignment:
    """Evaluation groups after the final task.

    unsplit: task-0 classes that never became a split parent.
    split:   classes introduced at tasks >= 1 that never became a split parent.
    retained: holder class -> its never-introduced leaf remainder. Holders are
    the non-exhaustively split parents (background included when it was split)
    plus never-introduced inner classes that group leftover leaves under a
    split parent.
    """

    unsplit: frozenset[int]
    split: frozenset[int]
    retained: dict[int, frozenset[int]]

    @property
    def evaluated(self) -> frozenset[int]:
        """All evaluated classes; background is never evaluated."""
        return (self.unsplit | self.split | set(self.retained)) - {BACKGROUND}


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class InferredSplits:
    splits: tuple[SplitSpec, ...]
    defaulted: frozenset[int]  # introduced classes with zero labelled pixels


# ---------------------------------------------------------------------------
# sequence-level helpers

def intro_tasks(seq: TaskSequence) -> dict[int, int]:
    """Class id -> task at which it was introduced (first occurrence)."""
    out: dict[int, int] = {}
    for task in seq.tasks:
        for c in task.introduced:
            out.setdefault(c, task.index)
    return out


def split_parents(seq: TaskSequence) -> frozenset[int]:
    return frozenset(s.parent for task in seq.tasks for s in task.splits)


def exhausted_parents(seq: TaskSequence) -> frozenset[int]:
    """Parents whose split is marked exhaustive somewhere in the sequence."""
    return frozenset(
        s.parent for task in seq.tasks for s in task.splits if s.exhaustive
    )


def validate_sequence(seq: TaskSequence) -> ValidationReport:
    """Check every TaskSequence invariant; violations are data, not faults.

    Non-exhaustive splits whose remainder is not enumerable in the ontology
    (common for open-world classes such as background) are reported as
    warnings rather than violations.
    """
    report = ValidationReport()
    onto = seq.ontology
    bad = report.violations.append

    if not seq.tasks:
        bad("sequence has no tasks")
        return report

    for pos, task in enumerate(seq.tasks):
        if task.index != pos:
            bad(f"task at position {pos} carries index {task.index}")

    intro_at: dict[int, int] = {}
    for task in seq.tasks:
        for c in task.introduced:
            if not 0 <= c < onto.num_classes:
                bad(f"task {task.index}: introduced id {c} is not in the ontology")
                continue
            if c == BACKGROUND:
                bad(f"task {task.index}: background cannot be introduced")
                continue
            if c in intro_at:
                bad(
                    f"disjointness: {onto.name_of(c)!r} introduced at task "
                    f"{intro_at[c]} and again at task {task.index}"
                )
            else:
                intro_at[c] = task.index

    seen_before: set[int] = set()
    exhausted_so_far: set[int] = set()
    for task in seq.tasks:
        t = task.index
        introduced = set(task.introduced)
        if t == 0:
            if task.splits:
                bad("task 0 must not carry splits (base task)")
            seen_before |= introduced
            continue

        covered: dict[int, int] = {}
        parents_this_task: set[int] = set()
        for s in task.splits:
            pname = onto.name_of(s.parent) if 0 <= s.parent < len(onto) else str(s.parent)
            if s.parent in parents_this_task:
                bad(f"task {t}: class {pname!r} appears as parent of two splits")
            parents_this_task.add(s.parent)
            if s.parent != BACKGROUND and s.parent not in seen_before:
                bad(
                    f"task {t}: split parent {pname!r} was not introduced "
                    "at an earlier task"
                )
            if s.parent in exhausted_so_far:
                bad(f"task {t}: {pname!r} is split again after an exhaustive split")
            if len(set(s.children)) != len(s.children):
                bad(f"task {t}: split of {pname!r} lists a child twice")
            for c in s.children:
                cname = onto.name_of(c) if 0 <= c < len(onto) else str(c)
                if c == s.parent:
                    bad(f"task {t}: {pname!r} cannot be its own split child")
                    continue
                if c == BACKGROUND:
                    bad(f"task {t}: background cannot be a split child")
                    continue
                if c not in introduced:
                    bad(
                        f"task {t}: child not introduced: {cname!r} is split "
                        f"from {pname!r} but missing from the task's classes"
                    )
                if onto.parent_of(c) != s.parent:
                    bad(
                        f"task {t}: ontology parent of {cname!r} is not {pname!r}"
                    )
                if c in covered:
                    bad(f"task {t}: {cname!r} appears in two splits")
                covered[c] = s.parent
        for c in introduced:
            if c not in covered and 0 <= c < onto.num_classes:
                bad(
                    f"task {t}: {onto.name_of(c)!r} is introduced without a "
                    "split assigning its origin"
                )
        exhausted_so_far |= {s.parent for s in task.splits if s.exhaustive}
        seen_before |= introduced

    # remainder consistency of the exhaustive flags
    introduced_all = set(intro_at)
    for task in seq.tasks:
        for s in task.splits:
            if s.parent == BACKGROUND:
                if s.exhaustive:
                    bad(
                        f"task {task.index}: a background split cannot be "
                        "exhaustive"
                    )
                continue
            if not 0 <= s.parent < onto.num_classes:
                continue
            remainder = [
                d
                for d in onto.descendants(s.parent)
                if onto.is_leaf(d) and d not in introduced_all
            ]
            pname = onto.name_of(s.parent)
            if s.exhaustive and remainder:
                report.warnings.append(
                    f"task {task.index}: split of {pname!r} is marked "
                    f"exhaustive but {onto.name_of(remainder[0])!r} is never "
                    "introduced"
                )
            if not s.exhaustive and not remainder:
                report.warnings.append(
                    f"task {task.index}: non-exhaustive split of {pname!r} "
                    "has no enumerable remainder in the ontology"
                )
    return report


def label_space_at(seq: TaskSequence, t: int) -> list[int]:
    """Background followed by C_0..C_t in introduction order.

    The position of a class in this list is its logit index; exhaustively
    split parents keep their slot so teacher and student indices stay aligned.
    """
    seq.task(t)
    space = [BACKGROUND]
    for task in seq.tasks[: t + 1]:
        space.extend(task.introduced)
    return space


def evolving_set(seq: TaskSequence, t: int) -> frozenset[int]:
    """Parents that evolve at task t (background included when split)."""
    if not 1 <= t <= seq.final_task:
        raise IndexError(f"task index {t} outside 1..{seq.final_task}")
    return frozenset(s.parent for s in seq.tasks[t].splits)


def _projection_table(seq: TaskSequence, t: int) -> np.ndarray:
    onto = seq.ontology
    current = set(seq.task(t).introduced)
    table = np.full(onto.num_classes, BACKGROUND, dtype=np.int32)
    for cid in range(onto.num_classes):
        if cid in current:
            table[cid] = cid
            continue
        for anc in onto.ancestors(cid):
            if anc in current:
                table[cid] = anc
                break
    return table


def project_ground_truth(seq: TaskSequence, t: int, finest: LabelGrid) -> LabelGrid:
    """Task-t ground truth: only C_t is annotated, everything else is bg.

    A pixel keeps its class if the finest label is introduced at t, is mapped
    to its nearest ancestor in C_t if one exists, and falls to background
    otherwise.
    """
    labels = finest.labels
    if labels.min() < 0 or labels.max() >= seq.ontology.num_classes:
        raise OntologyError("finest grid contains an unknown class id")
    table = _projection_table(seq, t)
    return LabelGrid(table[labels])


def final_eval_map(seq: TaskSequence) -> dict[int, int]:
    """Finest leaf class -> class it is evaluated as after the final task.

    Introduced leaves evaluate as themselves. A never-introduced leaf
    evaluates as the nearest ancestor that either remains evaluable
    (introduced, not exhaustively split) or is itself a never-introduced
    grouping with an evaluable ancestor; with no such ancestor the content is
    background.
    """
    onto = seq.ontology
    introduced = set(intro_tasks(seq))
    exhausted = exhausted_parents(seq)
    evaluable = introduced - exhausted

    def target(leaf: int) -> int:
        node = onto.parent_of(leaf)
        while node is not None:
            if node == BACKGROUND:
                return BACKGROUND
            if node in evaluable:
                return node
            if node not in introduced and any(
                a in evaluable for a in onto.ancestors(node)
            ):
                return node
            node = onto.parent_of(node)
        return BACKGROUND

    return {
        leaf: (leaf if leaf in introduced else target(leaf))
        for leaf in onto.leaves()
    }


def class_groups(seq: TaskSequence) -> ClassGroupAssignment:
    """Partition the evaluated classes into unsplit / split / retained."""
    onto = seq.ontology
    intro_at = intro_tasks(seq)
    parents = split_parents(seq)
    exhausted = exhausted_parents(seq)

    unsplit = frozenset(
        c for c, t in intro_at.items() if t == 0 and c not in parents
    )
    split = frozenset(
        c for c, t in intro_at.items() if t >= 1 and c not in parents
    )

    retained: dict[int, set[int]] = {
        p: set() for p in parents if p not in exhausted
    }
    fem = final_eval_map(seq)
    for leaf, target in fem.items():
        if leaf in intro_at or target == BACKGROUND:
            continue
        if target not in intro_at:  # never-introduced grouping, e.g. a subgroup
            retained.setdefault(target, set()).add(leaf)
        elif target in retained:
            retained[target].add(leaf)
    return ClassGroupAssignment(
        unsplit=unsplit,
        split=split,
        retained={p: frozenset(r) for p, r in retained.items()},
    )


def eval_label_space(seq: TaskSequence) -> list[int]:
    """Background plus every evaluated class, in a deterministic order.

    Introduced classes keep their label_space_at order; never-introduced
    retained holders follow, by ascending id.
    """
    groups = class_groups(seq)
    evaluated = groups.evaluated
    space = [BACKGROUND]
    space.extend(
        c for c in label_space_at(seq, seq.final_task)[1:] if c in evaluated
    )
    introduced = set(intro_tasks(seq))
    space.extend(sorted(c for c in evaluated if c not in introduced))
    return space


def infer_splits(
    teacher_predictions: LabelGrid,
    task_gt: LabelGrid,
    seq: TaskSequence,
    t: int,
) -> InferredSplits:
    """Reconstruct S_t from teacher predictions on current-task pixels.

    Each introduced class is assigned the modal teacher prediction over its
    ground-truth pixels; ties break toward background, then the lowest id.
    Classes without labelled pixels default to background and are reported.
    """
    if teacher_predictions.labels.shape != task_gt.labels.shape:
        raise OntologyError("prediction and ground-truth grids differ in shape")
    task = seq.task(t)
    preds = teacher_predictions.flat()
    gt = task_gt.flat()

    by_parent: dict[int, list[int]] = {}
    defaulted: set[int] = set()
    for c_new in task.introduced:
        votes = preds[gt == c_new]
        if votes.size == 0:
            defaulted.add(c_new)
            parent = BACKGROUND
        else:
            counts = np.bincount(votes)
            best = counts.max()
            winners = np.flatnonzero(counts == best)
            parent = BACKGROUND if BACKGROUND in winners else int(winners[0])
        by_parent.setdefault(parent, []).append(c_new)

    splits = tuple(
        SplitSpec(parent=p, children=tuple(children), exhaustive=False)
        for p, children in sorted(by_parent.items())
    )
    return InferredSplits(splits=splits, defaulted=frozenset(defaulted))


# ---------------------------------------------------------------------------
# persistence

def sequence_to_obj(seq: TaskSequence) -> dict:
    onto = seq.ontology
    return {
        "classes": [
            {"id": i, "name": name, "parent": parent}
            for i, (name, parent) in enumerate(onto.nodes())
        ],
        "tasks": [
            {
                "t": task.index,
                "introduced": [onto.name_of(c) for c in task.introduced],
                "splits": [
                    {
                        "parent": onto.name_of(s.parent),
                        "children": [onto.name_of(c) for c in s.children],
                        "exhaustive": s.exhaustive,
                    }
                    for s in task.splits
                ],
            }
            for task in seq.tasks
        ],
    }


def sequence_from_obj(obj: dict) -> TaskSequence:
    classes = obj["classes"]
    nodes = [(c["name"], c.get("parent")) for c in classes]
    onto = Ontology(nodes)
    for i, c in enumerate(classes):
        if "id" in c and c["id"] != i:
            raise OntologyError(
                f"class {c['name']!r} declares id {c['id']} but ids follow "
                "declaration order"
            )
    tasks = []
    for entry in obj["tasks"]:
        splits = tuple(
            SplitSpec(
                parent=onto.id_of(s["parent"]),
                children=tuple(onto.id_of(c) for c in s["children"]),
                exhaustive=bool(s["exhaustive"]),
            )
            for s in entry.get("splits", ())
        )
        tasks.append(
            TaskSpec(
                index=int(entry["t"]),
                introduced=tuple(onto.id_of(n) for n in entry["introduced"]),
                splits=splits,
            )
        )
    return TaskSequence(ontology=onto, tasks=tuple(tasks))


def save_sequence(seq: TaskSequence, path) -> None:
    Path(path).write_text(
        json.dumps(sequence_to_obj(seq), indent=2) + "\n", encoding="utf-8"
    )


def load_sequence(path) -> TaskSequence:
    return sequence_from_obj(json.loads(Path(path).read_text(encoding="utf-8")))


def write_label_grid(grid: LabelGrid, path) -> None:
    """Text format: first line "H W", then H lines of W integers."""
    lines = [f"{grid.height} {grid.width}"]
    lines.extend(" ".join(str(v) for v in row) for row in grid.labels)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_label_grid(path) -> LabelGrid:
    text = Path(path).read_text(encoding="utf-8").split()
    if len(text) < 2:
        raise OntologyError(f"{path}: truncated label grid")
    h, w = int(text[0]), int(text[1])
    body = text[2:]
    if len(body) != h * w:
        raise OntologyError(f"{path}: expected {h * w} labels, found {len(body)}")
    labels = np.array([int(v) for v in body], dtype=np.int32).reshape(h, w)
    return LabelGrid(labels)
