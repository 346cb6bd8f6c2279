import numpy as np
import pytest

from cleo.ontology import (
    BACKGROUND,
    LabelGrid,
    Ontology,
    OntologyError,
    SplitSpec,
    TaskSequence,
    TaskSpec,
    class_groups,
    eval_label_space,
    evolving_set,
    final_eval_map,
    infer_splits,
    intro_tasks,
    label_space_at,
    project_ground_truth,
    read_label_grid,
    sequence_from_obj,
    sequence_to_obj,
    validate_sequence,
    write_label_grid,
)
from cleo.presets import PRESET_NAMES, load_preset


def tiny_ontology():
    return Ontology(
        [
            ("background", None),
            ("animal", None),
            ("vehicle", None),
            ("bird", "animal"),
            ("horse", "animal"),
            ("car", "vehicle"),
            ("bicycle", "vehicle"),
        ]
    )


def tiny_sequence():
    onto = tiny_ontology()
    i = onto.id_of
    return TaskSequence(
        ontology=onto,
        tasks=(
            TaskSpec(index=0, introduced=(i("animal"), i("vehicle"))),
            TaskSpec(
                index=1,
                introduced=(i("bird"), i("car")),
                splits=(
                    SplitSpec(i("animal"), (i("bird"),), False),
                    SplitSpec(i("vehicle"), (i("car"),), False),
                ),
            ),
        ),
    )


class TestOntologyStructure:
    def test_background_must_be_first(self):
        with pytest.raises(OntologyError):
            Ontology([("animal", None), ("background", None)])

    def test_background_must_be_parentless(self):
        with pytest.raises(OntologyError):
            Ontology([("background", "background")])

    def test_duplicate_names_rejected(self):
        with pytest.raises(OntologyError):
            Ontology([("background", None), ("a", None), ("a", None)])

    def test_cycle_detected(self):
        with pytest.raises(OntologyError):
            Ontology(
                [("background", None), ("a", "b"), ("b", "a")]
            )

    def test_unknown_parent(self):
        with pytest.raises(OntologyError):
            Ontology([("background", None), ("a", "ghost")])

    def test_navigation(self):
        onto = tiny_ontology()
        assert onto.id_of("car") == 5
        assert onto.name_of(0) == "background"
        assert onto.parent_of(onto.id_of("car")) == onto.id_of("vehicle")
        assert set(onto.children_of(onto.id_of("animal"))) == {3, 4}
        assert onto.is_leaf(onto.id_of("bird"))
        assert not onto.is_leaf(onto.id_of("animal"))
        assert list(onto.ancestors(onto.id_of("car"))) == [onto.id_of("vehicle")]


class TestValidation:
    def test_presets_validate(self):
        for name in PRESET_NAMES:
            report = validate_sequence(load_preset(name))
            assert report.ok, (name, report.violations)

    def test_disjointness_violation(self):
        onto = tiny_ontology()
        i = onto.id_of
        seq = TaskSequence(
            ontology=onto,
            tasks=(
                TaskSpec(index=0, introduced=(i("animal"),)),
                TaskSpec(
                    index=1,
                    introduced=(i("animal"),),
                    splits=(SplitSpec(i("animal"), (i("animal"),), False),),
                ),
            ),
        )
        report = validate_sequence(seq)
        assert not report.ok
        assert any("disjointness" in v for v in report.violations)

    def test_child_not_introduced(self):
        onto = tiny_ontology()
        i = onto.id_of
        seq = TaskSequence(
            ontology=onto,
            tasks=(
                TaskSpec(index=0, introduced=(i("animal"),)),
                TaskSpec(
                    index=1,
                    introduced=(i("bird"),),
                    splits=(
                        SplitSpec(i("animal"), (i("bird"), i("horse")), False),
                    ),
                ),
            ),
        )
        report = validate_sequence(seq)
        assert any("child not introduced" in v for v in report.violations)

    def test_parent_not_seen(self):
        onto = tiny_ontology()
        i = onto.id_of
        seq = TaskSequence(
            ontology=onto,
            tasks=(
                TaskSpec(index=0, introduced=(i("animal"),)),
                TaskSpec(
                    index=1,
                    introduced=(i("car"),),
                    splits=(SplitSpec(i("vehicle"), (i("car"),), False),),
                ),
            ),
        )
        report = validate_sequence(seq)
        assert any("not introduced at an earlier task" in v for v in report.violations)

    def test_introduced_without_split(self):
        onto = tiny_ontology()
        i = onto.id_of
        seq = TaskSequence(
            ontology=onto,
            tasks=(
                TaskSpec(index=0, introduced=(i("animal"),)),
                TaskSpec(index=1, introduced=(i("bird"),)),
            ),
        )
        report = validate_sequence(seq)
        assert any("without a split" in v for v in report.violations)

    def test_empty_remainder_is_warning_not_violation(self):
        onto = tiny_ontology()
        i = onto.id_of
        seq = TaskSequence(
            ontology=onto,
            tasks=(
                TaskSpec(index=0, introduced=(i("animal"),)),
                TaskSpec(
                    index=1,
                    introduced=(i("bird"), i("horse")),
                    splits=(
                        SplitSpec(i("animal"), (i("bird"), i("horse")), False),
                    ),
                ),
            ),
        )
        report = validate_sequence(seq)
        assert report.ok
        assert any("no enumerable remainder" in w for w in report.warnings)


class TestLabelSpace:
    def test_cs_ex1_task0(self):
        seq = load_preset("cs_ex1")
        names = [seq.ontology.name_of(c) for c in label_space_at(seq, 0)]
        assert names == [
            "background", "flat", "construction", "object", "nature",
            "sky", "human", "vehicle",
        ]

    def test_cs_ex1_task1_extends(self):
        seq = load_preset("cs_ex1")
        names = [seq.ontology.name_of(c) for c in label_space_at(seq, 1)]
        assert names[8:] == ["road", "building", "pole", "vegetation", "person", "car"]

    def test_prefix_monotone(self):
        for name in PRESET_NAMES:
            seq = load_preset(name)
            prev = label_space_at(seq, 0)
            for t in range(1, len(seq.tasks)):
                cur = label_space_at(seq, t)
                assert cur[: len(prev)] == prev
                prev = cur

    def test_out_of_range(self):
        seq = load_preset("cs_ex1")
        with pytest.raises(IndexError):
            label_space_at(seq, 6)


class TestEvolvingSet:
    def test_cs_ex2_t6(self):
        seq = load_preset("cs_ex2")
        assert {seq.ontology.name_of(c) for c in evolving_set(seq, 6)} == {"vehicle"}

    def test_cs_ex1_t1(self):
        seq = load_preset("cs_ex1")
        names = {seq.ontology.name_of(c) for c in evolving_set(seq, 1)}
        assert names == {"flat", "construction", "object", "nature", "human", "vehicle"}

    def test_background_only_split(self):
        onto = Ontology(
            [("background", None), ("a", None), ("new", "background")]
        )
        seq = TaskSequence(
            ontology=onto,
            tasks=(
                TaskSpec(index=0, introduced=(1,)),
                TaskSpec(
                    index=1,
                    introduced=(2,),
                    splits=(SplitSpec(BACKGROUND, (2,), False),),
                ),
            ),
        )
        assert evolving_set(seq, 1) == {BACKGROUND}

    def test_range_check(self):
        seq = load_preset("cs_ex1")
        with pytest.raises(IndexError):
            evolving_set(seq, 0)


class TestProjection:
    def test_cs_examples(self):
        seq = load_preset("cs_ex1")
        onto = seq.ontology
        grid = LabelGrid(np.array([[onto.id_of("road"), onto.id_of("sidewalk")]]))
        at0 = project_ground_truth(seq, 0, grid)
        assert at0.labels[0, 0] == onto.id_of("flat")
        assert at0.labels[0, 1] == onto.id_of("flat")
        at1 = project_ground_truth(seq, 1, grid)
        assert at1.labels[0, 0] == onto.id_of("road")
        assert at1.labels[0, 1] == BACKGROUND

    def test_only_current_classes_emitted(self):
        for name in ("cs_ex2", "voc_ex1", "mv_ex2"):
            seq = load_preset(name)
            leaves = np.array(seq.ontology.leaves(), dtype=np.int32)
            grid = LabelGrid(np.tile(leaves, (2, 1)))
            for t in range(len(seq.tasks)):
                out = project_ground_truth(seq, t, grid)
                allowed = set(seq.tasks[t].introduced) | {BACKGROUND}
                assert set(np.unique(out.labels)) <= allowed

    def test_unknown_id_rejected(self):
        seq = load_preset("cs_ex1")
        with pytest.raises(OntologyError):
            project_ground_truth(seq, 0, LabelGrid(np.array([[999]])))


class TestFinalEvalMap:
    def test_cs_ex1(self):
        seq = load_preset("cs_ex1")
        onto = seq.ontology
        fem = final_eval_map(seq)
        assert fem[onto.id_of("sidewalk")] == onto.id_of("flat")
        assert fem[onto.id_of("road")] == onto.id_of("road")

    def test_voc_ex1_virtual_holder(self):
        seq = load_preset("voc_ex1")
        onto = seq.ontology
        fem = final_eval_map(seq)
        assert fem[onto.id_of("car")] == onto.id_of("4-wheeler")
        assert fem[onto.id_of("boat")] == onto.id_of("vehicle")

    def test_introduction_consistency(self):
        # a pixel labelled c at c's introduction task evaluates as c (or as a
        # grouping of content under c, for never-introduced subgroups)
        for name in PRESET_NAMES:
            seq = load_preset(name)
            onto = seq.ontology
            fem = final_eval_map(seq)
            intro = intro_tasks(seq)
            for leaf in onto.leaves():
                target = fem[leaf]
                if target == BACKGROUND:
                    continue
                if leaf in intro:
                    assert target == leaf
                else:
                    anc = [leaf] + list(onto.ancestors(leaf))
                    assert target in anc


class TestClassGroups:
    def test_cs_ex1_sizes(self):
        seq = load_preset("cs_ex1")
        onto = seq.ontology
        groups = class_groups(seq)
        assert {onto.name_of(c) for c in groups.unsplit} == {"sky"}
        assert len(groups.split) == 12
        assert len(groups.retained) == 6
        assert len(groups.evaluated) == 19

    def test_voc_ex3_retained(self):
        seq = load_preset("voc_ex3")
        onto = seq.ontology
        groups = class_groups(seq)
        named = {
            onto.name_of(p): {onto.name_of(c) for c in leaves}
            for p, leaves in groups.retained.items()
        }
        assert named == {
            "animals": {"cat"},
            "household": {"bottle"},
            "vehicle": {"car"},
        }

    def test_single_task_sequence(self):
        onto = tiny_ontology()
        seq = TaskSequence(
            ontology=onto,
            tasks=(TaskSpec(index=0, introduced=(1, 2)),),
        )
        groups = class_groups(seq)
        assert groups.split == frozenset()
        assert groups.retained == {}
        assert groups.unsplit == {1, 2}

    def test_partition_property(self):
        for name in PRESET_NAMES:
            groups = class_groups(load_preset(name))
            parents = set(groups.retained) - {BACKGROUND}
            assert not groups.unsplit & groups.split
            assert not groups.unsplit & parents
            assert not groups.split & parents
            assert groups.evaluated == groups.unsplit | groups.split | parents


class TestEvalLabelSpace:
    def test_background_first_and_complete(self):
        for name in PRESET_NAMES:
            seq = load_preset(name)
            space = eval_label_space(seq)
            assert space[0] == BACKGROUND
            assert set(space[1:]) == set(class_groups(seq).evaluated)
            assert len(space) == len(set(space))


class TestInferSplits:
    def test_modal_parent(self):
        seq = tiny_sequence()
        onto = seq.ontology
        gt = LabelGrid(np.full((10, 10), onto.id_of("car"), dtype=np.int32))
        preds = np.full((10, 10), onto.id_of("vehicle"), dtype=np.int32)
        preds[0, :] = BACKGROUND  # 10% background votes
        result = infer_splits(LabelGrid(preds), gt, seq, 1)
        # bird has no labelled pixels and falls back to background
        assert result.defaulted == {onto.id_of("bird")}
        found = {s.parent: s.children for s in result.splits}
        assert found[onto.id_of("vehicle")] == (onto.id_of("car"),)
        assert found[BACKGROUND] == (onto.id_of("bird"),)

    def test_unlabelled_class_defaults_to_background(self):
        seq = tiny_sequence()
        onto = seq.ontology
        gt = LabelGrid(np.full((4, 4), onto.id_of("bird"), dtype=np.int32))
        preds = LabelGrid(np.full((4, 4), onto.id_of("animal"), dtype=np.int32))
        result = infer_splits(preds, gt, seq, 1)
        assert onto.id_of("car") in result.defaulted
        by_parent = {s.parent: s.children for s in result.splits}
        assert by_parent[BACKGROUND] == (onto.id_of("car"),)

    def test_tie_breaks_toward_background(self):
        seq = tiny_sequence()
        onto = seq.ontology
        gt = LabelGrid(np.full((2, 2), onto.id_of("bird"), dtype=np.int32))
        preds = LabelGrid(
            np.array(
                [
                    [BACKGROUND, BACKGROUND],
                    [onto.id_of("animal"), onto.id_of("animal")],
                ],
                dtype=np.int32,
            )
        )
        result = infer_splits(preds, gt, seq, 1)
        by_parent = {s.parent: s.children for s in result.splits}
        assert onto.id_of("bird") in by_parent[BACKGROUND]


class TestSerialization:
    def test_round_trip_identity(self):
        for name in PRESET_NAMES:
            seq = load_preset(name)
            again = sequence_from_obj(sequence_to_obj(seq))
            assert again.ontology == seq.ontology
            assert again.tasks == seq.tasks

    def test_id_mismatch_detected(self):
        obj = sequence_to_obj(tiny_sequence())
        obj["classes"][1]["id"] = 5
        with pytest.raises(OntologyError):
            sequence_from_obj(obj)

    def test_label_grid_text_round_trip(self, tmp_path):
        grid = LabelGrid(np.array([[0, 1, 2], [3, 4, 5]], dtype=np.int32))
        path = tmp_path / "grid.txt"
        write_label_grid(grid, path)
        text = path.read_text()
        assert text.splitlines()[0] == "2 3"
        back = read_label_grid(path)
        assert np.array_equal(back.labels, grid.labels)

    def test_truncated_grid_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("2 3\n0 1 2\n")
        with pytest.raises(OntologyError):
            read_label_grid(path)
