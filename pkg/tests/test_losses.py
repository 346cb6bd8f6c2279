import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cleo.losses import (
    DegenerateInputError,
    DistillationSpec,
    MissingTeacherError,
    cross_entropy,
    kd_grad,
    kd_loss,
    regroup,
    softmax,
    total_loss,
)
from cleo.presets import load_preset

# the worked example: teacher [bg, animal, vehicle], student adds bird, car,
# horse with splits animal->bird, vehicle->car, bg->horse
MOON = DistillationSpec(
    mode="moon",
    teacher_space=(0, 1, 2),
    student_space=(0, 1, 2, 3, 4, 5),
    group_of=(0, 1, 2, 1, 2, 0),
)
MIB = DistillationSpec(
    mode="mib", teacher_space=(0, 1), student_space=(0, 1, 2), group_of=(0, 1, 0)
)
STD = DistillationSpec(
    mode="standard",
    teacher_space=(0, 1),
    student_space=(0, 1, 2),
    group_of=(0, 1, -1),
)


def fd_gradient(q, z, spec, eps=1e-5):
    """Central finite differences of the implemented loss."""
    g = np.zeros_like(z, dtype=np.float64)
    for k in range(len(z)):
        zp = z.copy()
        zp[k] += eps
        zm = z.copy()
        zm[k] -= eps
        g[k] = (kd_loss(q, zp, spec) - kd_loss(q, zm, spec)) / (2 * eps)
    return g


def random_grouped_spec(rng, mode):
    nt = rng.integers(2, 8)
    extra = rng.integers(1, 8)
    ns = nt + extra
    group_of = list(range(nt))
    for _ in range(extra):
        if mode == "mib":
            group_of.append(0)
        else:
            group_of.append(int(rng.integers(0, nt)))
    return DistillationSpec(
        mode=mode,
        teacher_space=tuple(range(nt)),
        student_space=tuple(range(ns)),
        group_of=tuple(group_of),
    )


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_overflow_stability(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0)
        assert p[1] == pytest.approx(0.0, abs=1e-300)

    def test_log_inputs(self):
        p = softmax(np.log(np.array([1.0, 2.0, 3.0])))
        assert np.allclose(p, [1 / 6, 2 / 6, 3 / 6])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(40, 9)) * 5
        assert np.allclose(softmax(z).sum(axis=1), 1.0, atol=1e-9)


class TestCrossEntropy:
    def test_half(self):
        assert cross_entropy(np.array([0.5, 0.5]), 0) == pytest.approx(math.log(2))

    def test_perfect(self):
        assert cross_entropy(np.array([1.0, 0.0]), 0) == 0.0

    def test_derived_value(self):
        # -ln(0.8), recomputed with the stdlib log
        assert cross_entropy(np.array([0.2, 0.8]), 1) == pytest.approx(
            0.22314355131420976, abs=1e-9
        )


class TestRegroup:
    def test_moon_worked_example(self):
        p = np.array([0.05, 0.15, 0.10, 0.25, 0.30, 0.15])
        assert np.allclose(regroup(p, MOON), [0.20, 0.40, 0.40])

    def test_mib_worked_example(self):
        assert np.allclose(regroup(np.array([0.2, 0.3, 0.5]), MIB), [0.7, 0.3])

    def test_standard_worked_example(self):
        assert np.allclose(regroup(np.array([0.2, 0.3, 0.5]), STD), [0.4, 0.6])

    def test_standard_degenerate_input(self):
        with pytest.raises(DegenerateInputError):
            regroup(np.array([0.0, 0.0, 1.0]), STD)

    def test_batch_rows_match_single(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(6), size=10)
        batch = regroup(p, MOON)
        for i in range(10):
            assert np.array_equal(batch[i], regroup(p[i], MOON))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_moon_conservation(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_grouped_spec(rng, "moon")
        p = rng.dirichlet(np.ones(len(spec.student_space)))
        assert abs(regroup(p, spec).sum() - 1.0) <= 1e-9

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_moon_equals_mib_for_background_only_splits(self, seed):
        rng = np.random.default_rng(seed)
        mib = random_grouped_spec(rng, "mib")
        moon = DistillationSpec(
            mode="moon",
            teacher_space=mib.teacher_space,
            student_space=mib.student_space,
            group_of=mib.group_of,
        )
        p = rng.dirichlet(np.ones(len(mib.student_space)))
        a = regroup(p, moon)
        b = regroup(p, mib)
        assert a.tobytes() == b.tobytes()  # bit-identical


class TestSpecBuild:
    def test_moon_groups_follow_splits(self):
        seq = load_preset("cs_ex2")
        onto = seq.ontology
        spec = DistillationSpec.build(seq, 6, "moon")
        veh = spec.teacher_space.index(onto.id_of("vehicle"))
        for cls in ("car", "truck", "bus", "train", "motorcycle"):
            pos = spec.student_space.index(onto.id_of(cls))
            assert spec.group_of[pos] == veh

    def test_standard_drops_new(self):
        seq = load_preset("cs_ex2")
        spec = DistillationSpec.build(seq, 1, "standard")
        pos = spec.student_space.index(seq.ontology.id_of("road"))
        assert spec.group_of[pos] == -1

    def test_mib_groups_new_to_background(self):
        seq = load_preset("cs_ex2")
        spec = DistillationSpec.build(seq, 1, "mib")
        pos = spec.student_space.index(seq.ontology.id_of("road"))
        assert spec.group_of[pos] == 0

    def test_image_must_cover_teacher_space(self):
        with pytest.raises(ValueError):
            DistillationSpec(
                mode="moon",
                teacher_space=(0, 1),
                student_space=(0, 1, 2),
                group_of=(0, 0, 0),
            )


class TestKdLoss:
    def test_worked_example_value(self):
        # -(0.2 ln 0.2 + 0.5 ln 0.4 + 0.3 ln 0.4), scalar recomputation
        q = np.array([0.2, 0.5, 0.3])
        z = np.log(np.array([0.05, 0.15, 0.10, 0.25, 0.30, 0.15]))
        expected = -(0.2 * math.log(0.2) + 0.5 * math.log(0.4) + 0.3 * math.log(0.4))
        assert expected == pytest.approx(1.0549201679861442, abs=1e-12)
        assert kd_loss(q, z, MOON) == pytest.approx(expected, abs=1e-9)

    def test_matching_distributions_give_entropy(self):
        q = np.array([0.2, 0.5, 0.3])
        z = np.log(np.array([0.05, 0.15, 0.10, 0.25, 0.30, 0.15]))
        entropy = -(q * np.log(q)).sum()
        # p_hat equals (0.2, 0.4, 0.4); change q to match it exactly
        q2 = np.array([0.2, 0.4, 0.4])
        entropy2 = -(q2 * np.log(q2)).sum()
        assert kd_loss(q2, z, MOON) == pytest.approx(entropy2, abs=1e-9)
        assert kd_loss(q, z, MOON) >= entropy - 1e-9

    def test_one_hot_perfect_match(self):
        z = np.array([50.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        q = np.array([1.0, 0.0, 0.0])
        assert kd_loss(q, z, MOON) == pytest.approx(0.0, abs=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_lower_bound_and_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_grouped_spec(rng, "moon")
        q = rng.dirichlet(np.ones(len(spec.teacher_space)))
        z = rng.normal(size=len(spec.student_space)) * 3
        entropy = -(q * np.log(np.maximum(q, 1e-300))).sum()
        assert kd_loss(q, z, spec) >= entropy - 1e-9
        shift = float(rng.normal() * 10)
        assert kd_loss(q, z + shift, spec) == pytest.approx(
            kd_loss(q, z, spec), abs=1e-9
        )


class TestKdGrad:
    def test_gradient_components_sum_to_zero(self):
        rng = np.random.default_rng(2)
        for spec in (MOON, MIB):
            q = rng.dirichlet(np.ones(len(spec.teacher_space)))
            z = rng.normal(size=len(spec.student_space)) * 2
            assert kd_grad(q, z, spec).sum() == pytest.approx(0.0, abs=1e-12)

    def test_stationary_at_optimum(self):
        z = np.array([50.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        q = np.array([1.0, 0.0, 0.0])
        assert np.max(np.abs(kd_grad(q, z, MOON))) < 1e-9

    def test_moon_example_matches_finite_differences(self):
        q = np.array([0.2, 0.5, 0.3])
        z = np.log(np.array([0.05, 0.15, 0.10, 0.25, 0.30, 0.15]))
        g = kd_grad(q, z, MOON)
        fd = fd_gradient(q, z, MOON)
        assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12) <= 1e-5

    @pytest.mark.parametrize("mode", ["moon", "mib", "standard"])
    def test_random_instances_match_finite_differences(self, mode):
        rng = np.random.default_rng(hash(mode) % 2**32)
        for _ in range(40):
            if mode == "standard":
                nt = rng.integers(2, 8)
                ns = nt + rng.integers(1, 6)
                spec = DistillationSpec(
                    mode="standard",
                    teacher_space=tuple(range(nt)),
                    student_space=tuple(range(ns)),
                    group_of=tuple(range(nt)) + (-1,) * (ns - nt),
                )
            else:
                spec = random_grouped_spec(rng, mode)
            q = rng.dirichlet(np.ones(len(spec.teacher_space)))
            z = rng.normal(size=len(spec.student_space)) * 2
            g = kd_grad(q, z, spec)
            fd = fd_gradient(q, z, spec)
            rel = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)
            assert rel <= 1e-5

    def test_standard_dropped_classes_get_zero_gradient(self):
        # the renormalized expression does not depend on dropped logits
        rng = np.random.default_rng(5)
        q = rng.dirichlet(np.ones(2))
        z = rng.normal(size=3)
        g = kd_grad(q, z, STD)
        assert g[2] == pytest.approx(0.0, abs=1e-15)


class TestTotalLoss:
    def test_zero_weight_equals_mean_cross_entropy(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(10, 4))
        y = rng.integers(0, 4, size=10)
        loss, grad = total_loss(z, y, 0.0)
        p = softmax(z)
        expected = float(np.mean([-math.log(p[i, y[i]]) for i in range(10)]))
        assert loss == pytest.approx(expected, abs=1e-12)
        assert grad.shape == z.shape

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty batch"):
            total_loss(np.zeros((0, 3)), np.zeros(0, dtype=int), 1.0)

    def test_missing_teacher_rejected(self):
        z = np.zeros((2, 3))
        with pytest.raises(MissingTeacherError):
            total_loss(z, np.array([0, 1]), 1.0)

    def test_composite_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        spec = MOON
        n = 5
        z = rng.normal(size=(n, 6))
        y = rng.integers(0, 6, size=n)
        q = rng.dirichlet(np.ones(3), size=n)

        def loss_at(zz):
            return total_loss(zz, y, 0.7, spec=spec, q_teacher=q)[0]

        _, grad = total_loss(z, y, 0.7, spec=spec, q_teacher=q)
        eps = 1e-6
        fd = np.zeros_like(z)
        for i in range(n):
            for j in range(6):
                zp = z.copy()
                zp[i, j] += eps
                zm = z.copy()
                zm[i, j] -= eps
                fd[i, j] = (loss_at(zp) - loss_at(zm)) / (2 * eps)
        rel = np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-12)
        assert rel <= 1e-5
