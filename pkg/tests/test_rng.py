import math

import pytest

from cleo.rng import Xoshiro256StarStar, derive_seed, splitmix64


def test_splitmix64_reference_vector():
    # published first outputs for seed 0
    gen = splitmix64(0)
    assert next(gen) == 0xE220A8397B1DCDAF
    assert next(gen) == 0x6E789E6AA1B965F4


def xoshiro_from_state(s0, s1, s2, s3):
    rng = Xoshiro256StarStar(0)
    rng.s0, rng.s1, rng.s2, rng.s3 = s0, s1, s2, s3
    return rng


def test_xoshiro_hand_derived_outputs():
    # from state (1,2,3,4):
    #   out1 = rotl(2*5,7)*9 = 1280*9 = 11520
    #   state -> (7, 0, 262146, 6<<45); out2 = rotl(0,7)*9 = 0
    #   state -> s1 = 262146^7 = 262149; out3 = rotl(262149*5,7)*9
    #          = 1310745*128*9 = 1509978240
    rng = xoshiro_from_state(1, 2, 3, 4)
    assert rng.next_u64() == 11520
    assert rng.next_u64() == 0
    assert rng.next_u64() == 1509978240


def test_same_seed_same_stream():
    a = Xoshiro256StarStar(1234)
    b = Xoshiro256StarStar(1234)
    assert [a.next_u64() for _ in range(64)] == [b.next_u64() for _ in range(64)]


def test_uniform_range_and_spread():
    rng = Xoshiro256StarStar(7)
    xs = [rng.uniform() for _ in range(4000)]
    assert all(0.0 <= x < 1.0 for x in xs)
    mean = sum(xs) / len(xs)
    assert abs(mean - 0.5) < 0.03


def test_uniform_open_positive():
    rng = Xoshiro256StarStar(7)
    assert all(0.0 < rng.uniform_open() <= 1.0 for _ in range(1000))


def test_normals_moments():
    rng = Xoshiro256StarStar(99)
    xs = rng.normals(20000)
    mean = sum(xs) / len(xs)
    var = sum((x - mean) ** 2 for x in xs) / len(xs)
    assert abs(mean) < 0.03
    assert abs(var - 1.0) < 0.05


def test_below_bounds_and_bias():
    rng = Xoshiro256StarStar(5)
    counts = [0] * 7
    for _ in range(7000):
        v = rng.below(7)
        assert 0 <= v < 7
        counts[v] += 1
    assert min(counts) > 800

    with pytest.raises(ValueError):
        rng.below(0)


def test_shuffle_is_permutation():
    rng = Xoshiro256StarStar(11)
    items = list(range(50))
    rng.shuffle(items)
    assert sorted(items) == list(range(50))
    assert items != list(range(50))


def test_unit_vector_norm():
    rng = Xoshiro256StarStar(3)
    for dim in (2, 5, 16):
        v = rng.unit_vector(dim)
        assert len(v) == dim
        assert math.isclose(sum(x * x for x in v), 1.0, rel_tol=1e-12)


def test_derive_seed_distinguishes_indices():
    seeds = {derive_seed(42, i) for i in range(100)}
    assert len(seeds) == 100
    assert derive_seed(42, 1, 2) != derive_seed(42, 2, 1)
    assert derive_seed(42, 3) == derive_seed(42, 3)
