"""Deterministic generator tests: published vectors, stream stability, and
distribution sanity. These freeze the byte-level behaviour every seeded
experiment depends on."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zachvit.rng import Rng, _splitmix64


def test_splitmix64_published_vector():
    # First outputs of splitmix64 from state 0, as published with the
    # reference implementation.
    state = 0
    state, out0 = _splitmix64(state)
    state, out1 = _splitmix64(state)
    state, out2 = _splitmix64(state)
    assert out0 == 0xE220A8397B1DCDAF
    assert out1 == 0x6E789E6AA1B965F4
    assert out2 == 0x06C45D188009454F


def test_xoshiro_seed0_known_output():
    # xoshiro256** seeded via splitmix64 from 0; widely-used first output.
    assert Rng(0).next_u64() == 0x99EC5F36CB75F2B4


def test_stream_stability_snapshot():
    """Frozen first outputs for two seeds. A change here silently breaks
    every recorded experiment, so treat any diff as an interface break."""
    assert [Rng(0).next_u64() for _ in range(1)] == [0x99EC5F36CB75F2B4]
    r = Rng(0)
    assert [r.next_u64() for _ in range(4)] == [
        0x99EC5F36CB75F2B4,
        0xBF6E1F784956452A,
        0x1A5F849D4933E6E0,
        0x6AA594F1262D2D2C,
    ]
    r7 = Rng(7)
    assert [r7.next_u64() for _ in range(4)] == [
        0xB358FAF74EF9765A,
        0x475C3D964F482CD2,
        0xD6F1D349952C7996,
        0xFB2938731E807240,
    ]
    assert Rng(7).permutation(8) == [1, 3, 7, 5, 4, 0, 6, 2]


def test_same_seed_same_stream():
    a, b = Rng(12345), Rng(12345)
    assert [a.next_u64() for _ in range(64)] == [b.next_u64() for _ in range(64)]


def test_different_seeds_differ():
    a = [Rng(1).next_u64() for _ in range(8)]
    b = [Rng(2).next_u64() for _ in range(8)]
    assert a != b


@given(st.integers(min_value=0, max_value=2**64 - 1))
@settings(max_examples=50)
def test_uniform_in_unit_interval(seed):
    r = Rng(seed)
    for _ in range(20):
        u = r.uniform()
        assert 0.0 <= u < 1.0


@given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=1, max_value=1000))
@settings(max_examples=100)
def test_below_in_range(seed, bound):
    r = Rng(seed)
    for _ in range(10):
        v = r.below(bound)
        assert 0 <= v < bound


def test_below_one_is_zero():
    r = Rng(99)
    assert all(r.below(1) == 0 for _ in range(100))


def test_below_rejects_nonpositive():
    with pytest.raises(ValueError):
        Rng(0).below(0)
    with pytest.raises(ValueError):
        Rng(0).below(-3)


@given(st.integers(min_value=0, max_value=2**32), st.integers(min_value=0, max_value=40))
@settings(max_examples=60)
def test_permutation_is_permutation(seed, n):
    p = Rng(seed).permutation(n)
    assert sorted(p) == list(range(n))


def test_shuffle_preserves_multiset():
    items = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5]
    shuffled = list(items)
    Rng(17).shuffle(shuffled)
    assert sorted(shuffled) == sorted(items)


def test_below_is_roughly_uniform():
    # chi-square-ish sanity: 6 buckets, 6000 draws, each bucket within 20%.
    r = Rng(2024)
    counts = [0] * 6
    for _ in range(6000):
        counts[r.below(6)] += 1
    for c in counts:
        assert 800 <= c <= 1200


def test_normal_moments():
    r = Rng(31337)
    xs = r.normal_list(4000)
    mean = sum(xs) / len(xs)
    var = sum((x - mean) ** 2 for x in xs) / len(xs)
    assert abs(mean) < 0.06
    assert abs(var - 1.0) < 0.1
    assert all(math.isfinite(x) for x in xs)


def test_uniform_list_matches_scalar_calls():
    a = Rng(5).uniform_list(10)
    r = Rng(5)
    b = [r.uniform() for _ in range(10)]
    assert a == b
