import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import null_space

from kraichnan_lab.lattice import annulus, count_ball_points, enumerate_lattice, proj_norm_sq


def brute_points(d, N):
    return [k for k in itertools.product(range(-N, N + 1), repeat=d) if 0 < sum(c * c for c in k) <= N * N]


@pytest.mark.parametrize("d,N,expected", [(2, 1, 4), (2, 2, 12), (3, 1, 6)])
def test_small_site_counts(d, N, expected):
    assert enumerate_lattice(d, N).size == expected


@pytest.mark.parametrize("d,N", [(2, 1), (2, 5), (2, 9), (3, 3), (4, 2)])
def test_enumeration_matches_brute_force(d, N):
    lat = enumerate_lattice(d, N)
    oracle = brute_points(d, N)  # itertools.product is lexicographic
    assert lat.size == len(oracle) == count_ball_points(d, N)
    assert [tuple(p) for p in lat.points] == oracle
    assert np.array_equal(lat.norm_sq, [sum(c * c for c in k) for k in oracle])


def test_ids_are_a_dense_bijection_and_negation_is_valid():
    lat = enumerate_lattice(3, 4)
    assert np.array_equal(lat.ids(lat.points), np.arange(lat.size))
    neg = lat.negation
    assert np.all(neg >= 0)
    assert np.array_equal(lat.points[neg], -lat.points)
    assert lat.id_of([5, 0, 0]) == -1
    assert lat.id_of([0, 0, 0]) == -1


def test_half_mask_picks_one_of_each_pair():
    lat = enumerate_lattice(2, 6)
    half = lat.half_mask()
    assert half.sum() * 2 == lat.size
    assert np.all(half != half[lat.negation])


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        enumerate_lattice(1, 3)
    with pytest.raises(ValueError):
        enumerate_lattice(2, 0)
    with pytest.raises(OverflowError):
        enumerate_lattice(12, 10 ** 6)


def gram_schmidt_proj(j, k):
    E = null_space(np.asarray(j, dtype=float)[None, :])  # columns: orthonormal basis of j-perp
    return float(np.sum((np.asarray(k, dtype=float) @ E) ** 2))


@pytest.mark.parametrize("j,k,expected", [((1, 0), (0, 3), 9.0), ((1, 0), (5, 0), 0.0), ((1, 1), (2, 0), 2.0)])
def test_proj_norm_sq_examples(j, k, expected):
    assert proj_norm_sq(j, k) == pytest.approx(gram_schmidt_proj(j, k), abs=1e-12)
    assert proj_norm_sq(j, k) == expected


def test_parallel_vectors_give_exact_zero():
    rng = np.random.default_rng(1)
    j = rng.integers(-50, 50, size=(1000, 3))
    j[np.all(j == 0, axis=1)] = 1
    m = rng.integers(-40, 40, size=(1000, 1))
    assert np.all(proj_norm_sq(j, m * j) == 0.0)


def test_proj_rejects_zero_direction():
    with pytest.raises(ValueError):
        proj_norm_sq((0, 0), (1, 2))


def test_pythagoras_on_random_pairs():
    rng = np.random.default_rng(7)
    j = rng.integers(-1000, 1000, size=(100_000, 3))
    j[np.all(j == 0, axis=1)] = (1, 0, 0)
    k = rng.integers(-1000, 1000, size=(100_000, 3))
    p = proj_norm_sq(j, k)
    kk = np.sum(k * k, axis=1).astype(float)
    along = np.sum(k * j, axis=1).astype(float) ** 2 / np.sum(j * j, axis=1)
    rel = np.abs(p + along - kk) / np.maximum(kk, 1)
    assert rel.max() < 1e-12
    assert np.all(p >= 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-30, 30), min_size=3, max_size=3), st.lists(st.integers(-30, 30), min_size=3, max_size=3))
def test_projection_sign_symmetries(j, k):
    if not any(j):
        j = [1, 0, 0]
    j, k = np.array(j), np.array(k)
    base = proj_norm_sq(j, k)
    assert proj_norm_sq(-j, k) == base
    assert proj_norm_sq(j, -k) == base


def test_annulus_examples():
    lat2 = enumerate_lattice(2, 4)
    assert len(annulus(lat2, 1, 2)) == 12
    assert len(annulus(enumerate_lattice(3, 2), 1, 1)) == 6
    a = annulus(lat2, 3.5, 3.9)
    assert sorted(set(lat2.norm_sq[a.ids].tolist())) == [13]
    oracle = [k for k in brute_points(2, 4) if 3.5 <= math.sqrt(k[0] ** 2 + k[1] ** 2) <= 3.9]
    assert len(a) == len(oracle) == 8
    assert len(annulus(lat2, 4.5, 4.9)) == 0


def test_annulus_rejects_bad_bounds():
    with pytest.raises(ValueError):
        annulus(enumerate_lattice(2, 3), 2, 1)
    with pytest.raises(ValueError):
        annulus(enumerate_lattice(2, 3), 0, 1)


def test_touching_annuli_partition():
    lat = enumerate_lattice(2, 12)
    a, b, c = 1.5, 5.0, 11.0
    b_next = np.nextafter(b, np.inf)
    assert not np.any((lat.norms > b) & (lat.norms < b_next))
    lo = annulus(lat, a, b).ids
    hi = annulus(lat, b_next, c).ids
    whole = annulus(lat, a, c).ids
    assert len(np.intersect1d(lo, hi)) == 0
    assert np.array_equal(np.sort(np.concatenate([lo, hi])), whole)
