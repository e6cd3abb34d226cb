import numpy as np
import pytest
from scipy import stats

from kraichnan_lab.rng import complex_normal_draws, philox_block, seed_key

# Random123 known-answer vectors for Philox4x32-10
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@pytest.mark.parametrize("ctr,key,want", KAT)
def test_philox_known_answers(ctr, key, want):
    assert philox_block(ctr, key) == want


def test_complex_normals_unit_mean_square():
    z = np.concatenate([complex_normal_draws(1000, step, 0, 123) for step in range(100)])
    n = len(z)
    assert abs(np.mean(np.abs(z) ** 2) - 1) < 5 / np.sqrt(n)
    assert abs(np.mean(z)) < 5 / np.sqrt(n)
    assert abs(np.mean(z * z)) < 5 / np.sqrt(n)
    # real and imaginary parts are N(0, 1/2)
    for part in (z.real, z.imag):
        assert stats.kstest(part * np.sqrt(2), "norm").pvalue > 1e-3


def test_draws_are_pure_functions_of_counter():
    a = complex_normal_draws(7, 3, 11, 99)
    assert np.array_equal(a, complex_normal_draws(7, 3, 11, 99))
    # a longer request extends the same stream
    assert np.array_equal(complex_normal_draws(9, 3, 11, 99)[:7], a)
    for other in ((7, 4, 11, 99), (7, 3, 12, 99), (7, 3, 11, 100), (7, 3, 2 ** 32 + 11, 99)):
        assert not np.any(complex_normal_draws(*other) == a)


def test_independent_streams_uncorrelated():
    x = np.stack([complex_normal_draws(4000, 0, s, 5) for s in range(2)])
    r = abs(np.vdot(x[0], x[1])) / 4000
    assert r < 5 / np.sqrt(4000)


def test_seed_range():
    assert seed_key(2 ** 64 - 1) == (0xFFFFFFFF, 0xFFFFFFFF)
    with pytest.raises(ValueError):
        seed_key(-1)
    with pytest.raises(ValueError):
        seed_key(2 ** 64)
