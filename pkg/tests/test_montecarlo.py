import math

import numpy as np
import pytest

from kraichnan_lab.coefficients import zero_coefficients
from kraichnan_lab.master import assemble, integrate
from kraichnan_lab.montecarlo import (
    StabilityError,
    empirical_second_moments,
    mean_recursion,
    simulate,
    stability_number,
    write_snapshot_csv,
)

from conftest import coeffs_for, lattice_for, single_pair


def pair_start(lat, k=(1, 0)):
    a0 = np.zeros(lat.size)
    a0[lat.id_of(k)] = a0[lat.id_of([-x for x in k])] = 1.0
    return a0


def master_at(c, lat, kappa, a0, T):
    return integrate(assemble(c, lat, kappa), a0, [0.0, T], tol=1e-13).values[-1]


def test_heat_only_is_exact_and_deterministic():
    lat = lattice_for(2, 3)
    a0 = np.random.default_rng(0).random(lat.size)
    a0 = a0 + a0[lat.negation]
    ens = simulate(zero_coefficients(2), lat, 0.02, a0, 1e-3, 0.2, 50, seed=3)
    m = empirical_second_moments(ens, 0.2)
    want = a0 * np.exp(-8 * math.pi ** 2 * 0.02 * lat.norm_sq * 0.2)
    assert np.allclose(m.mean, want, rtol=1e-12, atol=0)
    assert np.all(m.se <= 1e-14 * m.mean)


def test_single_sample_has_no_standard_error():
    lat = lattice_for(2, 2)
    ens = simulate(single_pair(), lat, 0.01, pair_start(lat), 1e-3, 0.01, 1, seed=0)
    m = empirical_second_moments(ens, 0.01)
    assert not m.se_defined and np.all(np.isnan(m.se))


def test_stability_precondition():
    c, lat = coeffs_for(J=4), lattice_for(2, 4)
    kappa, dt = 0.01, 1e-3
    pts = lat.points.astype(float)
    loss = max(sum(w * w * (k @ k - (k @ j) ** 2 / (j @ j)) for j, w in zip(c.modes.astype(float), c.values))
               for k in pts)
    want = dt * (4 * math.pi ** 2 * kappa * 16 + 2 * math.pi ** 2 * loss)
    assert stability_number(c, lat, kappa, dt) == pytest.approx(want, rel=1e-12)
    with pytest.raises(StabilityError):
        simulate(c, lat, kappa, pair_start(lat), 0.1 / want * dt * 1.01, 0.5, 2, seed=0)


def test_rejections():
    lat = lattice_for(2, 2)
    a0 = np.zeros(lat.size)
    a0[lat.id_of([1, 0])] = 1.0
    with pytest.raises(ValueError, match="even"):
        simulate(single_pair(), lat, 0.01, a0, 1e-3, 0.1, 2, seed=0)
    with pytest.raises(ValueError, match="multiple"):
        simulate(single_pair(), lat, 0.01, pair_start(lat), 1e-3, 0.1005, 2, seed=0)
    with pytest.raises(ValueError, match="even multiples"):
        simulate(single_pair(), lat, 0.01, pair_start(lat), 1e-3, 0.101, 2, seed=0, extrapolate=True)


def test_discrete_mean_matches_master_at_first_order():
    """The drift correction is right iff the scheme's exact mean converges to the master solution."""
    c, lat = single_pair(), lattice_for(2, 2)
    a0 = pair_start(lat)
    ex = master_at(c, lat, 0.01, a0, 0.5)
    errs = [np.abs(mean_recursion(c, lat, 0.01, a0, dt, int(round(0.5 / dt))) - ex).max()
            for dt in (2e-3, 1e-3, 5e-4, 2.5e-4)]
    for a, b in zip(errs, errs[1:]):
        assert 1.8 < a / b < 2.2


def test_sampled_mean_matches_discrete_mean():
    c, lat = coeffs_for(J=4), lattice_for(2, 4)
    a0 = pair_start(lat)
    dt = 8e-4
    ens = simulate(c, lat, 0.01, a0, dt, 0.2, 10_000, seed=11)
    m = empirical_second_moments(ens, 0.2)
    want = mean_recursion(c, lat, 0.01, a0, dt, 250)
    mask = m.se > 0
    assert np.max(np.abs(m.mean - want)[mask] / m.se[mask]) < 4


def test_single_pair_matches_master():
    c, lat = single_pair(), lattice_for(2, 2)
    a0 = pair_start(lat)
    ex = master_at(c, lat, 0.01, a0, 0.5)
    ens = simulate(c, lat, 0.01, a0, 1e-3, 0.5, 10_000, seed=1, extrapolate=True)
    m = empirical_second_moments(ens, 0.5, extrapolated=True)
    live = ex > 0
    assert np.all(m.mean[~live] == 0)
    assert np.max(np.abs(m.mean - ex)[live] / m.se[live]) < 3


def test_weak_error_halves_with_dt():
    c, lat = single_pair(), lattice_for(2, 2)
    assert lat.size == 12
    a0 = pair_start(lat)
    ex = master_at(c, lat, 0.01, a0, 0.4)
    bias, se = [], []
    for dt in (2e-3, 1e-3):
        m = empirical_second_moments(simulate(c, lat, 0.01, a0, dt, 0.4, 100_000, seed=2), 0.4)
        bias.append(np.abs(m.mean - ex).sum())
        se.append(np.sqrt((m.se ** 2).sum()))
    assert bias[1] > 10 * se[1]
    assert 1.6 < bias[0] / bias[1] < 2.4


def test_basis_convention_changes_paths_not_moments():
    c, lat = coeffs_for(d=3, J=2), lattice_for(3, 2)
    a0 = pair_start(lat, (1, 0, 0))
    runs = [simulate(c, lat, 0.01, a0, 1e-3, 0.1, 4000, seed=5, basis_convention=b)
            for b in ("least_aligned", "most_aligned")]
    assert not np.array_equal(runs[0].sq_half, runs[1].sq_half)
    m = [empirical_second_moments(r, 0.1) for r in runs]
    se = np.hypot(m[0].se, m[1].se)
    mask = se > 0
    assert np.max(np.abs(m[0].mean - m[1].mean)[mask] / se[mask]) < 4


def test_reproducible_and_hermitian(tmp_path):
    c, lat = coeffs_for(J=3), lattice_for(2, 3)
    a0 = pair_start(lat, (1, 1))
    phase = np.random.default_rng(0).random(lat.size) * 2 * math.pi
    e1 = simulate(c, lat, 0.01, a0, 1e-3, 0.1, 40, seed=9, phase=phase, extrapolate=True)
    e2 = simulate(c, lat, 0.01, a0, 1e-3, 0.1, 40, seed=9, phase=phase, extrapolate=True)
    assert np.array_equal(e1.sq_half, e2.sq_half)
    assert np.array_equal(e1.coarse_sq_half, e2.coarse_sq_half)
    e3 = simulate(c, lat, 0.01, a0, 1e-3, 0.1, 40, seed=10, phase=phase)
    assert not np.array_equal(e1.sq_half, e3.sq_half)
    m = empirical_second_moments(e1, 0.1)
    assert np.array_equal(m.mean, m.mean[lat.negation])
    # per-sample l2 is the full-lattice sum, i.e. twice the half sum
    assert np.allclose(e1.l2[-1], 2 * e1.sq_half[-1].sum(axis=1), rtol=1e-12)
    write_snapshot_csv(e1, tmp_path / "s.csv", extrapolated=True)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,site_id,a,se,n_samples"
    assert len(lines) == 1 + 2 * lat.size


def _kappa_zero_run():
    c, lat = coeffs_for(J=4), lattice_for(2, 4)
    a0 = np.where(lat.norms <= 1, 1.0, 0.0)
    return c, lat, simulate(c, lat, 0.0, a0, 1e-4, 0.5, 400, seed=4), a0


def test_l2_plus_outflow_matches_scheme_mean_at_zero_kappa():
    c, lat, ens, a0 = _kappa_zero_run()
    # the scheme's exact mean l2 and outflow, stepped by hand
    gen = assemble(c, lat, 0.0, backend="csr")
    pts = lat.points.astype(float)
    growth = np.exp(-4 * math.pi ** 2 * np.einsum("id,de,ie->i", pts, c.covariance_at_origin(), pts) * 1e-4)
    a, out = a0.copy(), 0.0
    for _ in range(5000):
        out += 1e-4 * (gen.outflow @ a)
        a = growth * a + 1e-4 * (gen.coupling @ a)
    total = ens.l2[-1] + ens.cumulative_outflow[-1]
    se = total.std(ddof=1) / math.sqrt(len(total))
    assert abs(total.mean() - (a.sum() + out)) < 4 * se
    # and the scheme itself conserves mass to within its weak error
    assert abs(a.sum() + out - a0.sum()) / a0.sum() < 0.05


@pytest.mark.xfail(strict=True, reason="Ito-form Euler-Maruyama conserves L2 only in mean, not per path")
def test_l2_conserved_per_path_at_zero_kappa():
    _, _, ens, a0 = _kappa_zero_run()
    drift = np.abs(ens.l2[-1] + ens.cumulative_outflow[-1] - a0.sum()) / a0.sum()
    assert drift.max() < 0.01
