"""Diagnostics on second-moment fields: weighted norms, decay fits, the
stationary spectrum under forcing, annulus sums and their scaling, and the
velocity covariance / scalar correlation in physical space.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
import json
import math
import warnings
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import linalg as spla

from .coefficients import NoiseCoefficients
from .lattice import Lattice, annulus
from .master import Generator, Trajectory, integrate


@dataclass(frozen=True)
class SigmaWeight:
    """sigma(r) = r^beta / (log r + 1)^m, or S(R r) / (log r + 1) when ``S`` is given."""

    beta: float = 1.0
    m: float = 0.0
    S: Callable | None = None
    R: float = 1.0

    def __post_init__(self):
        if self.S is None and not (0.0 <= self.beta <= 1.0 and self.m >= 0):
            raise ValueError(f"need beta in [0, 1] and m >= 0, got beta={self.beta}, m={self.m}")

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.S is not None:
            return np.asarray(self.S(self.R * r)) / (np.log(r) + 1.0)
        return r ** self.beta / (np.log(r) + 1.0) ** self.m

    @classmethod
    def regularization(cls, alpha: float, m: float) -> "SigmaWeight":
        """|k|^(1 - alpha) / (log|k| + 1)^m."""
        return cls(beta=1.0 - alpha, m=m)


def sigma_norm_sq(a: np.ndarray, lattice: Lattice, weight: SigmaWeight | Callable) -> float:
    return math.fsum(np.asarray(weight(lattice.norms)) ** 2 * a)


def regularization_integral(traj: Trajectory, weight: SigmaWeight | Callable) -> float:
    """int_0^T sum_k sigma(|k|)^2 a_k dt divided by sum_k a_k(0)."""
    s2 = np.asarray(weight(traj.lattice.norms)) ** 2
    return float(traj.time_integral(s2)[-1] / math.fsum(traj.values[0]))


@dataclass
class DecayFit:
    rate: float
    prefactor: float
    residual: float


def fit_decay_rate(t: Sequence[float], values: Sequence[float]) -> DecayFit:
    """Least squares of log(value) against t; ``rate`` is minus the slope."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(t) < 5:
        raise ValueError(f"need at least 5 points, got {len(t)}")
    if np.any(v <= 0):
        raise ValueError("decay fit needs strictly positive values")
    (slope, icpt), res, *_ = np.polyfit(t, np.log(v), 1, full=True)
    resid = float(math.sqrt(res[0] / len(t))) if len(res) else 0.0
    return DecayFit(rate=float(-slope), prefactor=float(math.exp(icpt)), residual=resid)


# --------------------------------------------------------------------------
# stationary spectrum


@dataclass
class InvariantSpectrum:
    x: np.ndarray = field(repr=False)
    residual: float = 0.0
    method: str = ""
    iterations: int = 0


class SolverError(RuntimeError):
    pass


# direct factorization below this many sites (sparse backend only)
DIRECT_SOLVE_LIMIT = 4000


def invariant_spectrum(
    gen: Generator, Fhat_sq: np.ndarray, tol: float = 1e-12, maxiter: int = 50_000
) -> InvariantSpectrum:
    """Solve -G x = |F_hat|^2, the time integral of free decay started from |F_hat|^2."""
    if gen.kappa <= 0:
        raise ValueError("stationary spectrum needs kappa > 0 (the generator is singular at kappa = 0)")
    F = np.asarray(Fhat_sq, dtype=float)
    if F.shape != (gen.size,) or np.any(F < 0):
        raise ValueError("forcing spectrum must be a nonnegative field on the lattice")
    fnorm = np.linalg.norm(F)
    if fnorm == 0:
        return InvariantSpectrum(np.zeros_like(F), 0.0, "trivial", 0)
    if gen.coupling is not None and gen.size <= DIRECT_SOLVE_LIMIT:
        A = (-gen.coupling).tocsc()
        A.setdiag(A.diagonal() - gen.diagonal)
        x = spla.splu(A).solve(F)
        method, its = "splu", 1
    else:
        n = gen.size
        A = spla.LinearOperator((n, n), matvec=lambda v: -gen.matvec(v), dtype=float)
        inv_diag = 1.0 / (-gen.diagonal)
        M = spla.LinearOperator((n, n), matvec=lambda v: inv_diag * v, dtype=float)
        count = [0]

        def tick(_):
            count[0] += 1

        x, info = spla.cg(A, F, M=M, rtol=tol, atol=0.0, maxiter=maxiter, callback=tick)
        method, its = "cg", count[0]
        if info != 0:
            resid = np.linalg.norm(-gen.matvec(x) - F) / fnorm
            raise SolverError(f"CG did not converge in {maxiter} iterations (relative residual {resid:.3g})")
    resid = float(np.linalg.norm(-gen.matvec(x) - F) / fnorm)
    return InvariantSpectrum(x, resid, method, its)


def invariant_by_time_integral(gen: Generator, Fhat_sq: np.ndarray, t_max: float, n_out: int = 8) -> np.ndarray:
    """int_0^t_max e^{tG} F dt from the integrator's exact step integrals.

    The remainder past t_max is bounded by ||a(t_max)|| / (smallest decay rate).
    """
    traj = integrate(gen, Fhat_sq, np.linspace(0.0, t_max, n_out + 1))
    return traj.integrals.sum(axis=0)


def stationary_balance(gen: Generator, x: np.ndarray, Fhat_sq: np.ndarray) -> tuple[float, float]:
    """(molecular + outflow dissipation of x, injected sum |F_hat|^2)."""
    ksq = gen.lattice.norm_sq.astype(float)
    diss = math.fsum(8 * math.pi ** 2 * gen.kappa * ksq * x) + math.fsum(gen.outflow * x)
    return diss, math.fsum(Fhat_sq)


# --------------------------------------------------------------------------
# annuli and scaling


def annulus_endpoints(r: float, alpha: float, C: float) -> tuple[float, float]:
    L = math.log(1.0 / r)
    return (1.0 / (C * r)) * L ** (-2.0 / alpha), (C / r) * L ** (2.0 / (1.0 - alpha))


def _bounds_hold(x, lattice, r, alpha, C, Fsq):
    lo, hi = annulus_endpoints(r, alpha, C)
    total = math.fsum(x[annulus(lattice, lo, hi).ids])
    base = r ** (2 * (1 - alpha)) * Fsq
    lower_ok = total >= base / C
    upper_ok = total <= C * math.log(1.0 / r) ** (4.0 / alpha) * base
    return total, lower_ok, upper_ok, lo, hi


@dataclass
class AnnulusRow:
    r: float
    k_lo: float
    k_hi: float
    sum: float
    lower_ok: bool
    upper_ok: bool
    fitted_C: float
    escapes_lattice: bool


@dataclass
class SpectrumReport:
    rows: list[AnnulusRow]
    C: float
    slope: float | None = None
    slope_range: tuple[float, float] | None = None
    target_slope: float | None = None
    residual: float | None = None

    def to_dict(self) -> dict:
        return {
            "C": self.C,
            "slope": self.slope,
            "slope_range": list(self.slope_range) if self.slope_range else None,
            "target_slope": self.target_slope,
            "residual": self.residual,
            "annuli": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("r,k_lo,k_hi,sum,lower_ok,upper_ok,fitted_C,escapes_lattice\n")
            for row in self.rows:
                fh.write(
                    f"{float(row.r)!r},{float(row.k_lo)!r},{float(row.k_hi)!r},{float(row.sum)!r},{int(row.lower_ok)},"
                    f"{int(row.upper_ok)},{float(row.fitted_C)!r},{int(row.escapes_lattice)}\n"
                )


def smallest_annulus_constant(x, lattice, r, alpha, Fsq, C_max: float = 1e12) -> float:
    """Smallest C >= 1 (to 1e-6 relative) for which both annulus bounds hold; inf if none below C_max."""
    grid = np.geomspace(1.0, C_max, 121)
    hit = None
    for i, C in enumerate(grid):
        _, lo_ok, up_ok, *_ = _bounds_hold(x, lattice, r, alpha, C, Fsq)
        if lo_ok and up_ok:
            hit = i
            break
    if hit is None:
        return math.inf
    if hit == 0:
        return 1.0
    a, b = grid[hit - 1], grid[hit]
    while b / a > 1 + 1e-6:
        mid = math.sqrt(a * b)
        _, lo_ok, up_ok, *_ = _bounds_hold(x, lattice, r, alpha, mid, Fsq)
        if lo_ok and up_ok:
            b = mid
        else:
            a = mid
    return float(b)


def annulus_report(
    x: np.ndarray,
    lattice: Lattice,
    alpha: float,
    r_list: Sequence[float],
    C: float,
    Fhat_sq_total: float,
    kappa: float | None = None,
) -> SpectrumReport:
    """Annulus sums against the two-sided scaling bounds for each r in ``r_list``."""
    rows = []
    for r in r_list:
        if not (0 < r < 1 / math.e):
            raise ValueError(f"r must lie in (0, 1/e) for the log factors, got {r}")
        if kappa is not None and r <= kappa ** (1 / (2 * alpha)):
            warnings.warn(f"r={r} is below the diffusive scale kappa^(1/(2 alpha))", stacklevel=2)
        total, lo_ok, up_ok, lo, hi = _bounds_hold(x, lattice, r, alpha, C, Fhat_sq_total)
        best = smallest_annulus_constant(x, lattice, r, alpha, Fhat_sq_total)
        rows.append(AnnulusRow(float(r), lo, hi, total, bool(lo_ok), bool(up_ok), best, hi > lattice.N))
    return SpectrumReport(rows, float(C))


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    K: np.ndarray
    sums: np.ndarray
    counts: np.ndarray
    residual: float


def annulus_sums(x: np.ndarray, lattice: Lattice, K: Sequence[float], width: float = math.sqrt(2.0)):
    """Sums of x over the geometric annuli [K / width, K * width] and their cardinalities."""
    sums, counts = [], []
    for k in K:
        ids = annulus(lattice, k / width, k * width).ids
        sums.append(math.fsum(x[ids]))
        counts.append(len(ids))
    return np.array(sums), np.array(counts)


def annulus_slope(
    x: np.ndarray, lattice: Lattice, K: Sequence[float], width: float = math.sqrt(2.0), against: str = "r"
) -> SlopeFit:
    """Weighted (by annulus cardinality) log-log slope of annulus sums.

    ``against="r"`` regresses on r = 1/K (the scaling law predicts 2(1 - alpha));
    ``against="k"`` regresses on K itself (the negative of the former).
    """
    K = np.asarray(K, dtype=float)
    sums, counts = annulus_sums(x, lattice, K, width)
    if np.any(sums <= 0):
        raise ValueError("annulus sums must be positive for a log-log fit")
    u = np.log(1.0 / K) if against == "r" else np.log(K)
    wts = counts / counts.sum()
    (slope, icpt), res, *_ = np.polyfit(u, np.log(sums), 1, w=np.sqrt(wts), full=True)
    return SlopeFit(float(slope), float(icpt), K, sums, counts, float(res[0]) if len(res) else 0.0)


def dissipation_scale(kappa: float, alpha: float) -> float:
    """|k| ~ kappa^(-1/(2 alpha)) where diffusion overtakes transport."""
    return kappa ** (-1.0 / (2.0 * alpha))


# --------------------------------------------------------------------------
# physical-space objects


BASIS_CONVENTIONS = ("least_aligned", "most_aligned")


def orthonormal_basis(k, convention: str = "least_aligned") -> np.ndarray:
    """Rows e_{k,1..d-1}: an orthonormal basis of k-perp.

    Gram-Schmidt over the standard basis vectors ordered by |k . e_i|
    (ascending for "least_aligned", descending for "most_aligned"; ties by
    index). The basis depends only on |k_i|, so e_{-k} = e_k.
    """
    if convention not in BASIS_CONVENTIONS:
        raise ValueError(f"unknown basis convention {convention!r}")
    k = np.asarray(k, dtype=float)
    d = len(k)
    if not np.any(k):
        raise ValueError("k must be nonzero")
    key = np.abs(k) if convention == "least_aligned" else -np.abs(k)
    order = np.lexsort((np.arange(d), key))
    u0 = k / np.linalg.norm(k)
    basis = [u0]
    for i in order:
        v = np.zeros(d)
        v[i] = 1.0
        for b in basis:
            v -= (b @ v) * b
        for b in basis:
            v -= (b @ v) * b
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            basis.append(v / nv)
        if len(basis) == d:
            break
    return np.array(basis[1:])


def covariance(coeffs: NoiseCoefficients, x, convention: str = "least_aligned") -> np.ndarray:
    """D(x) = sum_k w_k^2 cos(2 pi k.x) sum_n e_{k,n} (x) e_{k,n}."""
    x = np.asarray(x, dtype=float)
    D = np.zeros((coeffs.d, coeffs.d))
    phase = np.cos(2 * np.pi * (coeffs.modes @ x))
    for k, w2, c in zip(coeffs.modes, coeffs.w_sq, phase):
        E = orthonormal_basis(k, convention)
        D += w2 * c * (E.T @ E)
    return D


def covariance_field(coeffs: NoiseCoefficients, points: np.ndarray) -> np.ndarray:
    """D at many points (rows of ``points``), using Pi_{k perp} = I - k k^T / |k|^2."""
    m = coeffs.modes.astype(float)
    nsq = coeffs.mode_norm_sq.astype(float)
    P = np.eye(coeffs.d)[None] - np.einsum("ij,ik->ijk", m, m) / nsq[:, None, None]
    phase = np.cos(2 * np.pi * (points @ m.T))  # (n_points, n_modes)
    return np.einsum("pm,m,mjk->pjk", phase, coeffs.w_sq, P)


def periodic_distance(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.linalg.norm(x - np.round(x), axis=-1)


def holder_constant(coeffs: NoiseCoefficients, points: np.ndarray) -> float:
    """Smallest C with |D(0) - D(x)| <= C |x|^(2 alpha) sum |k|^(2 alpha) w_k^2 over the points."""
    D0 = coeffs.covariance_at_origin()
    Dx = covariance_field(coeffs, points)
    gaps = np.linalg.norm(D0[None] - Dx, ord=2, axis=(1, 2))
    dist = periodic_distance(points)
    ok = dist > 0
    scale = dist[ok] ** (2 * coeffs.alpha) * coeffs.regularity_sum()
    return float(np.max(gaps[ok] / scale)) if np.any(ok) else 0.0


def correlation_function(a: np.ndarray, lattice: Lattice, x_grid: np.ndarray) -> np.ndarray:
    """g(x) = sum_k a_k e^{2 pi i k.x} at the rows of ``x_grid`` (real part)."""
    x_grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    phase = 2 * np.pi * (x_grid @ lattice.points.T)
    g = np.exp(1j * phase) @ a
    imag = np.max(np.abs(g.imag)) if len(g) else 0.0
    if imag > 1e-10 * max(1.0, np.max(np.abs(g.real))):
        warnings.warn(f"field is not even: correlation has imaginary part {imag:.3g}", stacklevel=2)
    return g.real


def correlation_grid(a: np.ndarray, lattice: Lattice, n: int) -> np.ndarray:
    """g on the uniform n^d grid of the torus, by inverse FFT."""
    if n < 2 * lattice.N + 1:
        raise ValueError(f"grid of {n} points aliases a lattice of radius {lattice.N}")
    spec = np.zeros((n,) * lattice.d, dtype=complex)
    spec[tuple(np.mod(lattice.points, n).T)] = a
    g = np.fft.ifftn(spec) * n ** lattice.d
    return g.real


def correlation_equation_rhs(
    coeffs: NoiseCoefficients, kappa: float, a: np.ndarray, lattice: Lattice, n: int
) -> np.ndarray:
    """2 kappa Lap g + (D(0) - D(x)) : Hess g on the uniform n^d grid."""
    d = lattice.d
    k = lattice.points.astype(float)
    idx = tuple(np.mod(lattice.points, n).T)

    def field_of(coef):
        spec = np.zeros((n,) * d, dtype=complex)
        spec[idx] = coef * a
        return (np.fft.ifftn(spec) * n ** d).real

    hess = {}
    for i in range(d):
        for j in range(i, d):
            hess[i, j] = field_of(-4 * np.pi ** 2 * k[:, i] * k[:, j])
    axes = [np.arange(n) / n] * d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    Dx = covariance_field(coeffs, pts).reshape((n,) * d + (d, d))
    D0 = coeffs.covariance_at_origin()
    out = np.zeros((n,) * d)
    for i in range(d):
        out += 2 * kappa * hess[i, i]
        for j in range(d):
            h = hess[min(i, j), max(i, j)]
            out += (D0[i, j] - Dx[..., i, j]) * h
    return out
