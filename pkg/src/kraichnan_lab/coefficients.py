"""Noise coefficient families, the structure function S(r) and its audit.

A family is stored as an array of lattice modes ``j`` (both ``j`` and ``-j``)
with amplitudes ``w_j >= 0``. The regularity sum ``sum |j|^(2 alpha) w_j^2``
equals one over the untruncated family; the part carried by modes beyond the
noise truncation ``J`` is reported as ``deficit``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
import math
from typing import Sequence

import numpy as np
from scipy import integrate, optimize

from .lattice import enumerate_lattice, unit_sphere_area

FAMILIES = ("isotropic", "shear", "custom")

# lattice sums for the normalization are done exactly out to this many points
_EXACT_POINT_BUDGET = 4_000_000


class AssumptionError(ValueError):
    """The structural assumptions on S fail for this family/truncation."""

    def __init__(self, message: str, audit: "AssumptionAudit | None" = None):
        super().__init__(message)
        self.audit = audit


@dataclass(frozen=True)
class ModelSpec:
    d: int
    alpha: float
    family: str = "isotropic"
    J: int = 8
    J_Z: int | None = None
    custom_table: tuple | None = None
    literal_plane_support: bool = False
    tail_correction: bool = True

    def __post_init__(self):
        if self.J_Z is None:
            object.__setattr__(self, "J_Z", self.J)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.d < 2:
            raise ValueError(f"dimension must be >= 2, got {self.d}")
        if self.J < 1:
            raise ValueError(f"noise truncation J must be >= 1, got {self.J}")
        if self.J_Z < self.J:
            raise ValueError(f"normalization radius J_Z={self.J_Z} is below J={self.J}")
        if self.family == "custom" and self.custom_table is None:
            raise ValueError("custom family needs custom_table")

    @classmethod
    def from_dict(cls, block: dict) -> "ModelSpec":
        table = block.get("custom_table")
        if table is not None:
            table = tuple(tuple(row) for row in table)
        return cls(
            d=int(block["d"]),
            alpha=float(block["alpha"]),
            family=block.get("family", "isotropic"),
            J=int(block["J"]),
            J_Z=int(block.get("J_Z", block["J"])),
            custom_table=table,
            literal_plane_support=bool(block.get("literal_plane_support", False)),
            tail_correction=bool(block.get("tail_correction", True)),
        )

    def to_dict(self) -> dict:
        out = {
            "family": self.family,
            "d": self.d,
            "alpha": self.alpha,
            "J": self.J,
            "J_Z": self.J_Z,
            "literal_plane_support": self.literal_plane_support,
            "tail_correction": self.tail_correction,
        }
        if self.custom_table is not None:
            out["custom_table"] = [list(r) for r in self.custom_table]
        return out


@dataclass(frozen=True)
class NoiseCoefficients:
    spec: ModelSpec
    modes: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    Z: float = 1.0
    Z_bracket: tuple[float, float] = (1.0, 1.0)
    deficit: float = 0.0

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def alpha(self) -> float:
        return self.spec.alpha

    @property
    def w_sq(self) -> np.ndarray:
        return self.values ** 2

    @property
    def mode_norm_sq(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.modes, self.modes)

    def regularity_sum(self) -> float:
        nsq = self.mode_norm_sq.astype(float)
        return math.fsum(nsq ** self.alpha * self.w_sq)

    def w(self, j) -> float:
        """Amplitude at lattice vector ``j`` (zero if not stored)."""
        j = np.asarray(j, dtype=np.int64)
        hit = np.flatnonzero(np.all(self.modes == j, axis=1))
        return float(self.values[hit[0]]) if len(hit) else 0.0

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(c) for c in m): float(v) for m, v in zip(self.modes, self.values)}

    def covariance_at_origin(self) -> np.ndarray:
        """D(0) = sum_j w_j^2 Pi_{j perp}."""
        m = self.modes.astype(float)
        nsq = self.mode_norm_sq.astype(float)
        outer = np.einsum("i,ij,ik->jk", self.w_sq / nsq, m, m)
        return float(np.sum(self.w_sq)) * np.eye(self.d) - outer


def _radial_sum(d: int, R: float, g, r_min: float = 0.0) -> float:
    """sum of g(|k|^2) over integer k with r_min < |k| <= R, sliced on the first axis."""
    Ri = int(math.floor(R))
    axes = np.arange(-Ri, Ri + 1, dtype=np.int64)
    if d == 1:
        rest = np.zeros(1, dtype=np.int64)
    else:
        rest_mesh = np.meshgrid(*([axes] * (d - 1)), indexing="ij")
        rest = sum(m.astype(np.int64) ** 2 for m in rest_mesh).ravel()
    lo, hi = r_min * r_min, R * R
    total = []
    for c in axes:
        nsq = rest + c * c
        sel = nsq[(nsq > lo) & (nsq <= hi) & (nsq > 0)]
        if len(sel):
            total.append(np.sum(g(sel.astype(float))))
    return math.fsum(total)


def _isotropic_norm_terms(d: int):
    def g(nsq):
        r = np.sqrt(nsq)
        return r ** (-d) / (np.log(r) + 1.0) ** 2

    return g


def _isotropic_tail_bracket(d: int, M: float) -> tuple[float, float]:
    """Bracket for sum_{|k| > M} |k|^-d (log|k| + 1)^-2 by comparing each point to its unit cube."""
    s = math.sqrt(d) / 2.0
    omega = unit_sphere_area(d)

    def tail_integral(start, shift):
        # t = log(r + shift) + 1 then x = 1/t turns the tail into a finite-range integral
        x_max = 1.0 / (math.log(start + shift) + 1.0)

        def h(x):
            return (1.0 - shift * math.exp(1.0 - 1.0 / x)) ** (d - 1) if x > 0 else 1.0

        val, _ = integrate.quad(h, 0.0, x_max, epsabs=0, epsrel=1e-13, limit=200)
        return omega * val

    if M - 2 * s < 2.0:
        raise ValueError("tail bracket needs M well above the cube diagonal")
    lower = tail_integral(M + s, s)
    upper = tail_integral(M - s, -s)
    return lower, upper


def _exact_radius(d: int, J_Z: int) -> int:
    per_axis = int(_EXACT_POINT_BUDGET ** (1.0 / d))
    return max(J_Z, (per_axis - 1) // 2, 8)


def _isotropic_Z_sq(spec: ModelSpec) -> tuple[float, float, float, float]:
    """Returns (Z^2 used, bracket lo, bracket hi, partial sum up to J)."""
    g = _isotropic_norm_terms(spec.d)
    part_J = _radial_sum(spec.d, spec.J, g)
    part_JZ = part_J + _radial_sum(spec.d, spec.J_Z, g, r_min=spec.J)
    if not spec.tail_correction:
        return part_JZ, part_JZ, part_JZ, part_J
    M = _exact_radius(spec.d, spec.J_Z)
    middle = _radial_sum(spec.d, M, g, r_min=spec.J_Z)
    lo, hi = _isotropic_tail_bracket(spec.d, M)
    Z_lo = part_JZ + middle + lo
    Z_hi = part_JZ + middle + hi
    # the upper tail keeps the untruncated regularity sum <= 1
    return Z_hi, Z_lo, Z_hi, part_J


def _shear_Z_sq(spec: ModelSpec) -> tuple[float, float, float, float]:
    m = np.arange(1, spec.J_Z + 1, dtype=float)
    terms = 1.0 / (m * (np.log(m) + 1.0) ** 2)
    part_J = 4.0 * math.fsum(terms[: spec.J])
    part_JZ = 4.0 * math.fsum(terms)
    if not spec.tail_correction:
        return part_JZ, part_JZ, part_JZ, part_J
    # f(m) = 1/(m (log m + 1)^2) is decreasing with antiderivative -1/(log m + 1)
    lo = 4.0 / (math.log(spec.J_Z + 1) + 1.0)
    hi = 4.0 / (math.log(spec.J_Z) + 1.0)
    return part_JZ + hi, part_JZ + lo, part_JZ + hi, part_J


def build_isotropic(spec: ModelSpec) -> NoiseCoefficients:
    if spec.family != "isotropic":
        raise ValueError(f"build_isotropic needs family='isotropic', got {spec.family!r}")
    Z_sq, lo, hi, part_J = _isotropic_Z_sq(spec)
    lat = enumerate_lattice(spec.d, spec.J)
    r = lat.norms
    Z = math.sqrt(Z_sq)
    w = r ** (-spec.d / 2.0 - spec.alpha) / (np.log(r) + 1.0) / Z
    deficit = max(0.0, 1.0 - part_J / Z_sq)
    return NoiseCoefficients(spec, lat.points.copy(), w, Z, (math.sqrt(lo), math.sqrt(hi)), deficit)


def build_shear(spec: ModelSpec) -> NoiseCoefficients:
    if spec.family != "shear":
        raise ValueError(f"build_shear needs family='shear', got {spec.family!r}")
    if spec.literal_plane_support:
        return _build_plane_shear(spec)
    Z_sq, lo, hi, part_J = _shear_Z_sq(spec)
    Z = math.sqrt(Z_sq)
    modes, w = [], []
    for axis in (0, 1):
        for m in range(1, spec.J + 1):
            amp = m ** (-0.5 - spec.alpha) / (math.log(m) + 1.0) / Z
            for sign in (1, -1):
                v = np.zeros(spec.d, dtype=np.int64)
                v[axis] = sign * m
                modes.append(v)
                w.append(amp)
    modes = np.array(modes)
    order = np.lexsort(modes.T[::-1])
    deficit = max(0.0, 1.0 - part_J / Z_sq)
    return NoiseCoefficients(
        spec, modes[order], np.array(w)[order], Z, (math.sqrt(lo), math.sqrt(hi)), deficit
    )


def _build_plane_shear(spec: ModelSpec) -> NoiseCoefficients:
    # k_3 = ... = k_d = 0 with k_1, k_2 free: the regularity sum diverges
    if spec.tail_correction:
        raise ValueError(
            "literal plane support makes the untruncated regularity sum divergent; "
            "use tail_correction=False to normalize over |k| <= J_Z"
        )
    plane = enumerate_lattice(2, spec.J_Z)
    r = plane.norms
    Z_sq = math.fsum(r ** (2 * spec.alpha) * (r ** (-0.5 - spec.alpha) / (np.log(r) + 1.0)) ** 2)
    keep = plane.norm_sq <= spec.J ** 2
    modes = np.zeros((int(keep.sum()), spec.d), dtype=np.int64)
    modes[:, :2] = plane.points[keep]
    rk = r[keep]
    w = rk ** (-0.5 - spec.alpha) / (np.log(rk) + 1.0) / math.sqrt(Z_sq)
    part_J = math.fsum(rk ** (2 * spec.alpha) * w ** 2)
    Z = math.sqrt(Z_sq)
    return NoiseCoefficients(spec, modes, w, Z, (Z, Z), max(0.0, 1.0 - part_J))


def build_custom(spec: ModelSpec) -> NoiseCoefficients:
    rows = [tuple(r) for r in spec.custom_table]
    if any(len(r) != spec.d + 1 for r in rows):
        raise ValueError(f"custom_table rows need {spec.d} integer coordinates plus w")
    table: dict[tuple[int, ...], float] = {}
    for row in rows:
        j = tuple(int(c) for c in row[:-1])
        w = float(row[-1])
        if any(c != int(x) for c, x in zip(j, row[:-1])):
            raise ValueError(f"non-integer mode {row[:-1]}")
        if not any(j):
            raise ValueError("custom table contains the zero mode; the mean flow must vanish")
        if w < 0:
            raise ValueError(f"negative amplitude at {j}")
        if sum(c * c for c in j) > spec.J ** 2:
            raise ValueError(f"mode {j} lies beyond the noise truncation J={spec.J}")
        if j in table:
            raise ValueError(f"duplicate mode {j}")
        table[j] = w
    for j, w in table.items():
        mirror = tuple(-c for c in j)
        if mirror not in table or not math.isclose(table[mirror], w, rel_tol=1e-12, abs_tol=0.0):
            raise ValueError(f"asymmetric custom table: w{j} != w{mirror}; symmetrize the input")
    keys = sorted(k for k, w in table.items() if w > 0)
    modes = np.array(keys, dtype=np.int64).reshape(-1, spec.d)
    w = np.array([table[k] for k in keys])
    coeffs = NoiseCoefficients(spec, modes, w, 1.0, (1.0, 1.0), 0.0)
    if coeffs.regularity_sum() > 1.0 + 1e-12:
        raise ValueError(
            f"custom family violates the regularity normalization: sum = {coeffs.regularity_sum()!r}"
        )
    return coeffs


def build(spec: ModelSpec) -> NoiseCoefficients:
    return {"isotropic": build_isotropic, "shear": build_shear, "custom": build_custom}[spec.family](spec)


def zero_coefficients(d: int, alpha: float = 0.5) -> NoiseCoefficients:
    """A family with no noise at all (pure heat equation)."""
    spec = ModelSpec(d=d, alpha=alpha, family="custom", J=1, custom_table=())
    return NoiseCoefficients(spec, np.zeros((0, d), dtype=np.int64), np.zeros(0))


# --------------------------------------------------------------------------
# structure function


class _STable:
    """Cumulative S over the sorted distinct mode norms."""

    def __init__(self, coeffs: NoiseCoefficients):
        nsq = coeffs.mode_norm_sq
        order = np.argsort(nsq, kind="stable")
        nsq = nsq[order]
        contrib = nsq.astype(float) ** ((1 + coeffs.alpha) / 2) * coeffs.w_sq[order]
        self.order = order
        self.sorted_nsq = nsq
        self.cum = np.cumsum(contrib)
        self.distinct_nsq, first = np.unique(nsq, return_index=True)
        self.group_end = np.append(first[1:], len(nsq)) - 1

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        n = np.searchsorted(self.sorted_nsq, r * r * (1 + 1e-12), side="right")
        out = np.where(n > 0, self.cum[np.maximum(n - 1, 0)] if len(self.cum) else 0.0, 0.0)
        return out


@dataclass
class StructureFunction:
    radii: np.ndarray
    S_values: np.ndarray
    truncation_limited: np.ndarray
    fitted: "AssumptionAudit | None" = None


def structure_function(coeffs: NoiseCoefficients, radii: Sequence[float]) -> StructureFunction:
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0) or np.any(np.diff(radii) < 0):
        raise ValueError("radii must be positive and sorted")
    table = _STable(coeffs)
    return StructureFunction(radii, table(radii), radii > coeffs.spec.J)


def S_function(coeffs: NoiseCoefficients):
    """Callable r -> S(r) over the stored modes (vectorized)."""
    return _STable(coeffs)


# --------------------------------------------------------------------------
# assumption audit


@dataclass
class AssumptionAudit:
    delta: float
    beta: float
    r0: float
    psi: list[tuple[float, float]]
    psi_fit: tuple[float, float]
    nondegeneracy_ratio: float
    delta_growth: float
    pareto: list[tuple[float, float]]
    deficit: float
    seed: int
    direction: list[float]

    def psi_at(self, K: float) -> tuple[float, bool]:
        """Psi(K) from the table when covered, else the fitted power law (flagged)."""
        covered = [(k, v) for k, v in self.psi if k >= K and math.isfinite(v)]
        if covered:
            return min(covered)[1], False
        c, gamma = self.psi_fit
        return c * K ** gamma, True

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "beta": self.beta,
            "r0": self.r0,
            "psi": [[k, v] for k, v in self.psi],
            "psi_fit": {"prefactor": self.psi_fit[0], "exponent": self.psi_fit[1]},
            "nondegeneracy_ratio": self.nondegeneracy_ratio,
            "delta_growth": self.delta_growth,
            "pareto": [[b, dl] for b, dl in self.pareto],
            "deficit": self.deficit,
            "seed": self.seed,
            "direction": self.direction,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)


def _eval_radii(table: _STable, r0: float, J: float):
    """Group-end indices at which S changes within [r0, J], plus the group at r0."""
    norms = np.sqrt(table.distinct_nsq.astype(float))
    at_r0 = np.flatnonzero(norms <= r0 * (1 + 1e-12))
    inner = np.flatnonzero((norms > r0 * (1 + 1e-12)) & (norms <= J * (1 + 1e-12)))
    groups = ([at_r0[-1]] if len(at_r0) else []) + list(inner)
    return table.group_end[np.array(groups, dtype=np.int64)] if groups else np.zeros(0, np.int64)


def nondegeneracy_ratio(
    coeffs: NoiseCoefficients,
    r0: float,
    r_max: float | None = None,
    n_angles: int = 4096,
    n_random: int = 10_000,
    n_refine: int = 10,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """min over r in [r0, r_max] and unit v of sum_{|k|<=r} |k|^{1+a} w^2 |Pi_k v| / S(r)."""
    r_max = coeffs.spec.J if r_max is None else r_max
    table = _STable(coeffs)
    ends = _eval_radii(table, r0, r_max)
    d = coeffs.d
    if len(ends) == 0 or table.cum[ends].max() <= 0:
        return 0.0, np.eye(d)[0]
    keep = table.cum[ends] > 0
    ends = ends[keep]
    S_r = table.cum[ends]
    modes = coeffs.modes[table.order].astype(float)
    nsq = table.sorted_nsq.astype(float)
    u = nsq ** ((1 + coeffs.alpha) / 2) * coeffs.w_sq[table.order]
    unit = modes / np.sqrt(nsq)[:, None]

    def ratio_many(V):  # V: (m, d) unit rows
        c = unit @ V.T  # (modes, m)
        proj = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
        cum = np.cumsum(u[:, None] * proj, axis=0)
        return np.min(cum[ends] / S_r[:, None], axis=0)

    def ratio_one(v):
        v = np.asarray(v, dtype=float)
        nv = np.linalg.norm(v)
        if nv == 0:
            return np.inf
        return float(ratio_many((v / nv)[None, :])[0])

    if d == 2:
        theta = np.arange(n_angles) * (np.pi / n_angles)
        vals = np.concatenate(
            [ratio_many(np.column_stack([np.cos(t), np.sin(t)])) for t in np.array_split(theta, 16)]
        )
        i = int(np.argmin(vals))
        best_t, best = theta[i], float(vals[i])
        h = np.pi / n_angles
        res = optimize.minimize_scalar(
            lambda t: ratio_one([math.cos(t), math.sin(t)]),
            bounds=(best_t - h, best_t + h),
            method="bounded",
            options={"xatol": 1e-12},
        )
        if res.fun < best:
            best_t, best = float(res.x), float(res.fun)
        return best, np.array([math.cos(best_t), math.sin(best_t)])

    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n_random, d))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    # coordinate axes are where degenerate families vanish; include them
    V = np.vstack([np.eye(d), V])
    vals = np.concatenate([ratio_many(chunk) for chunk in np.array_split(V, max(1, len(V) // 512))])
    starts = np.argsort(vals)[:n_refine]
    best_v, best = V[starts[0]], float(vals[starts[0]])
    for s in starts:
        res = optimize.minimize(ratio_one, V[s], method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
        if res.fun < best:
            best, best_v = float(res.fun), res.x / np.linalg.norm(res.x)
    return best, np.asarray(best_v)


def growth_pareto(coeffs: NoiseCoefficients, r0: float, betas: Sequence[float]) -> list[tuple[float, float]]:
    """For each beta, delta(beta) = inf_{r0 <= r <= J} S(r) / r^beta (exact for step S)."""
    table = _STable(coeffs)
    J = coeffs.spec.J
    norms = np.sqrt(table.distinct_nsq.astype(float))
    S_at = table.cum[table.group_end] if len(norms) else np.zeros(0)
    inner = (norms > r0) & (norms <= J)
    # just below each jump S takes the previous group's value
    prev = np.concatenate([[0.0], S_at[:-1]])
    cand_r = np.concatenate([[r0, J], norms[inner]])
    cand_S = np.concatenate([table(np.array([r0, J])), prev[inner]])
    out = []
    for b in betas:
        out.append((float(b), float(np.min(cand_S / cand_r ** b))))
    return out


def psi_table(coeffs: NoiseCoefficients, r0: float, K_grid: Sequence[float]) -> list[tuple[float, float]]:
    """Psi(K) = sup_{r0 <= r <= J/K} S(K r) / S(r); NaN when J/K < r0."""
    table = _STable(coeffs)
    J = coeffs.spec.J
    norms = np.sqrt(table.distinct_nsq.astype(float))
    out = []
    for K in K_grid:
        K = float(K)
        hi = J / K
        if hi < r0:
            out.append((K, float("nan")))
            continue
        pts = np.concatenate([[r0, hi], norms / K, norms])
        pts = pts[(pts >= r0) & (pts <= hi * (1 + 1e-12))]
        den = table(pts)
        num = table(K * pts)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(den > 0, num / den, np.inf)
        out.append((K, float(np.max(ratio))))
    return out


DEFAULT_BETAS = tuple(round(0.05 * i, 2) for i in range(1, 20))


def audit_assumption(
    coeffs: NoiseCoefficients,
    r0: float = 4.0,
    K_grid: Sequence[float] = (1, 2, 4),
    betas: Sequence[float] = DEFAULT_BETAS,
    seed: int = 0,
    degenerate_tol: float = 1e-9,
    **search,
) -> AssumptionAudit:
    """Fit witnesses (delta, beta, Psi) for the structural conditions on S.

    Raises AssumptionError when the family is degenerate (delta <= 0) on
    ``[r0, J]``; the partially filled audit is attached to the exception.
    """
    J = coeffs.spec.J
    if r0 < 4:
        raise ValueError(f"r0 must be >= 4, got {r0}")
    if r0 > J:
        raise ValueError(f"r0={r0} exceeds the noise truncation J={J}")
    pareto = growth_pareto(coeffs, r0, betas)
    ratio, direction = nondegeneracy_ratio(coeffs, r0, seed=seed, **search)
    ratio = min(ratio, 1.0)
    # the largest beta whose growth constant does not undercut the non-degeneracy ratio
    usable = [(b, dl) for b, dl in pareto if dl >= ratio]
    beta, delta_growth = max(usable) if usable else min(pareto)
    delta = min(delta_growth, ratio)
    psi = psi_table(coeffs, r0, K_grid)
    finite = [(k, v) for k, v in psi if k > 1 and math.isfinite(v) and v > 0]
    if len(finite) >= 2:
        gamma, logc = np.polyfit(np.log([k for k, _ in finite]), np.log([v for _, v in finite]), 1)
        fit = (float(math.exp(logc)), float(gamma))
    else:
        fit = (1.0, 1.0 - coeffs.alpha)
    audit = AssumptionAudit(
        delta=float(delta), beta=float(beta), r0=float(r0), psi=psi, psi_fit=fit,
        nondegeneracy_ratio=float(ratio), delta_growth=float(delta_growth), pareto=pareto,
        deficit=float(coeffs.deficit), seed=int(seed), direction=[float(x) for x in direction],
    )
    if not delta > degenerate_tol:
        if ratio <= degenerate_tol:
            what, why = "non-degeneracy", "the noise mass concentrates on a line"
        else:
            what, why = "growth S(r) >= delta r^beta", "S grows too slowly on this range"
        raise AssumptionError(
            f"assumption violated on r in [{r0}, {J}]: {what} fails "
            f"(nondegeneracy ratio {ratio:.3g}, growth delta {delta_growth:.3g}); "
            f"{why} and no certificate applies",
            audit,
        )
    return audit
