"""Weighted lattice Poincare inequality, checked case by case.

For a finitely supported nonnegative sequence ``a`` on Z^d \\ {0},

    sum_k S(R|k|)^2 a_k^p
        <= K(p, R) * sum_{k,j} w_j^2 |Pi_{j perp} k|^2 (a_{k+j}^{p-1} - a_k^{p-1}) (a_{k+j} - a_k)

with K(p, R) = 2^17 R^2 p^2 Psi((24 R / delta)^3)^2 / (delta^2 (p - 1)).
Only pairs with an endpoint in the support contribute to the right side, so
sums run over (support point, mode) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import json
import math
from typing import Iterable, Sequence

import numpy as np

from .coefficients import AssumptionAudit, AssumptionError, NoiseCoefficients, S_function


@dataclass
class SparseField:
    points: np.ndarray  # (m, d) distinct nonzero integer vectors
    values: np.ndarray  # (m,) nonnegative

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        pts = np.asarray(self.points, dtype=np.int64)
        self.points = pts if pts.ndim == 2 else pts.reshape(len(self.values), -1)
        if len(self.points) != len(self.values):
            raise ValueError("points and values differ in length")
        if np.any(self.values < 0):
            raise ValueError("field values must be nonnegative")
        if len(self.points) and np.any(np.all(self.points == 0, axis=1)):
            raise ValueError("the zero mode carries no mass")
        if len({tuple(p) for p in self.points}) != len(self.points):
            raise ValueError("duplicate support points")

    @property
    def radius(self) -> float:
        return float(np.sqrt((self.points ** 2).sum(axis=1)).max()) if len(self.points) else 0.0

    def scaled(self, c: float) -> "SparseField":
        return SparseField(self.points.copy(), c * self.values)

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "values": self.values.tolist()}


class _Lookup:
    """Dense box lookup for values of a sparse field (zero outside the support)."""

    def __init__(self, f: SparseField, reach: int):
        self.H = int(np.abs(f.points).max(initial=0)) + reach + 1
        side = 2 * self.H + 1
        d = f.points.shape[1]
        self.box = np.zeros((side,) * d)
        self.member = np.zeros((side,) * d, dtype=bool)
        idx = tuple((f.points + self.H).T)
        self.box[idx] = f.values
        self.member[idx] = True

    def value(self, pts: np.ndarray) -> np.ndarray:
        return self.box[tuple((pts + self.H).T)]

    def inside(self, pts: np.ndarray) -> np.ndarray:
        return self.member[tuple((pts + self.H).T)]


def _pow(x: np.ndarray, e: float) -> np.ndarray:
    return np.ones_like(x) if e == 0 else np.power(x, e)


def lhs(f: SparseField, S, p: float, R: float) -> float:
    """sum_k S(R |k|)^2 a_k^p."""
    if len(f.values) == 0:
        return 0.0
    r = np.sqrt((f.points.astype(float) ** 2).sum(axis=1))
    return math.fsum(np.asarray(S(R * r)) ** 2 * f.values ** p)


def rhs_bilinear(f: SparseField, coeffs: NoiseCoefficients, p: float, sign: int = 1) -> float:
    """sum_{k,j} w_j^2 |Pi_{j perp} k|^2 (a_{k+sj}^{p-1} - a_k^{p-1})(a_{k+sj} - a_k), s = ``sign``.

    ``a`` is extended by zero off its support (including the origin).
    """
    if len(f.values) == 0 or len(coeffs.modes) == 0:
        return 0.0
    reach = int(np.abs(coeffs.modes).max())
    look = _Lookup(f, reach)
    modes = coeffs.modes * sign
    nj = coeffs.mode_norm_sq.astype(float)[None, :]
    w2 = coeffs.w_sq[None, :]
    pts = f.points
    d = pts.shape[1]
    zero_pow = 1.0 if p == 1 else 0.0

    def proj(k):  # k: (m, M, d) -> |Pi_{j perp} k|^2 per (point, mode)
        kj = np.einsum("mjd,jd->mj", k, modes)
        return ((k ** 2).sum(-1) * nj - kj ** 2) / nj

    # pairs with k in the support
    k = np.broadcast_to(pts[:, None, :], (len(pts), len(modes), d))
    a_kp = look.value((k + modes[None]).reshape(-1, d)).reshape(k.shape[:2])
    a_k = f.values[:, None]
    t1 = w2 * proj(k) * (_pow(a_kp, p - 1) - _pow(a_k, p - 1)) * (a_kp - a_k)
    # pairs with k off the support and k + j on it
    km = pts[:, None, :] - modes[None]
    flat = km.reshape(-1, d)
    off = (~look.inside(flat) & np.any(flat != 0, axis=1)).reshape(km.shape[:2])
    a_s = np.broadcast_to(f.values[:, None], off.shape)
    t2 = np.where(off, w2 * proj(km) * (_pow(a_s, p - 1) - zero_pow) * a_s, 0.0)
    return math.fsum(t1.ravel()) + math.fsum(t2.ravel())


def explicit_constant(audit: AssumptionAudit, p: float, R: float) -> tuple[float, bool]:
    """2^17 R^2 p^2 Psi((24 R / delta)^3)^2 / (delta^2 (p - 1)) and whether Psi was extrapolated."""
    if not audit.delta > 0:
        raise AssumptionError("non-degeneracy fails (delta <= 0): the inequality does not apply", audit)
    if p <= 1:
        raise ValueError(f"p must exceed 1, got {p}")
    K = (24.0 * R / audit.delta) ** 3
    psi, extrapolated = audit.psi_at(K)
    const = 2.0 ** 17 * R ** 2 * p ** 2 * psi ** 2 / (audit.delta ** 2 * (p - 1))
    return const, extrapolated


@dataclass
class InequalityCase:
    coeffs: NoiseCoefficients = field(repr=False)
    field: SparseField = field(repr=False)
    p: float
    R: float
    lhs: float = math.nan
    rhs: float = math.nan
    explicit_constant: float = math.nan
    ratio: float = math.nan
    extrapolated_psi: bool = False


@dataclass
class Verdict:
    holds_with_paper_constant: bool
    empirical_best_constant: float
    explicit_constant: float
    extrapolated_psi: bool


def verify(case: InequalityCase, audit: AssumptionAudit, S=None) -> Verdict:
    if not (1 < case.p <= 2):
        raise ValueError(f"p must lie in (1, 2], got {case.p}")
    if case.R < audit.r0:
        raise ValueError(f"R={case.R} is below r0={audit.r0}")
    const, extrap = explicit_constant(audit, case.p, case.R)
    S = S_function(case.coeffs) if S is None else S
    case.lhs = lhs(case.field, S, case.p, case.R)
    case.rhs = rhs_bilinear(case.field, case.coeffs, case.p)
    case.explicit_constant = const
    case.extrapolated_psi = extrap
    if case.lhs == 0.0:
        case.ratio = 0.0
    else:
        case.ratio = case.lhs / case.rhs if case.rhs > 0 else math.inf
    holds = case.lhs <= const * case.rhs
    return Verdict(bool(holds), case.ratio, const, extrap)


def random_field(rng: np.random.Generator, d: int, radius: int, n_points: int, ray: bool = False) -> SparseField:
    """Random nonnegative field on up to ``n_points`` sites with |k| <= radius.

    With ``ray`` set the support lies on the positive e_1 axis.
    """
    if ray:
        m = rng.choice(np.arange(1, radius + 1), size=min(n_points, radius), replace=False)
        pts = np.zeros((len(m), d), dtype=np.int64)
        pts[:, 0] = m
    else:
        cand = np.stack(np.meshgrid(*([np.arange(-radius, radius + 1)] * d), indexing="ij"), -1).reshape(-1, d)
        nsq = (cand ** 2).sum(1)
        cand = cand[(nsq > 0) & (nsq <= radius * radius)]
        pick = rng.choice(len(cand), size=min(n_points, len(cand)), replace=False)
        pts = cand[np.sort(pick)]
    vals = rng.exponential(1.0, size=len(pts))
    return SparseField(pts, vals)


@dataclass
class BatchRow:
    case_id: int
    p: float
    R: float
    lhs: float
    rhs: float
    paper_constant: float
    ratio: float
    holds: bool
    extrapolated_psi: bool


def batch_verify(
    coeffs: NoiseCoefficients,
    audit: AssumptionAudit,
    n_cases: int,
    p_list: Sequence[float],
    R: float | None = None,
    seed: int = 0,
    radius: int = 8,
    max_points: int = 20,
) -> tuple[list[BatchRow], list[dict]]:
    """Random cases (seeded) for every p; returns rows and serialized violation witnesses."""
    R = audit.r0 if R is None else R
    rng = np.random.default_rng(seed)
    S = S_function(coeffs)
    rows, witnesses = [], []
    for cid in range(n_cases):
        f = random_field(rng, coeffs.d, radius, int(rng.integers(1, max_points + 1)))
        for p in p_list:
            case = InequalityCase(coeffs, f, float(p), float(R))
            v = verify(case, audit, S)
            rows.append(BatchRow(cid, float(p), float(R), case.lhs, case.rhs, v.explicit_constant,
                                 case.ratio, v.holds_with_paper_constant, v.extrapolated_psi))
            if not v.holds_with_paper_constant:
                witnesses.append({"case_id": cid, "p": p, "R": R, "field": f.to_dict(),
                                  "lhs": case.lhs, "rhs": case.rhs, "paper_constant": v.explicit_constant})
    return rows, witnesses


def write_batch_csv(rows: Iterable[BatchRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("case_id,p,R,lhs,rhs,paper_constant,ratio,holds,extrapolated_psi\n")
        for r in rows:
            nums = ",".join(repr(float(v)) for v in (r.p, r.R, r.lhs, r.rhs, r.paper_constant, r.ratio))
            fh.write(f"{r.case_id},{nums},{int(r.holds)},{int(r.extrapolated_psi)}\n")


def write_witnesses(witnesses: list[dict], path) -> None:
    with open(path, "w") as fh:
        json.dump(witnesses, fh, indent=2)
