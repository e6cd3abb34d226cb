"""Monte Carlo sampling of the Galerkin-truncated transport-noise SPDE.

Each sample evolves the Fourier modes on one half of the lattice (the other
half is the complex conjugate) under the Ito form

    dphi(k) = c_k phi(k) dt - 2 pi i k . sum_j w_j phi(k - j) sum_n e_{j,n} dW^{j,n},
    c_k = -4 pi^2 kappa |k|^2 - 2 pi^2 sum_j w_j^2 |Pi_{j perp} k|^2,

where the second part of c_k is the Stratonovich-to-Ito correction (summed
over every stored j, matching the absorbing loss of the master equation).
The scheme is Euler-Maruyama with the linear drift taken exactly:
phi <- e^{c dt} phi + noise increment. Noises come in conjugate pairs,
W^{-j} = conj(W^j), each of unit mean-square rate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Sequence

import numba
import numpy as np

from .coefficients import NoiseCoefficients
from .lattice import Lattice
from .rng import complex_normals, seed_key
from .spectra import orthonormal_basis

# precondition: dt * (fastest linear rate) stays below this
STABILITY_LIMIT = 0.1


class StabilityError(ValueError):
    pass


@dataclass
class _Plan:
    """Static index tables for the half-lattice update."""

    half_ids: np.ndarray  # full-lattice id of each stored (half) site
    full_to_half: np.ndarray  # stored index of k or of -k
    full_conj: np.ndarray  # True when the full site is the conjugate of its stored partner
    nb_half: np.ndarray  # (H, M) stored index of k - j, -1 if outside
    nb_conj: np.ndarray  # (H, M) conjugate flag for k - j
    coef: np.ndarray  # (H, M, d-1) real 2 pi w_j (k . e_{j,n})
    pair: np.ndarray  # (M,) noise pair index of mode j
    pair_conj: np.ndarray  # (M,) True when j is the negative representative
    n_pairs: int
    decay: np.ndarray  # (H,) c_k
    outflow: np.ndarray  # (full n,) absorbing loss rate per site


def _build_plan(coeffs: NoiseCoefficients, lattice: Lattice, kappa: float, basis_convention: str) -> _Plan:
    d = lattice.d
    half = lattice.half_mask()
    half_ids = np.flatnonzero(half)
    H = len(half_ids)
    neg = lattice.negation
    full_to_half = np.full(lattice.size, -1, dtype=np.int64)
    full_to_half[half_ids] = np.arange(H)
    full_conj = ~half
    full_to_half[~half] = full_to_half[neg[~half]]

    modes = coeffs.modes
    M = len(modes)
    # pair j with -j; the representative has first nonzero coordinate > 0
    first = np.argmax(modes != 0, axis=1) if M else np.zeros(0, dtype=int)
    positive = modes[np.arange(M), first] > 0 if M else np.zeros(0, dtype=bool)
    rep = np.where(positive[:, None], modes, -modes)
    reps, pair = np.unique(rep, axis=0, return_inverse=True) if M else (np.zeros((0, d)), np.zeros(0, int))
    pair = np.asarray(pair).ravel().astype(np.int64)

    basis = np.array([orthonormal_basis(j, basis_convention) for j in modes]).reshape(M, d - 1, d)
    k = lattice.points[half_ids].astype(float)
    coef = 2 * np.pi * coeffs.values[None, :, None] * np.einsum("hd,mnd->hmn", k, basis)

    nb_full = lattice.ids(lattice.points[half_ids][:, None, :] - modes[None, :, :])
    nb_half = np.where(nb_full >= 0, full_to_half[np.maximum(nb_full, 0)], -1)
    nb_conj = np.where(nb_full >= 0, full_conj[np.maximum(nb_full, 0)], False)

    # noise intensity q_k = sum_j w_j^2 |Pi_{j perp} k|^2 (every j), via D(0)
    D0 = coeffs.covariance_at_origin() if M else np.zeros((d, d))
    pts = lattice.points.astype(float)
    q_full = np.einsum("id,de,ie->i", pts, D0, pts)
    ksq = lattice.norm_sq.astype(float)
    decay = (-4 * np.pi ** 2 * kappa * ksq - 2 * np.pi ** 2 * q_full)[half_ids]

    inside = nb_full >= 0
    w2 = coeffs.w_sq[None, :]
    nsq = coeffs.mode_norm_sq.astype(float)[None, :] if M else np.zeros((1, 0))
    kf = lattice.points[half_ids]
    proj = ((kf ** 2).sum(1)[:, None] * nsq - (kf @ modes.T) ** 2) / np.where(nsq == 0, 1, nsq)
    out_half = 4 * np.pi ** 2 * np.sum(np.where(inside, 0.0, w2 * proj), axis=1)
    outflow = out_half[full_to_half]
    return _Plan(half_ids, full_to_half, full_conj, nb_half, nb_conj.astype(np.bool_), coef,
                 pair, ~positive, len(reps), decay, outflow)


def stability_number(coeffs: NoiseCoefficients, lattice: Lattice, kappa: float, dt: float) -> float:
    """dt * (4 pi^2 kappa N^2 + 2 pi^2 max_k sum_j w_j^2 |Pi_{j perp} k|^2)."""
    pts = lattice.points.astype(float)
    D0 = coeffs.covariance_at_origin() if len(coeffs.modes) else np.zeros((lattice.d, lattice.d))
    q = np.einsum("id,de,ie->i", pts, D0, pts)
    return dt * (4 * np.pi ** 2 * kappa * lattice.N ** 2 + 2 * np.pi ** 2 * float(q.max(initial=0.0)))


def _compact(plan: _Plan):
    """Flatten the valid (site, mode, direction) triples into CSR-like lists.

    Sources index a full-length buffer holding phi and its conjugates; noises
    index a buffer holding each pair's increment and its conjugate.
    """
    H, M, R = plan.coef.shape
    start = np.zeros(H + 1, dtype=np.int64)
    src, noise, coef = [], [], []
    for h in range(H):
        for m in range(M):
            g = plan.nb_half[h, m]
            if g < 0:
                continue
            for r in range(R):
                c = plan.coef[h, m, r]
                if c == 0.0:
                    continue
                src.append(g + (H if plan.nb_conj[h, m] else 0))
                noise.append(plan.pair[m] * R + r + (plan.n_pairs * R if plan.pair_conj[m] else 0))
                coef.append(c)
        start[h + 1] = len(src)
    return start, np.array(src, dtype=np.int64), np.array(noise, dtype=np.int64), np.array(coef)


# samples advanced together by one thread; the inner loop over them vectorizes
_BATCH = 16


@numba.njit(cache=True, inline="always")
def _em_step(pr, pi, br, bi, zr, zi, growth, start, src, noise, coef, outflow_half, dt, ar, ai, lost):
    """One exponential Euler-Maruyama step for a batch, in place; adds outflow to ``lost``."""
    H, B = pr.shape
    for h in range(H):
        for b in range(B):
            br[h, b] = pr[h, b]
            bi[h, b] = pi[h, b]
            br[H + h, b] = pr[h, b]
            bi[H + h, b] = -pi[h, b]
    for h in range(H):
        for b in range(B):
            ar[b] = 0.0
            ai[b] = 0.0
        for e in range(start[h], start[h + 1]):
            c = coef[e]
            n = noise[e]
            q = src[e]
            for b in range(B):
                ar[b] += c * (zr[n, b] * br[q, b] - zi[n, b] * bi[q, b])
                ai[b] += c * (zr[n, b] * bi[q, b] + zi[n, b] * br[q, b])
        g = growth[h]
        o = 2.0 * outflow_half[h] * dt
        for b in range(B):
            vr = br[h, b]
            vi = bi[h, b]
            lost[b] += o * (vr * vr + vi * vi)
            pr[h, b] = g * vr + ai[b]
            pi[h, b] = g * vi - ar[b]


@numba.njit(cache=True, inline="always")
def _record(sq, l2, leak, q, si, s0, pr, pi, lost):
    H, B = pr.shape
    n = sq.shape[2]
    for b in range(B):
        s = s0 + b
        if s >= n:
            break
        tot = 0.0
        for h in range(H):
            x = pr[h, b] * pr[h, b] + pi[h, b] * pi[h, b]
            sq[q, si, s, h] = x
            tot += x
        l2[q, si, s] = 2.0 * tot
        leak[q, si, s] = lost[b]


@numba.njit(cache=True, parallel=True)
def _run(phi0, decay, start, src, noise, coef, n_noise, outflow_half,
         dt, n_steps, snap_steps, n_samples, k0, k1, coarse):
    """Sample loop in batches. With ``coarse`` set a second path with step 2 dt is
    driven by the summed increments of the fine path (snapshots on even steps).
    Each sample draws from its own Philox stream, so batching does not change paths."""
    H = phi0.shape[0]
    B = _BATCH
    n_snap = snap_steps.shape[0]
    n_paths = 2 if coarse else 1
    sq = np.zeros((n_paths, n_snap, n_samples, H))
    l2 = np.zeros((n_paths, n_snap, n_samples))
    leak = np.zeros((n_paths, n_snap, n_samples))
    growth = np.exp(decay * dt)
    growth2 = np.exp(decay * 2.0 * dt)
    sqdt = math.sqrt(dt)
    n_batches = (n_samples + B - 1) // B
    for bt in numba.prange(n_batches):
        s0 = bt * B
        pr = np.empty((H, B))
        pi = np.empty((H, B))
        for b in range(B):
            pr[:, b] = phi0.real
            pi[:, b] = phi0.imag
        cr = pr.copy()
        ci = pi.copy()
        br = np.empty((2 * H, B))
        bi = np.empty((2 * H, B))
        z = np.empty(n_noise, dtype=np.complex128)
        zr = np.empty((2 * n_noise, B))
        zi = np.empty((2 * n_noise, B))
        zcr = np.zeros((2 * n_noise, B))
        zci = np.zeros((2 * n_noise, B))
        ar = np.empty(B)
        ai = np.empty(B)
        lost_f = np.zeros(B)
        lost_c = np.zeros(B)
        si = 0
        for step in range(n_steps + 1):
            while si < n_snap and snap_steps[si] == step:
                _record(sq, l2, leak, 0, si, s0, pr, pi, lost_f)
                if coarse:
                    _record(sq, l2, leak, 1, si, s0, cr, ci, lost_c)
                si += 1
            if step == n_steps:
                break
            for b in range(B):
                complex_normals(z, step, s0 + b, k0, k1)
                for i in range(n_noise):
                    zr[i, b] = z[i].real * sqdt
                    zi[i, b] = z[i].imag * sqdt
                    zr[n_noise + i, b] = z[i].real * sqdt
                    zi[n_noise + i, b] = -z[i].imag * sqdt
            _em_step(pr, pi, br, bi, zr, zi, growth, start, src, noise, coef, outflow_half, dt, ar, ai, lost_f)
            if coarse:
                zcr += zr
                zci += zi
                if step % 2 == 1:
                    _em_step(cr, ci, br, bi, zcr, zci, growth2, start, src, noise, coef, outflow_half,
                             2.0 * dt, ar, ai, lost_c)
                    zcr[:] = 0.0
                    zci[:] = 0.0
    return sq, l2, leak


@dataclass
class TrajectoryEnsemble:
    lattice: Lattice = field(repr=False)
    times: np.ndarray
    n_samples: int
    seed: int
    dt: float
    sq_half: np.ndarray = field(repr=False)  # (n_snap, n_samples, H) |phi|^2
    l2: np.ndarray = field(repr=False)  # (n_snap, n_samples) full-lattice sum |phi|^2
    cumulative_outflow: np.ndarray = field(repr=False)  # (n_snap, n_samples)
    plan: _Plan = field(repr=False)
    coarse_sq_half: np.ndarray | None = field(default=None, repr=False)  # same, step 2 dt

    def snapshot_index(self, t: float) -> int:
        hit = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=0.5 * self.dt))
        if not len(hit):
            raise KeyError(f"no snapshot at t={t}; available: {self.times.tolist()}")
        return int(hit[0])


@dataclass
class SecondMoments:
    mean: np.ndarray
    se: np.ndarray
    n_samples: int
    se_defined: bool


def simulate(
    coeffs: NoiseCoefficients,
    lattice: Lattice,
    kappa: float,
    a0: np.ndarray,
    dt: float,
    T: float,
    n_samples: int,
    seed: int,
    snapshot_times: Sequence[float] | None = None,
    basis_convention: str = "least_aligned",
    phase: np.ndarray | None = None,
    extrapolate: bool = False,
) -> TrajectoryEnsemble:
    """Sample the truncated SPDE from the deterministic state phi_hat(k) = sqrt(a0_k) e^{i phase_k}.

    ``a0`` must be even (a0_k = a0_{-k}); phases, when given, are taken on the
    stored half and mirrored by conjugation. With ``extrapolate`` a coupled
    path of step 2 dt is run on the same Brownian increments so that
    ``empirical_second_moments(..., extrapolated=True)`` can cancel the
    first-order bias.
    """
    if coeffs.d != lattice.d:
        raise ValueError("dimension mismatch between coefficients and lattice")
    if kappa < 0 or dt <= 0 or T < 0 or n_samples < 1:
        raise ValueError("need kappa >= 0, dt > 0, T >= 0, n_samples >= 1")
    a0 = np.asarray(a0, dtype=float)
    if a0.shape != (lattice.size,) or np.any(a0 < 0):
        raise ValueError("a0 must be a nonnegative field on the lattice")
    if not np.array_equal(a0, a0[lattice.negation]):
        raise ValueError("a0 must be even: a real scalar has a_k = a_{-k}")
    stab = stability_number(coeffs, lattice, kappa, dt)
    if stab >= STABILITY_LIMIT:
        raise StabilityError(f"dt={dt} violates the stability precondition (number {stab:.3g} >= {STABILITY_LIMIT})")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    times = np.array([0.0, T] if snapshot_times is None else sorted(snapshot_times), dtype=float)
    snap_steps = np.rint(times / dt).astype(np.int64)
    if np.any(np.abs(snap_steps * dt - times) > 1e-9 * np.maximum(1.0, times)) or np.any(snap_steps > n_steps):
        raise ValueError("snapshot times must be multiples of dt within [0, T]")
    plan = _build_plan(coeffs, lattice, kappa, basis_convention)
    phi0 = np.sqrt(a0[plan.half_ids]).astype(np.complex128)
    if phase is not None:
        phi0 = phi0 * np.exp(1j * np.asarray(phase, dtype=float)[plan.half_ids])
    if extrapolate and (n_steps % 2 or np.any(snap_steps % 2)):
        raise ValueError("extrapolation needs T and snapshot times on even multiples of dt")
    k0, k1 = seed_key(seed)
    start, src, noise, coef = _compact(plan)
    sq, l2, leak = _run(
        phi0, plan.decay, start, src, noise, coef, plan.n_pairs * (lattice.d - 1),
        plan.outflow[plan.half_ids], float(dt), n_steps, snap_steps, int(n_samples), k0, k1,
        bool(extrapolate),
    )
    return TrajectoryEnsemble(lattice, times, int(n_samples), int(seed), float(dt), sq[0], l2[0], leak[0],
                              plan, sq[1] if extrapolate else None)


def empirical_second_moments(ens: TrajectoryEnsemble, t: float, extrapolated: bool = False) -> SecondMoments:
    """Sample mean of |phi_hat(k)|^2 and its standard error, on the full lattice.

    ``extrapolated`` uses the per-sample combination 2 X_dt - X_2dt, whose mean
    has second-order bias; its standard error comes from the same samples.
    """
    i = ens.snapshot_index(t)
    data = ens.sq_half[i]
    if extrapolated:
        if ens.coarse_sq_half is None:
            raise ValueError("ensemble was simulated without the coupled coarse path")
        data = 2.0 * data - ens.coarse_sq_half[i]
    mean_h = data.mean(axis=0)
    n = ens.n_samples
    if n > 1:
        se_h = data.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        se_h = np.full_like(mean_h, np.nan)
    idx = ens.plan.full_to_half
    return SecondMoments(mean_h[idx], se_h[idx], n, n > 1)


def mean_recursion(coeffs: NoiseCoefficients, lattice: Lattice, kappa: float, a0: np.ndarray,
                   dt: float, n_steps: int) -> np.ndarray:
    """Exact mean of |phi_hat|^2 under the discrete scheme:
    a <- e^{2 c dt} a + dt * 4 pi^2 sum_j w_j^2 |Pi_{j perp} k|^2 a_{k-j} (k - j inside)."""
    from .master import assemble

    gen = assemble(coeffs, lattice, 0.0, backend="csr")
    pts = lattice.points.astype(float)
    D0 = coeffs.covariance_at_origin() if len(coeffs.modes) else np.zeros((lattice.d, lattice.d))
    q = np.einsum("id,de,ie->i", pts, D0, pts)
    c = -4 * np.pi ** 2 * kappa * lattice.norm_sq - 2 * np.pi ** 2 * q
    g = np.exp(2 * c * dt)
    a = np.asarray(a0, dtype=float).copy()
    for _ in range(n_steps):
        a = g * a + dt * (gen.coupling @ a)
    return a


def write_snapshot_csv(ens: TrajectoryEnsemble, path, extrapolated: bool = False) -> None:
    """Columns t, site_id, a, se, n_samples (mirrors the trajectory CSV)."""
    with open(path, "w") as fh:
        fh.write("t,site_id,a,se,n_samples\n")
        for t in ens.times:
            m = empirical_second_moments(ens, t, extrapolated)
            for i, (a, se) in enumerate(zip(m.mean, m.se)):
                fh.write(f"{float(t)!r},{i},{float(a)!r},{float(se)!r},{m.n_samples}\n")
