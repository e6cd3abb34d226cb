"""Second-moment master equation on a truncated lattice.

For ``a_k = E|phi_hat(k)|^2`` the closed linear system reads

    da_k/dt = -8 pi^2 kappa |k|^2 a_k
              - 4 pi^2 sum_j w_j^2 |Pi_{j perp} k|^2 (a_k - a_{k-j}).

Sites ``k - j`` outside the lattice are treated as absorbing: the loss term
keeps every ``j`` but the gain from outside is dropped, and the dropped rate is
kept per site as ``outflow``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import io
import math
import struct
from typing import Sequence

import numba
import numpy as np
from scipy import fft as sfft
from scipy import sparse

from .coefficients import NoiseCoefficients
from .krylov import LanczosPropagator, StiffnessError, uniformize
from .lattice import Lattice, proj_norm_sq

FOUR_PI_SQ = 4.0 * math.pi ** 2

# sparse storage is used below this many (site, mode) pairs, FFT convolution above
CSR_PAIR_LIMIT = 20_000_000


class _FFTCoupling:
    """Matrix-free off-diagonal action (C a)_k = sum_j c_{k <- k-j} a_{k-j}.

    With K_mn[j] = 4 pi^2 w_j^2 j_m j_n / |j|^2 the coupling is
    sum_{m,n} (delta_mn |k|^2 - k_m k_n) (K_mn * a)_k, one convolution per
    unordered (m, n). A grid of length >= 2N + J + 1 per axis avoids wraparound.
    """

    def __init__(self, lattice: Lattice, coeffs: NoiseCoefficients, workers: int = 1):
        d, N = lattice.d, lattice.N
        J = int(np.abs(coeffs.modes).max()) if len(coeffs.modes) else 0
        L = sfft.next_fast_len(2 * N + J + 1, real=True)
        self.shape = (L,) * d
        self.workers = workers
        self.idx = tuple(np.mod(lattice.points, L).T)
        modes = coeffs.modes
        midx = tuple(np.mod(modes, L).T)
        weight = FOUR_PI_SQ * coeffs.w_sq / coeffs.mode_norm_sq
        k = lattice.points.astype(float)
        ksq = lattice.norm_sq.astype(float)
        self.kernels, self.site_coef = [], []
        for m in range(d):
            for n in range(m, d):
                K = np.zeros(self.shape)
                np.add.at(K, midx, weight * modes[:, m] * modes[:, n])
                self.kernels.append(sfft.rfftn(K, workers=workers))
                if m == n:
                    self.site_coef.append(ksq - k[:, m] ** 2)
                else:
                    self.site_coef.append(-2.0 * k[:, m] * k[:, n])

    def __call__(self, a: np.ndarray) -> np.ndarray:
        grid = np.zeros(self.shape)
        grid[self.idx] = a
        ah = sfft.rfftn(grid, workers=self.workers)
        out = np.zeros(len(a))
        for kh, coef in zip(self.kernels, self.site_coef):
            out += coef * sfft.irfftn(ah * kh, s=self.shape, workers=self.workers)[self.idx]
        return out


@dataclass
class Generator:
    lattice: Lattice
    coeffs: NoiseCoefficients
    kappa: float
    heat: np.ndarray = field(repr=False)
    noise_loss: np.ndarray = field(repr=False)
    outflow: np.ndarray = field(repr=False)
    backend: str = "csr"
    coupling: sparse.csr_matrix | None = field(default=None, repr=False)
    _fft: _FFTCoupling | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.lattice.size

    @property
    def diagonal(self) -> np.ndarray:
        return -self.heat - self.noise_loss

    @property
    def max_rate(self) -> float:
        return float(np.max(-self.diagonal)) if self.size else 0.0

    @property
    def interior(self) -> np.ndarray:
        return self.outflow == 0.0

    def offdiag(self, a: np.ndarray) -> np.ndarray:
        if self.coupling is not None:
            return self.coupling @ a
        if self._fft is not None:
            return self._fft(a)
        return np.zeros_like(a)

    def matvec(self, a: np.ndarray) -> np.ndarray:
        return self.diagonal * a + self.offdiag(a)

    __call__ = matvec

    def to_dense(self) -> np.ndarray:
        if self.coupling is not None:
            G = self.coupling.toarray()
        else:
            G = np.column_stack([self.offdiag(e) for e in np.eye(self.size)])
        G[np.diag_indices_from(G)] += self.diagonal
        return G


def _mode_neighbors(lattice: Lattice, coeffs: NoiseCoefficients):
    """Yields (mode index, coupling rates c_{k <- k-j} for all sites, neighbor ids)."""
    pts = lattice.points
    for i, j in enumerate(coeffs.modes):
        rate = FOUR_PI_SQ * coeffs.w_sq[i] * proj_norm_sq(j, pts)
        yield i, rate, lattice.ids(pts - j)


@numba.njit(cache=True)
def _site_mode_sweep(points, grid, N, modes, w_sq, fill, rows, cols, vals):
    """One pass over (site, mode) pairs.

    Accumulates the in-lattice and outflow loss rates per site; with
    ``fill`` set, also writes the positive in-lattice couplings as COO triples.
    Returns (inside rate, outflow, number of couplings).
    """
    n, d = points.shape
    side = 2 * N + 1
    inside = np.zeros(n)
    outflow = np.zeros(n)
    nnz = 0
    for s in range(n):
        for m in range(modes.shape[0]):
            kk = 0
            jj = 0
            kj = 0
            for c in range(d):
                kk += points[s, c] * points[s, c]
                jj += modes[m, c] * modes[m, c]
                kj += points[s, c] * modes[m, c]
            rate = FOUR_PI_SQ * w_sq[m] * ((kk * jj - kj * kj) / jj)
            flat = 0
            ok = True
            for c in range(d):
                q = points[s, c] - modes[m, c]
                if q < -N or q > N:
                    ok = False
                    break
                flat = flat * side + (q + N)
            nb = grid[flat] if ok else -1
            if nb < 0:
                outflow[s] += rate
            else:
                inside[s] += rate
                if rate > 0:
                    if fill:
                        rows[nnz] = s
                        cols[nnz] = nb
                        vals[nnz] = rate
                    nnz += 1
    return inside, outflow, nnz


def assemble(
    coeffs: NoiseCoefficients,
    lattice: Lattice,
    kappa: float,
    backend: str = "auto",
    workers: int = 1,
) -> Generator:
    if coeffs.d != lattice.d:
        raise ValueError(f"dimension mismatch: coefficients d={coeffs.d}, lattice d={lattice.d}")
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    if coeffs.spec.J > 2 * lattice.N:
        raise ValueError(f"noise truncation J={coeffs.spec.J} exceeds 2N={2 * lattice.N}")
    n = lattice.size
    if backend == "auto":
        backend = "csr" if n * len(coeffs.modes) <= CSR_PAIR_LIMIT else "fft"
    if backend not in ("csr", "fft"):
        raise ValueError(f"unknown backend {backend!r}")

    heat = 2.0 * FOUR_PI_SQ * kappa * lattice.norm_sq.astype(float)
    args = (
        lattice.points, lattice._grid.ravel(), lattice.N,
        np.ascontiguousarray(coeffs.modes, dtype=np.int64), coeffs.w_sq,
    )
    empty_i, empty_f = np.zeros(0, np.int64), np.zeros(0)
    inside_rate, outflow, nnz = _site_mode_sweep(*args, False, empty_i, empty_i, empty_f)
    gen = Generator(lattice, coeffs, float(kappa), heat, inside_rate + outflow, outflow, backend)
    if backend == "csr":
        r, c, v = np.zeros(nnz, np.int64), np.zeros(nnz, np.int64), np.zeros(nnz)
        _site_mode_sweep(*args, True, r, c, v)
        gen.coupling = sparse.csr_matrix((v, (r, c)), shape=(n, n))
    elif len(coeffs.modes):
        gen._fft = _FFTCoupling(lattice, coeffs, workers)
    return gen


def dense_generator_oracle(coeffs: NoiseCoefficients, lattice: Lattice, kappa: float) -> np.ndarray:
    """Loop-built dense generator straight from the site/mode double sum."""
    n = lattice.size
    G = np.zeros((n, n))
    lookup = {tuple(int(c) for c in k): i for i, k in enumerate(lattice.points)}
    modes = [tuple(int(c) for c in j) for j in coeffs.modes]
    for i, k in enumerate(lattice.points):
        kk = [int(c) for c in k]
        ksq = sum(c * c for c in kk)
        G[i, i] -= 8 * math.pi ** 2 * kappa * ksq
        for j, w in zip(modes, coeffs.values):
            jj = sum(c * c for c in j)
            kj = sum(a * b for a, b in zip(kk, j))
            c = 4 * math.pi ** 2 * w * w * (ksq - kj * kj / jj)
            G[i, i] -= c
            nb = lookup.get(tuple(a - b for a, b in zip(kk, j)))
            if nb is not None:
                G[i, nb] += c
    return G


# --------------------------------------------------------------------------
# time integration


@dataclass
class Trajectory:
    times: np.ndarray
    values: np.ndarray = field(repr=False)
    integrals: np.ndarray = field(repr=False)  # row i: int_{t_{i-1}}^{t_i} a ds
    path: str
    n_matvec: int
    lattice: Lattice | None = field(default=None, repr=False)
    outflow_rates: np.ndarray | None = field(default=None, repr=False)

    def mass(self) -> np.ndarray:
        return np.array([math.fsum(row) for row in self.values])

    def time_integral(self, weights: np.ndarray) -> np.ndarray:
        """Cumulative int_0^{t_i} sum_k weights_k a_k(s) ds at each output time."""
        steps = np.array([math.fsum(weights * row) for row in self.integrals])
        return np.cumsum(steps)

    def cumulative_outflow(self) -> np.ndarray:
        if self.outflow_rates is None:
            return np.zeros(len(self.times))
        return self.time_integral(self.outflow_rates)

    def lp(self, p: float) -> np.ndarray:
        return np.array([math.fsum(row ** p) for row in self.values])

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,site_id,a\n")
            for t, row in zip(self.times, self.values):
                for i, a in enumerate(row):
                    fh.write(f"{float(t)!r},{i},{float(a)!r}\n")

    def write_binary(self, path) -> None:
        write_krl1(path, self.times, self.values)


MAGIC = b"KRL1"


def write_krl1(path, times: np.ndarray, values: np.ndarray) -> None:
    """Magic ``KRL1``, uint64 n_times, uint64 n_sites, f64 times, f64 values (row-major), little-endian."""
    times = np.ascontiguousarray(times, dtype="<f8")
    values = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", len(times), values.shape[1] if values.ndim == 2 else 0))
        fh.write(times.tobytes())
        fh.write(values.tobytes())


def read_krl1(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a KRL1 trajectory file")
    nt, ns = struct.unpack("<QQ", raw[4:20])
    buf = io.BytesIO(raw[20:])
    times = np.frombuffer(buf.read(8 * nt), dtype="<f8")
    values = np.frombuffer(buf.read(8 * nt * ns), dtype="<f8").reshape(nt, ns)
    return times.astype(float), values.astype(float)


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times = np.unique(data[:, 0])
    ns = int(data[:, 1].max()) + 1
    values = np.zeros((len(times), ns))
    ti = np.searchsorted(times, data[:, 0])
    values[ti, data[:, 1].astype(int)] = data[:, 2]
    return times, values


# explicit steps shorter than this hand over to the Krylov path
MIN_EXPLICIT_STEP = 1e-6
# uniformization work cap (matvecs) before the Krylov path is preferred
EXPLICIT_MATVEC_BUDGET = 2_000
# Poisson mean per uniformization substep
_UNIF_CHUNK = 400.0


def choose_path(gen: Generator, t_end: float, method: str = "auto") -> str:
    lam = gen.max_rate
    if method == "explicit":
        if lam > 0 and 1.0 / lam < MIN_EXPLICIT_STEP:
            raise StiffnessError(
                f"explicit step 1/max_rate = {1.0 / lam:.3g} is below {MIN_EXPLICIT_STEP:g}", 0.0
            )
        return "explicit"
    if method == "krylov":
        return "krylov"
    if method != "auto":
        raise ValueError(f"unknown method {method!r}")
    if lam == 0:
        return "explicit"
    if 1.0 / lam < MIN_EXPLICIT_STEP or lam * t_end > EXPLICIT_MATVEC_BUDGET:
        return "krylov"
    return "explicit"


def integrate(
    gen: Generator,
    a0: np.ndarray,
    t_grid: Sequence[float],
    tol: float = 1e-11,
    method: str = "auto",
    krylov_dim: int = 60,
) -> Trajectory:
    """Solve a' = G a at the times in ``t_grid`` (increasing, starting at 0).

    The explicit path is uniformization, positive term by term. The Krylov
    path (Lanczos) is used when the explicit step or its total work is
    out of budget; ``Trajectory.path`` records which one ran.
    """
    a0 = np.asarray(a0, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if a0.shape != (gen.size,):
        raise ValueError(f"initial field has shape {a0.shape}, expected ({gen.size},)")
    if np.any(a0 < 0):
        raise ValueError("initial field must be nonnegative")
    if len(t_grid) == 0 or t_grid[0] != 0.0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must start at 0 and increase strictly")
    path = choose_path(gen, float(t_grid[-1]), method)
    values = np.zeros((len(t_grid), gen.size))
    integrals = np.zeros_like(values)
    values[0] = a0
    a = a0.copy()
    n_matvec = 0
    lam = gen.max_rate
    if path == "explicit":
        for i in range(1, len(t_grid)):
            dt = t_grid[i] - t_grid[i - 1]
            n_sub = max(1, math.ceil(lam * dt / _UNIF_CHUNK))
            h = dt / n_sub
            acc = np.zeros_like(a)
            for _ in range(n_sub):
                a, part, used = uniformize(gen.matvec, lam, a, h, tail_tol=min(tol, 1e-16))
                acc += part
                n_matvec += used
            values[i] = a
            integrals[i] = acc
    else:
        prop = LanczosPropagator(gen.matvec, m=krylov_dim, tol=tol)
        for i in range(1, len(t_grid)):
            a, part = prop.advance(a, t_grid[i - 1], t_grid[i])
            values[i] = a
            integrals[i] = part
        n_matvec = prop.n_matvec
    return Trajectory(t_grid, values, integrals, path, n_matvec, gen.lattice, gen.outflow.copy())


def dense_propagator_oracle(G: np.ndarray, a0: np.ndarray, times: Sequence[float]) -> np.ndarray:
    """exp(tG) a0 by symmetric eigendecomposition of a dense generator."""
    lam, U = np.linalg.eigh(0.5 * (G + G.T))
    c = U.T @ a0
    return np.array([U @ (np.exp(lam * t) * c) for t in times])


# --------------------------------------------------------------------------
# l^p balance


@dataclass
class LpBalance:
    p: float
    lhs_rate: float
    rhs_rate: float
    heat_term: float
    dissipation_bilinear: float
    outflow_term: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.lhs_rate), abs(self.rhs_rate), 1e-300)
        return abs(self.lhs_rate - self.rhs_rate) / scale


def lp_balance(gen: Generator, a: np.ndarray, p: float) -> LpBalance:
    """Both sides of d/dt sum a_k^p along the flow.

    ``lhs_rate`` is p sum a^{p-1} (G a). The explicit side is the heat term plus
    -2 pi^2 p B, with B the symmetric difference double sum over the
    zero-extended field (pairs with one end outside the lattice included),
    plus, at p = 1 only, the outflow term (there 0^0 = 1 makes B blind to it).
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise ValueError("field must be nonnegative")
    ap1 = np.power(a, p - 1.0) if p != 1 else np.ones_like(a)
    lhs = p * math.fsum(ap1 * gen.matvec(a))
    ksq = gen.lattice.norm_sq.astype(float)
    heat = -2.0 * FOUR_PI_SQ * gen.kappa * p * math.fsum(ksq * a ** p)
    parts = []
    outside = 0.0
    for i, rate, nb in _mode_neighbors(gen.lattice, gen.coeffs):
        ok = nb >= 0
        r = rate / FOUR_PI_SQ
        # ordered pairs (k, k-j) with both ends inside
        b_in = r[ok] * (a[ok] - a[nb[ok]]) * (ap1[ok] - ap1[nb[ok]])
        parts.append(math.fsum(b_in))
        if p > 1:
            # k inside with k-j outside, plus its mirror pair (k outside, k-j inside)
            outside += 2.0 * math.fsum(r[~ok] * a[~ok] ** p)
    B = math.fsum(parts) + outside
    outflow_term = -math.fsum(gen.outflow * a) if p == 1 else 0.0
    rhs = heat - 2.0 * math.pi ** 2 * p * B + outflow_term
    return LpBalance(p, lhs, rhs, heat, B, outflow_term)
