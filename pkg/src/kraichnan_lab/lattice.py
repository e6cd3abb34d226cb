"""Truncated Fourier lattice bookkeeping.

Sites are the integer points ``k`` with ``0 < |k| <= N``, ordered
lexicographically. A dense lookup grid of shape ``(2N+1,)*d`` maps a
lattice vector to its id (``-1`` for the origin).
"""
from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import math

import numpy as np


@dataclass(frozen=True)
class Lattice:
    d: int
    N: int
    points: np.ndarray = field(repr=False)
    norm_sq: np.ndarray = field(repr=False)
    _grid: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt(self.norm_sq.astype(float))

    def ids(self, k) -> np.ndarray:
        """Site ids of the vectors ``k`` (shape ``(..., d)``); -1 if absent."""
        k = np.asarray(k, dtype=np.int64)
        inside = np.all(np.abs(k) <= self.N, axis=-1)
        out = np.full(k.shape[:-1], -1, dtype=np.int64)
        if np.any(inside):
            kk = k[inside] + self.N
            out[inside] = self._grid[tuple(kk.T)]
        return out

    def id_of(self, k) -> int:
        return int(self.ids(np.asarray(k)[None, :])[0])

    @property
    def negation(self) -> np.ndarray:
        """Permutation mapping the id of ``k`` to the id of ``-k``."""
        return self.ids(-self.points)

    def half_mask(self) -> np.ndarray:
        """True for one representative of each ``{k, -k}`` pair (first nonzero coordinate > 0)."""
        pts = self.points
        first = np.argmax(pts != 0, axis=1)
        return pts[np.arange(len(pts)), first] > 0


def enumerate_lattice(d: int, N: int) -> Lattice:
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    if N < 1:
        raise ValueError(f"lattice radius must be >= 1, got {N}")
    side = 2 * N + 1
    if side ** d > np.iinfo(np.intp).max // 8:
        raise OverflowError(f"lattice with d={d}, N={N} overflows the index type")
    axes = np.arange(-N, N + 1, dtype=np.int64)
    mesh = np.stack(np.meshgrid(*([axes] * d), indexing="ij"), axis=-1).reshape(-1, d)
    nsq = np.einsum("ij,ij->i", mesh, mesh)
    keep = (nsq > 0) & (nsq <= N * N)
    # meshgrid with "ij" indexing already enumerates in lexicographic order
    points = mesh[keep]
    grid = np.full((side,) * d, -1, dtype=np.int64)
    grid[tuple((points + N).T)] = np.arange(len(points))
    return Lattice(d=d, N=N, points=points, norm_sq=nsq[keep], _grid=grid)


def proj_norm_sq(j, k):
    """Squared norm of the projection of ``k`` onto the orthogonal complement of ``j``.

    Integer vectors are handled exactly up to the final division, so parallel
    pairs give an exact zero. Broadcasts over leading axes.
    """
    j = np.asarray(j)
    k = np.asarray(k)
    jj = np.sum(j * j, axis=-1)
    if np.any(jj == 0):
        raise ValueError("projection direction j must be nonzero")
    kk = np.sum(k * k, axis=-1)
    kj = np.sum(k * j, axis=-1)
    num = kk * jj - kj * kj
    out = num / jj
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Annulus:
    a: float
    b: float
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _is_integral(x) -> bool:
    return float(x).is_integer()


def annulus(lattice: Lattice, a: float, b: float) -> Annulus:
    """Sites with ``a <= |k| <= b`` (closed on both ends)."""
    if not (0 < a <= b):
        raise ValueError(f"need 0 < a <= b, got a={a}, b={b}")
    nsq = lattice.norm_sq
    if _is_integral(a) and _is_integral(b):
        mask = (nsq >= int(a) ** 2) & (nsq <= int(b) ** 2)
    else:
        r = np.sqrt(nsq.astype(float))
        mask = (r >= a) & (r <= b)
    return Annulus(a=float(a), b=float(b), ids=np.flatnonzero(mask))


def count_ball_points(d: int, N: int) -> int:
    """Number of nonzero integer points with |k| <= N, by direct enumeration."""
    return sum(
        1
        for k in itertools.product(range(-N, N + 1), repeat=d)
        if 0 < sum(c * c for c in k) <= N * N
    )


def unit_sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)
