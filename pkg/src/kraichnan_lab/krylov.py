"""Exponential actions of symmetric operators.

Two propagators for ``a' = G a`` with ``G`` symmetric and negative
semidefinite, each also returning the time integral of the solution over
every step (used for outflow and dissipation ledgers):

* ``uniformize`` - Poisson-weighted powers of ``P = I + G / Lam``. When the
  off-diagonal part of ``G`` is nonnegative every term is nonnegative, so
  positivity holds term by term.
* ``LanczosPropagator`` - Lanczos with full reorthogonalization and
  a posteriori step control on the leading error term.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy import linalg, stats

Matvec = Callable[[np.ndarray], np.ndarray]


class StiffnessError(RuntimeError):
    """The integrator cannot make progress within its step/work budget."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (at t = {time:.6g})")
        self.time = time


def poisson_weights(mu: float, tail_tol: float = 1e-16):
    """Poisson(mu) pmf and survival P(X > n) for n = 0..n_max, tail below tail_tol."""
    if mu == 0:
        return np.array([1.0]), np.array([0.0])
    n_max = int(stats.poisson.isf(tail_tol, mu)) + 2
    n = np.arange(n_max + 1)
    pmf = stats.poisson.pmf(n, mu)
    sf = stats.poisson.sf(n, mu)
    return pmf, sf


def uniformize(matvec: Matvec, diag_bound: float, v: np.ndarray, h: float, tail_tol: float = 1e-16):
    """(e^{hG} v, int_0^h e^{sG} v ds) via uniformization with rate ``diag_bound``.

    Returns the two vectors and the number of matvecs used.
    """
    lam = float(diag_bound)
    if lam == 0.0:
        return v.copy(), h * v, 0
    pmf, sf = poisson_weights(lam * h, tail_tol)
    out = pmf[0] * v
    integ = sf[0] * v
    x = v
    for n in range(1, len(pmf)):
        x = x + matvec(x) / lam
        out += pmf[n] * x
        integ += sf[n] * x
    return out, integ / lam, len(pmf) - 1


def _phi_pair(T_diag, T_off, tau):
    """e^{tau T} e1 and int_0^tau e^{sT} e1 ds for a symmetric tridiagonal T."""
    if len(T_diag) == 1:
        lam = np.array([T_diag[0]])
        S = np.ones((1, 1))
    else:
        lam, S = linalg.eigh_tridiagonal(T_diag, T_off)
    z = tau * lam
    e = np.exp(z)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.where(np.abs(z) > 1e-8, np.expm1(z) / z, 1.0 + z / 2)
    c = S[0, :]
    return S @ (e * c), S @ (tau * phi * c)


class LanczosPropagator:
    def __init__(self, matvec: Matvec, m: int = 60, tol: float = 1e-11, min_step: float = 1e-14):
        self.matvec = matvec
        self.m = m
        self.tol = tol
        self.min_step = min_step
        self.n_matvec = 0

    def _basis(self, v):
        n = len(v)
        m = min(self.m, n)
        beta0 = np.linalg.norm(v)
        V = np.zeros((m + 1, n))
        V[0] = v / beta0
        alpha = np.zeros(m)
        beta = np.zeros(m)
        for j in range(m):
            w = self.matvec(V[j])
            self.n_matvec += 1
            alpha[j] = V[j] @ w
            w = w - alpha[j] * V[j]
            if j > 0:
                w -= beta[j - 1] * V[j - 1]
            for _ in range(2):
                w -= V[: j + 1].T @ (V[: j + 1] @ w)
            beta[j] = np.linalg.norm(w)
            scale = max(abs(alpha[: j + 1]).max(), 1.0)
            if beta[j] <= 1e-13 * scale:
                # invariant subspace reached: the projection is exact
                return beta0, V[: j + 1], alpha[: j + 1], beta[:j], 0.0
            V[j + 1] = w / beta[j]
        return beta0, V[:m], alpha, beta[: m - 1], beta[m - 1]

    def advance(self, v: np.ndarray, t0: float, t1: float):
        """Propagate v from t0 to t1; returns (v(t1), int_{t0}^{t1} v ds)."""
        total = t1 - t0
        t = t0
        integ = np.zeros_like(v)
        tau = total
        while t1 - t > 1e-15 * max(1.0, abs(t1)):
            # factor out the scale so tiny (decayed) vectors keep full precision
            scale = float(np.abs(v).max())
            if scale == 0.0:
                break
            u = v / scale
            nv = np.linalg.norm(u)
            beta0, V, al, be, resid = self._basis(u)
            remaining = t1 - t
            tau = min(remaining, 2.0 * tau) if tau < remaining else remaining
            while True:
                ex, ix = _phi_pair(al, be, tau)
                # leading term of the truncation error for this basis
                err = beta0 * resid * abs(ix[-1])
                if err <= self.tol * nv * max(tau / total, 1e-3) or resid == 0.0:
                    break
                tau *= 0.5
                if tau < self.min_step:
                    raise StiffnessError("Krylov step size underflow", t)
            integ += (scale * beta0) * (V.T @ ix)
            v = (scale * beta0) * (V.T @ ex)
            t += tau
        return v, integ
