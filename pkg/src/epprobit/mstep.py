"""M-step solvers.

Given E-step moments ``(mu_i, S_i)`` the EM surrogate is maximized in two
pieces: a generalized least squares update of ``beta`` and a covariance
update that maximizes ``-log det Sigma - Tr(Sigma^{-1} Shat)`` subject to
``Tr(Sigma^{-1}) = c``.

The covariance problem has a closed form up to one scalar.  Stationarity
gives ``Sigma = Shat - y I`` for a multiplier ``y``, and the constraint
becomes the secular equation

    f(y) = sum_i 1 / (lambda_i - y) - c = 0,   y < lambda_1,

over the eigenvalues of ``Shat``.  ``f`` is increasing and convex on
``(-inf, lambda_1)`` so a short bisection followed by Newton started to the
right of the root converges monotonically.  The iteration runs on the gap
``t = lambda_1 - y`` and ``Sigma`` is rebuilt from the eigenvectors as
``Q diag(lambda - lambda_1 + t) Q'``, which equals ``Shat - y I`` without
the cancellation in ``lambda_1 - y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import BracketFailure, NearSingularShat, SingularDesign

__all__ = [
    "ShatSummary",
    "TraceSolveResult",
    "update_beta",
    "normal_equations",
    "solve_normal_equations",
    "assemble_shat",
    "ShatAccumulator",
    "summarize_shat",
    "solve_trace_constrained",
    "secular",
]

_DESIGN_COND_LIMIT = 1e12
_SHAT_RATIO_LIMIT = 1e-10
_BISECT_STEPS = 8
_MAX_NEWTON = 100
_MAX_EXPAND = 200


@dataclass(frozen=True)
class ShatSummary:
    """Conditional sample covariance and its ascending eigendecomposition."""

    s_hat: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.s_hat.shape[0]


@dataclass(frozen=True)
class TraceSolveResult:
    y_star: float
    sigma_new: np.ndarray
    newton_iters: int
    bisect_iters: int
    gap: float = float("nan")
    """``lambda_1 - y_star``, the smallest eigenvalue of ``sigma_new``, kept at full precision."""


# ---------------------------------------------------------------------------
# beta
# ---------------------------------------------------------------------------


def _as_weights(sigma_inv, n):
    w = np.asarray(sigma_inv, dtype=float)
    if w.ndim == 2:
        return np.broadcast_to(w, (n,) + w.shape)
    return w


def normal_equations(xs, sigma_inv, mus):
    """Accumulate ``sum X'WX`` and ``sum X'W mu`` for stacked observations.

    Parameters
    ----------
    xs : array, shape (n, d, p)
    sigma_inv : array, shape (d, d) or (n, d, d)
        Precision used as GLS weight, shared or per observation.
    mus : array, shape (n, d)
    """
    xs = np.asarray(xs, dtype=float)
    mus = np.asarray(mus, dtype=float)
    w = _as_weights(sigma_inv, xs.shape[0])
    wx = w @ xs
    lhs = np.einsum("nkp,nkq->pq", xs, wx)
    rhs = np.einsum("nkp,nk->p", wx, mus)
    return lhs, rhs


def solve_normal_equations(lhs, rhs) -> np.ndarray:
    """Solve the symmetric normal equations by Cholesky.

    Raises
    ------
    SingularDesign
        If the matrix is rank deficient or its condition number exceeds 1e12.
    """
    lhs = 0.5 * (lhs + lhs.T)
    ev = np.linalg.eigvalsh(lhs)
    if not ev[0] > 0.0 or ev[-1] / ev[0] > _DESIGN_COND_LIMIT:
        raise SingularDesign(f"normal matrix is singular or ill-conditioned (eigenvalues {ev[0]:.3g}..{ev[-1]:.3g})")
    return cho_solve(cho_factor(lhs, lower=True), rhs)


def update_beta(xs, sigma_inv, mus) -> np.ndarray:
    """GLS coefficient update ``(sum X'WX)^{-1} sum X'W mu``.

    Parameters
    ----------
    xs : sequence of arrays (d_i, p) or array (n, d, p)
    sigma_inv : array (d, d) or sequence of per-observation precisions
    mus : sequence of d_i-vectors
        E-step latent means.

    Returns
    -------
    beta : ndarray, shape (p,)

    Notes
    -----
    Ragged inputs (observations seeing different choice sets) are accepted
    as lists, in which case ``sigma_inv`` must be a matching list.
    """
    if isinstance(xs, np.ndarray) and xs.ndim == 3:
        return solve_normal_equations(*normal_equations(xs, sigma_inv, mus))
    xs = [np.atleast_2d(np.asarray(x, dtype=float)) for x in xs]
    if not xs:
        raise SingularDesign("no observations")
    p = xs[0].shape[1]
    ws = sigma_inv if isinstance(sigma_inv, (list, tuple)) else [sigma_inv] * len(xs)
    lhs = np.zeros((p, p))
    rhs = np.zeros(p)
    for x, w, mu in zip(xs, ws, mus):
        wx = np.asarray(w, dtype=float) @ x
        lhs += x.T @ wx
        rhs += wx.T @ np.asarray(mu, dtype=float)
    return solve_normal_equations(lhs, rhs)


# ---------------------------------------------------------------------------
# Shat
# ---------------------------------------------------------------------------


def summarize_shat(s_hat) -> ShatSummary:
    """Attach the ascending eigendecomposition, rejecting near-singular input."""
    s_hat = np.asarray(s_hat, dtype=float)
    s_hat = 0.5 * (s_hat + s_hat.T)
    lam, q = np.linalg.eigh(s_hat)
    if not lam[0] > _SHAT_RATIO_LIMIT * lam[-1]:
        raise NearSingularShat(float(lam[0]), float(lam[-1]))
    return ShatSummary(s_hat, lam, q)


class ShatAccumulator:
    """Running sums for ``Shat`` over observations that may cover different positions.

    Every entry is averaged over the observations that cover it, so with
    full choice sets this is the plain mean.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.total = np.zeros((self.dim, self.dim))
        self.count = np.zeros((self.dim, self.dim))

    def add(self, positions, cov_sum, residuals):
        """Add ``cov_sum = sum S_i`` and the residual rows ``(n_g, d_g)`` of one group."""
        res = np.atleast_2d(np.asarray(residuals, dtype=float))
        if res.shape[0] == 0:
            return
        idx = np.ix_(positions, positions)
        self.total[idx] += np.asarray(cov_sum, dtype=float) + res.T @ res
        self.count[idx] += res.shape[0]

    def finish(self) -> ShatSummary:
        if np.any(self.count == 0):
            raise NearSingularShat(0.0, float(np.abs(self.total).max(initial=0.0)))
        return summarize_shat(self.total / self.count)


def assemble_shat(covs, residuals, positions: Optional[Sequence[Sequence[int]]] = None,
                  dim: Optional[int] = None) -> ShatSummary:
    """``Shat = mean_i (S_i + r_i r_i')`` with ``r_i = mu_i - X_i beta``.

    Parameters
    ----------
    covs : array (n, d, d) or sequence of (d_i, d_i)
        E-step conditional covariances ``S_i``.
    residuals : array (n, d) or sequence of d_i-vectors
        ``mu_i - X_i beta`` evaluated at the updated ``beta``.
    positions : sequence of index sequences, optional
        Model positions covered by each observation.  Contributions are
        scattered into a ``dim`` x ``dim`` matrix and every entry is divided
        by the number of observations that cover it.
    dim : int, optional
        Model dimension, required with ``positions``.
    """
    if positions is None:
        covs = np.asarray(covs, dtype=float)
        res = np.asarray(residuals, dtype=float)
        if covs.shape[0] == 0:
            raise NearSingularShat(0.0, 0.0)
        acc = ShatAccumulator(covs.shape[1])
        acc.add(list(range(covs.shape[1])), covs.sum(axis=0), res)
        return acc.finish()
    if dim is None:
        raise ValueError("dim is required when positions are given")
    acc = ShatAccumulator(dim)
    for s, r, pos in zip(covs, residuals, positions):
        acc.add(list(pos), s, np.asarray(r, dtype=float)[None, :])
    return acc.finish()


# ---------------------------------------------------------------------------
# trace-constrained covariance
# ---------------------------------------------------------------------------


def secular(y: float, lam: np.ndarray, target: float) -> tuple[float, float]:
    """``f(y) = sum 1/(lam - y) - target`` and its derivative."""
    inv = 1.0 / (lam - y)
    return math.fsum(inv) - target, math.fsum(inv * inv)


def solve_trace_constrained(summary: ShatSummary, target: Optional[float] = None) -> TraceSolveResult:
    """Maximize ``-log det Sigma - Tr(Sigma^{-1} Shat)`` with ``Tr(Sigma^{-1}) = target``.

    Parameters
    ----------
    summary : ShatSummary
    target : float, optional
        Trace of the precision, the dimension by default.

    Returns
    -------
    TraceSolveResult
        ``sigma_new = Shat - y_star I``.
    """
    lam = np.asarray(summary.eigenvalues, dtype=float)
    m = lam.size
    c = float(m if target is None else target)
    if not c > 0:
        raise ValueError("trace target must be positive")
    lam1 = float(lam[0])
    if not lam1 > 0:
        raise BracketFailure(f"smallest eigenvalue {lam1} is not positive")

    # Work with the gap t = lam1 - y so that the small eigenvalues of the
    # result, gap + t, never suffer cancellation against a large lam1.
    gap = lam - lam1
    gap[0] = 0.0
    eps = np.finfo(float).eps

    def g(t):
        inv = 1.0 / (gap + t)
        return math.fsum(inv) - c, math.fsum(inv * inv)

    def small(g_val, dg_val, t_val):
        return abs(g_val) <= max(1e-12 * c, 4.0 * eps * dg_val * max(t_val, eps * lam1))

    # the first term alone reaches c at t = 1/c and each term is at most 1/t
    t_lo = 1.0 / c
    t_hi = m / c
    g_lo, dg_lo = g(t_lo)
    g_hi, _ = g(t_hi)
    expand = 0
    while g_hi > 0.0:
        if expand >= _MAX_EXPAND:
            raise BracketFailure("secular equation has no sign change below the smallest eigenvalue")
        t_hi *= 2.0
        g_hi, _ = g(t_hi)
        expand += 1
    if g_lo < 0.0 and not small(g_lo, dg_lo, t_lo):
        raise BracketFailure("secular equation is negative at the right bracket end")

    bisect = 0
    for _ in range(_BISECT_STEPS):
        if g_lo <= 0.0 or small(g_lo, dg_lo, t_lo):
            break
        mid = 0.5 * (t_lo + t_hi)
        g_mid, dg_mid = g(mid)
        bisect += 1
        if g_mid > 0.0:
            t_lo, g_lo, dg_lo = mid, g_mid, dg_mid
        else:
            t_hi = mid

    # Newton from the right in y (small t) increases t monotonically
    t, f, df = t_lo, g_lo, dg_lo
    newton = 0
    while not small(f, df, t) and newton < _MAX_NEWTON:
        t_new = t + f / df
        if not t < t_new < t_hi:
            # roundoff pushed the step outside the bracket; bisect instead
            t_new = 0.5 * (t + t_hi)
            bisect += 1
        f_new, df_new = g(t_new)
        newton += 1
        if f_new < 0.0:
            t_hi = t_new
            if small(f_new, df_new, t_new):
                t, f, df = t_new, f_new, df_new
                break
            continue
        t, f, df = t_new, f_new, df_new

    q = summary.eigenvectors
    sigma = (q * (gap + t)) @ q.T
    return TraceSolveResult(lam1 - t, 0.5 * (sigma + sigma.T), newton, bisect, t)
