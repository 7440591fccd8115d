"""Expectation propagation for linearly constrained Gaussians.

The target is ``N(x; mean, cov) * prod_k 1{l_k < a_k'x < u_k}``.  Each
indicator is replaced by an unnormalized Gaussian site in the projection
``a_k'x`` with natural parameters ``(tau_k, nu_k)``; sites are refined one at
a time in ascending order by matching the moments of the tilted
distribution.

Within a sweep the global approximation is tracked with rank-one updates.
At the end of every sweep it is rebuilt from the sites as

    Sigma = L (I + G' T G)^{-1} L',    G = A L,  cov = L L',

which involves no subtraction and so cannot drift or lose definiteness when
sites become very tight.

For the log mass each site is re-centred at the projected mean ``ybar`` of
cavity times site.  Its constant then reduces to

    log Zhat + log(tau_p / tau_c) / 2 + tau_c (ybar - mu_c)^2 / 2,

a sum of non-negative terms, and the remaining Gaussian integral is
evaluated at the posterior mean.  The plain natural-parameter form instead
subtracts terms of size ``tau * ybar^2``, which loses every digit once a
narrow interval drives ``tau`` towards 1e13.

:func:`ep_moments` handles one region.  :func:`ep_box_batch` runs the box
case for a stack of independent problems at once and is what the E-step
uses; a problem that converges is frozen so the stacked run reproduces the
one-at-a-time result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .constraints import ConstraintSystem, axis_align, untransform_moments
from .errors import DegenerateMass, DimensionMismatch, InfeasibleRegion, NotConverged, NotPositiveDefinite
from .model import TmvnMoments
from .truncnorm import LOG_MASS_FLOOR, truncated_moments, truncated_moments_array

_BLOCK = 32

__all__ = ["EpConfig", "EpSite", "TmvnMoments", "BatchResult", "ep_moments", "ep_log_mass", "ep_box_batch"]


@dataclass(frozen=True)
class EpConfig:
    """Stopping rule and safeguards for one EP solve.

    ``tol`` bounds the largest change of any site parameter over a sweep,
    measured relative to ``1 + tau`` for that site.
    Sites whose cavity precision falls below ``min_cavity_prec`` are left
    untouched for that sweep.
    """

    tol: float = 1e-6
    max_sweeps: int = 60
    damping: float = 1.0
    min_cavity_prec: float = 1e-12

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class EpSite:
    site_mean_times_prec: float
    site_prec: float
    log_norm: float


def _cholesky(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("prior covariance is not positive definite") from exc


def _site_update(v, m, tau_k, nu_k, lo, hi, cfg):
    """New ``(tau, nu, centred log constant, ybar)`` for one site, or ``None`` to skip it."""
    tau_c = 1.0 / v - tau_k
    if tau_c < cfg.min_cavity_prec:
        return None
    nu_c = m / v - nu_k
    v_c = 1.0 / tau_c
    r = truncated_moments(nu_c * v_c, v_c, lo, hi)
    tau_new = max(1.0 / r.variance - tau_c, 0.0)
    nu_new = r.mean / r.variance - nu_c
    if cfg.damping < 1.0:
        tau_new = cfg.damping * tau_new + (1.0 - cfg.damping) * tau_k
        nu_new = cfg.damping * nu_new + (1.0 - cfg.damping) * nu_k
    tp = tau_c + tau_new
    hp = nu_c + nu_new
    ybar = hp / tp
    log_c = r.log_mass + 0.5 * math.log(tp / tau_c) + 0.5 * tau_c * (ybar - nu_c * v_c) ** 2
    return tau_new, nu_new, log_c, ybar


def _residual(tau, tau_old, nu, nu_old, axis=-1):
    scale = 1.0 + np.abs(tau)
    return np.maximum(np.abs(tau - tau_old) / scale, np.abs(nu - nu_old) / scale).max(axis=axis, initial=0.0)


def _recompute(l_k, g_mat, w0, tau, nu):
    d = l_k.shape[0]
    m = np.eye(d) + (g_mat.T * tau) @ g_mat
    try:
        l_m = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:  # only reachable with non-finite sites
        raise NotPositiveDefinite("EP site precisions became invalid") from exc
    y = solve_triangular(l_m, l_k.T, lower=True)
    sigma = y.T @ y
    z = solve_triangular(l_m, w0 + g_mat.T @ nu, lower=True)
    mu = y.T @ z
    return 0.5 * (sigma + sigma.T), mu, np.log(np.diag(l_m)).sum()


def _centred_log_mass(log_c, half_logdet, w, r, tau, nu, ybar):
    """EP log mass from centred site constants.

    ``w`` is the whitened shift of the posterior mean from the prior mean and
    ``r`` the gap between the projected posterior mean and each site centre.
    """
    g = nu - tau * ybar
    return log_c.sum(axis=-1) - 0.5 * (w * w).sum(axis=-1) - half_logdet + (r * (g - 0.5 * tau * r)).sum(axis=-1)


def _run(prior_mean, prior_cov, a_matrix, lower, upper, cfg, axis):
    n_sites = lower.size
    l_k = _cholesky(prior_cov)
    w0 = solve_triangular(l_k, prior_mean, lower=True)
    g_mat = l_k if axis else a_matrix @ l_k
    tau = np.zeros(n_sites)
    nu = np.zeros(n_sites)
    log_c = np.zeros(n_sites)
    ybar = np.zeros(n_sites)
    sites = [k for k in range(n_sites) if np.isfinite(lower[k]) or np.isfinite(upper[k])]
    sigma = prior_cov.copy()
    mu = prior_mean.copy()
    half_logdet = 0.0
    residual = math.inf
    sweeps = 0
    converged = False
    for sweep in range(1, cfg.max_sweeps + 1):
        tau_old = tau.copy()
        nu_old = nu.copy()
        degenerate = 0
        for k in sites:
            if axis:
                s = sigma[:, k].copy()
                v = s[k]
                m = mu[k]
            else:
                a = a_matrix[k]
                s = sigma @ a
                v = a @ s
                m = a @ mu
            try:
                upd = _site_update(v, m, tau[k], nu[k], lower[k], upper[k], cfg)
            except DegenerateMass:
                degenerate += 1
                continue
            if upd is None:
                continue
            tau_new, nu_new, log_c[k], ybar[k] = upd
            dtau = tau_new - tau[k]
            dnu = nu_new - nu[k]
            denom = 1.0 + dtau * v
            sigma -= (dtau / denom) * np.outer(s, s)
            mu += s * ((dnu - dtau * m) / denom)
            tau[k] = tau_new
            nu[k] = nu_new
        if sites and degenerate == len(sites):
            raise InfeasibleRegion("every truncation factor has vanishing tilted mass")
        sigma, mu, half_logdet = _recompute(l_k, g_mat, w0, tau, nu)
        residual = float(_residual(tau, tau_old, nu, nu_old))
        sweeps = sweep
        if residual <= cfg.tol:
            converged = True
            break
    w = solve_triangular(l_k, mu - prior_mean, lower=True)
    r = (mu if axis else a_matrix @ mu) - ybar
    log_mass = _centred_log_mass(log_c, half_logdet, w, r, tau, nu, ybar)
    return TmvnMoments(float(log_mass), mu, sigma, converged, sweeps, residual)


def ep_moments(prior_mean, prior_cov, cs: ConstraintSystem, cfg: EpConfig | None = None,
               path: str = "auto", strict: bool = False) -> TmvnMoments:
    """Approximate mass, mean and covariance of ``N(prior_mean, prior_cov)`` on ``cs``.

    Parameters
    ----------
    prior_mean : array, shape (d,)
    prior_cov : array, shape (d, d)
        Symmetric positive definite.
    cs : ConstraintSystem
    cfg : EpConfig, optional
    path : {"auto", "box", "general"}
        ``auto`` solves identity-constrained regions directly, maps other
        involutory regions to a box first, and falls back to rank-one EP on
        the raw constraint rows otherwise.  ``general`` forces the latter.
    strict : bool
        Raise :class:`NotConverged` (carrying the last iterate) instead of
        returning a result flagged ``converged=False``.

    Returns
    -------
    TmvnMoments
    """
    cfg = cfg or EpConfig()
    mean = np.asarray(prior_mean, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    d = cs.dim
    if mean.shape != (d,) or cov.shape != (d, d):
        raise DimensionMismatch(f"constraint dimension {d} vs mean {mean.shape}, cov {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12 * np.abs(cov).max(initial=1.0)):
        raise NotPositiveDefinite("prior covariance is not symmetric")
    a = cs.a_matrix
    identity = a.shape == (d, d) and np.array_equal(a, np.eye(d))

    if path == "general" or (path == "auto" and not identity and not cs.involutory):
        res = _run(mean, cov, a, cs.lower, cs.upper, cfg, axis=False)
    elif identity:
        res = _run(mean, cov, a, cs.lower, cs.upper, cfg, axis=True)
    elif path in ("auto", "box"):
        rect_lo, rect_hi, rect_cov = axis_align(cs, mean, cov)
        u = _run(np.zeros(d), rect_cov, np.eye(d), rect_lo, rect_hi, cfg, axis=True)
        res = untransform_moments(cs, mean, u)
    else:
        raise ValueError(f"unknown EP path {path!r}")
    if strict and not res.converged:
        raise NotConverged(res.sweeps, res.residual, res)
    return res


def ep_log_mass(prior_mean, prior_cov, cs: ConstraintSystem, cfg: EpConfig | None = None) -> float:
    """Log of the approximate Gaussian mass of ``cs``; ``0`` for an unbounded region."""
    return ep_moments(prior_mean, prior_cov, cs, cfg).log_mass


# ---------------------------------------------------------------------------
# stacked box problems
# ---------------------------------------------------------------------------


@dataclass
class BatchResult:
    log_mass: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    converged: np.ndarray
    infeasible: np.ndarray
    sweeps: np.ndarray
    residual: np.ndarray


def _tr(x):
    return np.swapaxes(x, -1, -2)


def _recompute_batch(l_k, w0, tau, nu):
    d = tau.shape[1]
    lt = _tr(l_k)
    m = np.eye(d) + (lt * tau[:, None, :]) @ l_k
    try:
        l_m = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("EP site precisions became invalid") from exc
    y = np.linalg.solve(l_m, lt)
    sigma = _tr(y) @ y
    g = w0 + (lt @ nu[..., None])[..., 0]
    z = np.linalg.solve(l_m, g[..., None])[..., 0]
    mu = (_tr(y) @ z[..., None])[..., 0]
    half_logdet = np.log(np.diagonal(l_m, axis1=1, axis2=2)).sum(axis=1)
    return 0.5 * (sigma + _tr(sigma)), mu, half_logdet


def ep_box_batch(cov, lower, upper, cfg: EpConfig | None = None, mean=None) -> BatchResult:
    """EP for a stack of box-constrained problems.

    Parameters
    ----------
    cov : array, shape (n, d, d)
    lower, upper : array, shape (n, d)
    mean : array, shape (n, d), optional
        Prior means, zero by default.

    Returns
    -------
    BatchResult
        Per-problem moments and flags.  Problems whose every site underflows
        are flagged ``infeasible`` and keep their last finite iterate.
    """
    cfg = cfg or EpConfig()
    cov = np.asarray(cov, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n, d = lower.shape
    mean = np.zeros((n, d)) if mean is None else np.asarray(mean, dtype=float)
    l_k = _cholesky(cov)
    w0 = np.linalg.solve(l_k, mean[..., None])[..., 0]

    sigma = cov.copy()
    mu = mean.copy()
    tau = np.zeros((n, d))
    nu = np.zeros((n, d))
    log_c = np.zeros((n, d))
    ybar = np.zeros((n, d))
    half_logdet = np.zeros(n)
    bounded = np.isfinite(lower) | np.isfinite(upper)
    n_bounded = bounded.sum(axis=1)

    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    infeasible = np.zeros(n, dtype=bool)
    sweeps = np.zeros(n, dtype=int)
    residual = np.full(n, np.inf)

    for sweep in range(1, cfg.max_sweeps + 1):
        act = np.flatnonzero(active)
        sig = sigma[act]
        m_a = mu[act]
        tau_a = tau[act]
        nu_a = nu[act]
        logc_a = log_c[act]
        ybar_a = ybar[act]
        lo_a = lower[act]
        hi_a = upper[act]
        bnd_a = bounded[act]
        tau_old = tau_a.copy()
        nu_old = nu_a.copy()
        degenerate = np.zeros(act.size, dtype=int)
        # rank-one corrections not yet applied to ``sig``; column k is
        # rebuilt from them on demand and they are flushed in blocks
        pend_s = np.empty((act.size, _BLOCK, d))
        pend_c = np.empty((act.size, _BLOCK))
        n_pend = 0
        for k in range(d):
            rows = bnd_a[:, k]
            if not rows.any():
                continue
            col = sig[:, :, k].copy()
            if n_pend:
                w = pend_c[:, :n_pend] * pend_s[:, :n_pend, k]
                col -= np.einsum("nb,nbd->nd", w, pend_s[:, :n_pend])
            v = col[:, k]
            m = m_a[:, k]
            tau_c = 1.0 / v - tau_a[:, k]
            ok = rows & (tau_c >= cfg.min_cavity_prec)
            nu_c = m / v - nu_a[:, k]
            v_c = 1.0 / np.where(ok, tau_c, 1.0)
            lz, mh, vh = truncated_moments_array(np.where(ok, nu_c * v_c, 0.0), np.where(ok, v_c, 1.0),
                                                 np.where(ok, lo_a[:, k], -np.inf), np.where(ok, hi_a[:, k], np.inf))
            degen = ok & ~(lz >= LOG_MASS_FLOOR)
            degenerate += degen
            ok &= ~degen
            i = np.flatnonzero(ok)
            dtau = np.zeros(act.size)
            dnu = np.zeros(act.size)
            if i.size:
                tc, hc = tau_c[i], nu_c[i]
                tau_new = np.maximum(1.0 / vh[i] - tc, 0.0)
                nu_new = mh[i] / vh[i] - hc
                if cfg.damping < 1.0:
                    tau_new = cfg.damping * tau_new + (1.0 - cfg.damping) * tau_a[i, k]
                    nu_new = cfg.damping * nu_new + (1.0 - cfg.damping) * nu_a[i, k]
                tp = tc + tau_new
                hp = hc + nu_new
                ybar_a[i, k] = hp / tp
                logc_a[i, k] = lz[i] + 0.5 * np.log(tp / tc) + 0.5 * tc * (hp / tp - hc / tc) ** 2
                dtau[i] = tau_new - tau_a[i, k]
                dnu[i] = nu_new - nu_a[i, k]
                tau_a[i, k] = tau_new
                nu_a[i, k] = nu_new
            denom = 1.0 + dtau * v
            m_a += col * ((dnu - dtau * m) / denom)[:, None]
            pend_s[:, n_pend] = col
            pend_c[:, n_pend] = dtau / denom
            n_pend += 1
            if n_pend == _BLOCK:
                sig -= (np.swapaxes(pend_s, 1, 2) * pend_c[:, None, :]) @ pend_s
                n_pend = 0

        tau[act] = tau_a
        nu[act] = nu_a
        log_c[act] = logc_a
        ybar[act] = ybar_a
        dead = (n_bounded[act] > 0) & (degenerate == n_bounded[act])
        infeasible[act[dead]] = True
        active[act[dead]] = False
        live = ~dead
        rows = act[live]
        if rows.size == 0:
            break
        sigma[rows], mu[rows], half_logdet[rows] = _recompute_batch(l_k[rows], w0[rows], tau[rows], nu[rows])
        res = _residual(tau_a[live], tau_old[live], nu_a[live], nu_old[live], axis=1)
        residual[rows] = res
        sweeps[rows] = sweep
        done = res <= cfg.tol
        converged[rows[done]] = True
        active[rows[done]] = False
        if not active.any():
            break

    w = np.linalg.solve(l_k, (mu - mean)[..., None])[..., 0]
    log_mass = _centred_log_mass(log_c, half_logdet, w, mu - ybar, tau, nu, ybar)
    return BatchResult(log_mass, mu, sigma, converged, infeasible, sweeps, residual)
