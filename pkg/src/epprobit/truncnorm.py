"""Moments of a univariate normal truncated to an interval.

Every EP site update reduces to one call here, so the kernel has to survive
bounds deep in either tail.  The standardized interval ``(a, b)`` is first
reflected so that ``a + b >= 0`` and then handled by one of four regimes:

* one-sided ``(a, inf)``: Mills ratio, switching to a continued fraction for
  ``a > 3`` where ``1 - lam * (lam - a)`` starts to cancel;
* narrow ``(a, b)``: Gauss-Legendre quadrature of the density, which has no
  subtraction at all;
* both bounds in the upper tail: a difference of one-sided tails weighted by
  the tail ratio ``q = sf(b) / sf(a) <= 0.32``;
* straddling zero: the textbook erf formula, which is well conditioned once
  the interval is at least one standard deviation wide.

Two entry points share these formulas.  :func:`truncated_moments` works on
Python floats through :mod:`math` and is what the single-problem EP loop
calls; :func:`truncated_moments_array` is the numpy version used by the
batched E-step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DegenerateMass

__all__ = [
    "Interval1D",
    "UniMoments",
    "truncated_moments",
    "truncated_moments_array",
    "LOG_MASS_FLOOR",
]

LOG_MASS_FLOOR = math.log(1e-300)

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_CF_SWITCH = 3.0
_CF_DEPTH = 60
_NARROW_WIDTH = 1.0
_NARROW_TILT = 15.0

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)
_GL_LOG_WEIGHTS = np.log(_GL_WEIGHTS)
_GL_NODES_LIST = _GL_NODES.tolist()
_GL_LOG_WEIGHTS_LIST = _GL_LOG_WEIGHTS.tolist()


@dataclass(frozen=True)
class Interval1D:
    """Open interval with possibly infinite endpoints."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"empty interval ({self.lower}, {self.upper})")


@dataclass(frozen=True)
class UniMoments:
    log_mass: float
    mean: float
    variance: float


# ---------------------------------------------------------------------------
# scalar kernel
# ---------------------------------------------------------------------------


def _cf_tail(x: float) -> tuple[float, float]:
    """First two tails ``T1, T2`` of the Mills-ratio continued fraction.

    ``T_k = k / (x + T_{k+1})``, so that ``1 / mills(x) = x + T1`` and the
    one-sided variance is ``T1 * (T2 - T1)``.
    """
    t = 0.0
    for k in range(_CF_DEPTH, 1, -1):
        t = k / (x + t)
    t2 = t
    t1 = 1.0 / (x + t2)
    return t1, t2


def _one_sided(x: float) -> tuple[float, float, float]:
    """``(log sf, mean, variance)`` of N(0, 1) restricted to ``(x, inf)``."""
    if x > _CF_SWITCH:
        t1, t2 = _cf_tail(x)
        lam = x + t1
        log_pdf = -0.5 * x * x - _LOG_SQRT_2PI
        return log_pdf - math.log(lam), lam, t1 * (t2 - t1)
    sf = 0.5 * math.erfc(x / _SQRT2)
    lam = math.exp(-0.5 * x * x - _LOG_SQRT_2PI) / sf
    return math.log(sf), lam, 1.0 - lam * (lam - x)


def _narrow(a: float, b: float) -> tuple[float, float, float]:
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    log_half = math.log(half)
    nodes = [mid + half * t for t in _GL_NODES_LIST]
    logs = [lw + log_half - 0.5 * x * x - _LOG_SQRT_2PI for x, lw in zip(nodes, _GL_LOG_WEIGHTS_LIST)]
    top = max(logs)
    ws = [math.exp(v - top) for v in logs]
    total = math.fsum(ws)
    log_z = top + math.log(total)
    m1 = math.fsum(w * (x - mid) for w, x in zip(ws, nodes)) / total
    m2 = math.fsum(w * (x - mid) ** 2 for w, x in zip(ws, nodes)) / total
    return log_z, mid + m1, m2 - m1 * m1


def _standard_moments(a: float, b: float) -> tuple[float, float, float]:
    """Moments of N(0, 1) on ``(a, b)`` with ``a + b >= 0`` and ``a`` finite."""
    if b == math.inf:
        return _one_sided(a)
    width = b - a
    if width < _NARROW_WIDTH and width * b < _NARROW_TILT:
        return _narrow(a, b)
    if a >= 0.0:
        log_sa, lam_a, var_a = _one_sided(a)
        log_sb, lam_b, var_b = _one_sided(b)
        q = math.exp(log_sb - log_sa)
        d = 1.0 - q
        delta = lam_b - lam_a
        mean = lam_a - q * delta / d
        var = (var_a - q * var_b) / d - q * delta * delta / (d * d)
        return log_sa + math.log1p(-q), mean, var
    z = 0.5 * (math.erf(b / _SQRT2) - math.erf(a / _SQRT2))
    pa = math.exp(-0.5 * a * a - _LOG_SQRT_2PI)
    pb = math.exp(-0.5 * b * b - _LOG_SQRT_2PI)
    mean = (pa - pb) / z
    var = 1.0 + (a * pa - b * pb) / z - mean * mean
    return math.log(z), mean, var


def truncated_moments(mu: float, sigma2: float, lower: float, upper: float) -> UniMoments:
    """Log mass, mean and variance of ``N(mu, sigma2)`` restricted to ``(lower, upper)``.

    Parameters
    ----------
    mu, sigma2 : float
        Mean and variance (``sigma2 > 0``) of the untruncated normal.
    lower, upper : float
        Interval endpoints; either may be infinite.

    Raises
    ------
    DegenerateMass
        If the truncated mass is below ``1e-300``.
    """
    if not sigma2 > 0.0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if not lower < upper:
        raise ValueError(f"empty interval ({lower}, {upper})")
    if lower == -math.inf and upper == math.inf:
        return UniMoments(0.0, mu, sigma2)
    s = math.sqrt(sigma2)
    a = (lower - mu) / s
    b = (upper - mu) / s
    sign = 1.0
    if a + b < 0.0:
        a, b, sign = -b, -a, -1.0
    log_z, m, v = _standard_moments(a, b)
    if log_z < LOG_MASS_FLOOR or math.isnan(log_z):
        raise DegenerateMass(log_z)
    m = min(max(m, a), b)
    return UniMoments(log_z, mu + sign * s * m, sigma2 * v)


# ---------------------------------------------------------------------------
# vectorized kernel
# ---------------------------------------------------------------------------


def _one_sided_array(x):
    log_sf = np.empty_like(x)
    lam = np.empty_like(x)
    var = np.empty_like(x)
    far = x > _CF_SWITCH
    near = ~far
    if near.any():
        xn = x[near]
        sf_scaled = special.erfcx(xn / _SQRT2)  # sf * exp(x^2/2) * 2
        lam_n = 2.0 / (sf_scaled * math.sqrt(2.0 * math.pi))
        lam[near] = lam_n
        var[near] = 1.0 - lam_n * (lam_n - xn)
        log_sf[near] = special.log_ndtr(-xn)
    if far.any():
        xf = x[far]
        t = np.zeros_like(xf)
        for k in range(_CF_DEPTH, 1, -1):
            t = k / (xf + t)
        t1 = 1.0 / (xf + t)
        lam_f = xf + t1
        lam[far] = lam_f
        var[far] = t1 * (t - t1)
        log_sf[far] = -0.5 * xf * xf - _LOG_SQRT_2PI - np.log(lam_f)
    return log_sf, lam, var


def _narrow_array(a, b):
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    logs = _GL_LOG_WEIGHTS[None, :] + np.log(half)[:, None] - 0.5 * nodes**2 - _LOG_SQRT_2PI
    top = logs.max(axis=1)
    w = np.exp(logs - top[:, None])
    total = w.sum(axis=1)
    c = nodes - mid[:, None]
    m1 = (w * c).sum(axis=1) / total
    m2 = (w * c * c).sum(axis=1) / total
    return top + np.log(total), mid + m1, m2 - m1 * m1


def truncated_moments_array(mu, sigma2, lower, upper):
    """Vectorized :func:`truncated_moments` without the underflow exception.

    Returns
    -------
    log_mass, mean, variance : ndarray
        Broadcast to the common shape of the inputs.  Entries whose mass is
        below ``1e-300`` have ``log_mass < LOG_MASS_FLOOR``; their mean and
        variance are not meaningful and callers are expected to mask them.
    """
    mu, sigma2, lower, upper = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mu, sigma2, lower, upper))
    )
    shape = mu.shape
    mu, sigma2, lower, upper = (v.ravel() for v in (mu, sigma2, lower, upper))
    log_z = np.zeros(mu.shape)
    mean = mu.copy()
    var = sigma2.copy()

    free = np.isneginf(lower) & np.isposinf(upper)
    idx = np.flatnonzero(~free)
    if idx.size:
        s = np.sqrt(sigma2[idx])
        with np.errstate(invalid="ignore"):
            a = (lower[idx] - mu[idx]) / s
            b = (upper[idx] - mu[idx]) / s
        flip = a + b < 0.0
        a, b = np.where(flip, -b, a), np.where(flip, -a, b)
        sign = np.where(flip, -1.0, 1.0)

        lz = np.empty(idx.size)
        m = np.empty(idx.size)
        v = np.empty(idx.size)

        one = np.isposinf(b)
        width = b - a
        with np.errstate(invalid="ignore"):
            narrow = ~one & (width < _NARROW_WIDTH) & (width * b < _NARROW_TILT)
        upper_tail = ~one & ~narrow & (a >= 0.0)
        mixed = ~one & ~narrow & ~upper_tail

        if one.any():
            lz[one], m[one], v[one] = _one_sided_array(a[one])
        if narrow.any():
            lz[narrow], m[narrow], v[narrow] = _narrow_array(a[narrow], b[narrow])
        if upper_tail.any():
            log_sa, lam_a, var_a = _one_sided_array(a[upper_tail])
            log_sb, lam_b, var_b = _one_sided_array(b[upper_tail])
            q = np.exp(log_sb - log_sa)
            d = 1.0 - q
            delta = lam_b - lam_a
            m[upper_tail] = lam_a - q * delta / d
            v[upper_tail] = (var_a - q * var_b) / d - q * delta * delta / (d * d)
            lz[upper_tail] = log_sa + np.log1p(-q)
        if mixed.any():
            am, bm = a[mixed], b[mixed]
            z = 0.5 * (special.erf(bm / _SQRT2) - special.erf(am / _SQRT2))
            pa = np.exp(-0.5 * am * am - _LOG_SQRT_2PI)
            pb = np.exp(-0.5 * bm * bm - _LOG_SQRT_2PI)
            mm = (pa - pb) / z
            m[mixed] = mm
            v[mixed] = 1.0 + (am * pa - bm * pb) / z - mm * mm
            lz[mixed] = np.log(z)

        m = np.minimum(np.maximum(m, a), b)
        log_z[idx] = lz
        mean[idx] = mu[idx] + sign * s * m
        var[idx] = sigma2[idx] * v
    return log_z.reshape(shape), mean.reshape(shape), var.reshape(shape)
