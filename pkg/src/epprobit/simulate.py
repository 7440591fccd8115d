"""Synthetic choice data and Monte Carlo samplers for truncated normals.

Data follow the usual simulation design for probit estimators: covariates
``X_i ~ Uniform(-0.5, 0.5)`` of shape ``m x p``, utilities
``Z_i = X_i beta + eps_i`` with ``eps_i ~ N(0, Sigma)``, and the outcome
read off ``Z_i`` by the rule of the model kind.  Each observation draws from
its own Philox stream keyed by ``(seed, i)``, so a dataset does not depend
on how generation is split across workers.

The samplers exist to check EP.  Rejection sampling is exact but only
usable when the region has reasonable mass; the Gibbs sampler works on any
region with an invertible constraint matrix by cycling through univariate
full conditionals in the box coordinates ``U = A (Z - mean)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from scipy import special

from .constraints import ConstraintSystem, reduce_covariance
from .errors import AcceptanceTooLow, NoFeasibleStart, NotPositiveDefinite
from .model import MULTIVARIATE, OUTSIDE, REFERENCE, ChoiceObservation, ModelKind

__all__ = [
    "CompoundSymmetric",
    "Banded",
    "RandomPD",
    "SimSpec",
    "SimulatedData",
    "SampleMoments",
    "generate",
    "choose",
    "obs_rng",
    "gibbs_tmvn",
    "rejection_tmvn",
    "sample_truncnorm",
]


@dataclass(frozen=True)
class CompoundSymmetric:
    diag: float = 1.0
    off: float = 0.5

    def matrix(self, m: int) -> np.ndarray:
        return (self.diag - self.off) * np.eye(m) + self.off * np.ones((m, m))


@dataclass(frozen=True)
class Banded:
    """Unit diagonal, ``decay**|j-k|`` within ``bandwidth`` of it, zero elsewhere."""

    bandwidth: int = 1
    decay: float = 0.5

    def matrix(self, m: int) -> np.ndarray:
        lag = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
        return np.where(lag <= self.bandwidth, float(self.decay) ** lag, 0.0)


@dataclass(frozen=True)
class RandomPD:
    """Random correlation matrix from a Wishart draw keyed by ``seed``."""

    seed: int = 0

    def matrix(self, m: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        b = rng.standard_normal((m, 2 * m))
        s = b @ b.T / (2 * m) + 0.1 * np.eye(m)
        d = 1.0 / np.sqrt(np.diag(s))
        s = s * d[:, None] * d[None, :]
        return 0.5 * (s + s.T)


SigmaKind = Union[CompoundSymmetric, Banded, RandomPD]


@dataclass(frozen=True)
class SimSpec:
    n: int
    m: int
    p: int
    beta_true: Optional[np.ndarray] = None
    sigma_kind: SigmaKind = field(default_factory=CompoundSymmetric)
    seed: int = 0
    kind: ModelKind = field(default_factory=ModelKind.outside)

    def __post_init__(self):
        if self.n < 0 or self.m < 1 or self.p < 1:
            raise ValueError(f"invalid sizes n={self.n}, m={self.m}, p={self.p}")
        if self.kind.tag == REFERENCE and not self.kind.ref_index < self.m:
            raise ValueError("reference index outside the choice set")
        if self.kind.tag == REFERENCE and self.m < 2:
            raise ValueError("reference kind needs at least two alternatives")
        beta = np.ones(self.p) if self.beta_true is None else np.asarray(self.beta_true, dtype=float).reshape(-1)
        if beta.size != self.p:
            raise ValueError(f"beta_true has {beta.size} entries, expected {self.p}")
        object.__setattr__(self, "beta_true", beta)

    def sigma(self) -> np.ndarray:
        s = self.sigma_kind.matrix(self.m)
        try:
            np.linalg.cholesky(s)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"{self.sigma_kind!r} is not positive definite for m={self.m}") from exc
        return s


@dataclass
class SimulatedData:
    observations: List[ChoiceObservation]
    beta: np.ndarray
    sigma: np.ndarray
    latent: np.ndarray
    kind: ModelKind
    seed: int

    @property
    def sigma_identified(self) -> np.ndarray:
        """Covariance of the identified system (differenced for the reference kind)."""
        if self.kind.tag == REFERENCE:
            return reduce_covariance(self.sigma, self.kind.ref_index)
        return self.sigma


def obs_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(i)])))


def choose(kind: ModelKind, z):
    """Outcome implied by utilities ``z`` (0-based index, ``None`` or 0/1 vector)."""
    z = np.asarray(z, dtype=float)
    if kind.tag == MULTIVARIATE:
        return (z >= 0.0).astype(int)
    j = int(np.argmax(z))
    if kind.tag == OUTSIDE and z[j] < 0.0:
        return None
    return j


def generate(spec: SimSpec) -> SimulatedData:
    sigma = spec.sigma()
    chol = np.linalg.cholesky(sigma)
    obs = []
    latent = np.empty((spec.n, spec.m))
    for i in range(spec.n):
        rng = obs_rng(spec.seed, i)
        x = rng.uniform(-0.5, 0.5, size=(spec.m, spec.p))
        z = x @ spec.beta_true + chol @ rng.standard_normal(spec.m)
        latent[i] = z
        obs.append(ChoiceObservation(x, choose(spec.kind, z)))
    return SimulatedData(obs, spec.beta_true.copy(), sigma, latent, spec.kind, spec.seed)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


@dataclass
class SampleMoments:
    """Monte Carlo moment estimates with standard errors.

    ``mass`` is the acceptance rate for rejection sampling (an unbiased
    estimate of the region's probability) and ``None`` for Gibbs.
    """

    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    cov_se: np.ndarray
    n_draws: int
    mass: Optional[float] = None
    mass_se: Optional[float] = None


def sample_truncnorm(rng, mu, sd, lower, upper):
    """Inverse-CDF draws from ``N(mu, sd^2)`` on ``(lower, upper)``, computed in log space."""
    mu, sd, lower, upper = np.broadcast_arrays(mu, sd, lower, upper)
    a = (lower - mu) / sd
    b = (upper - mu) / sd
    # keep the interval on the left so that CDF values stay resolvable
    with np.errstate(invalid="ignore"):
        flip = a + b > 0.0
    a, b = np.where(flip, -b, a), np.where(flip, -a, b)
    log_fa = special.log_ndtr(a)
    log_fb = special.log_ndtr(b)
    u = rng.random(a.shape)
    with np.errstate(divide="ignore"):
        log_span = log_fb + np.log1p(-np.exp(log_fa - log_fb))
        log_p = np.logaddexp(log_fa, np.log(u) + log_span)
    x = special.ndtri_exp(np.minimum(log_p, 0.0))
    x = np.clip(x, a, b)
    x = np.where(flip, -x, x)
    return mu + sd * x


def _moments_from_chains(samples):
    """Pooled mean/cov and between-chain standard errors; ``samples`` is (draws, chains, d)."""
    n_keep, n_chains, d = samples.shape
    mean = samples.reshape(-1, d).mean(axis=0)
    centered = samples - mean
    chain_mean = samples.mean(axis=0)
    chain_cov = np.einsum("tcj,tck->cjk", centered, centered) / n_keep
    cov = chain_cov.mean(axis=0)
    mean_se = chain_mean.std(axis=0, ddof=1) / np.sqrt(n_chains)
    cov_se = chain_cov.std(axis=0, ddof=1) / np.sqrt(n_chains)
    return mean, 0.5 * (cov + cov.T), mean_se, cov_se


def gibbs_tmvn(prior_mean, prior_cov, cs: ConstraintSystem, draws: int = 100_000, burn_in: int = 500,
               seed: int = 0, chains: int = 200) -> SampleMoments:
    """Gibbs sampler for ``N(prior_mean, prior_cov)`` restricted to ``cs``.

    Runs ``chains`` independent chains in parallel in the box coordinates
    ``U = A (Z - prior_mean)``.  Standard errors come from the spread of the
    per-chain estimates, which accounts for autocorrelation.

    Raises
    ------
    NoFeasibleStart
        If no interior starting point is found.
    """
    mean = np.asarray(prior_mean, dtype=float)
    cov = np.asarray(prior_cov, dtype=float)
    a = cs.a_matrix
    if a.shape[0] != a.shape[1]:
        raise ValueError("Gibbs sampling needs a square constraint matrix")
    a_inv = a if cs.involutory else np.linalg.inv(a)
    shift = a @ mean
    lo = cs.lower - shift
    hi = cs.upper - shift
    c = a @ cov @ a.T
    try:
        prec = np.linalg.inv(np.linalg.cholesky(c))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("prior covariance is not positive definite") from exc
    prec = prec.T @ prec
    d = cs.dim
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), d])))

    start = None
    for attempt in range(1000):
        frac = rng.uniform(0.05, 0.95, size=d)
        spread = (1.0 + attempt) * frac
        with np.errstate(invalid="ignore"):
            cand = np.where(np.isfinite(lo) & np.isfinite(hi), lo + (hi - lo) * frac,
                            np.where(np.isfinite(lo), lo + spread,
                                     np.where(np.isfinite(hi), hi - spread, spread - 0.5 * (1.0 + attempt))))
        if np.all((cand > lo) & (cand < hi)):
            start = cand
            break
    if start is None:
        raise NoFeasibleStart("could not place a starting point inside the region")

    chains = max(2, int(chains))
    n_keep = max(1, -(-int(draws) // chains))
    u = np.tile(start, (chains, 1))
    cond_sd = 1.0 / np.sqrt(np.diag(prec))
    out = np.empty((n_keep, chains, d))
    for t in range(burn_in + n_keep):
        for k in range(d):
            cond_mu = u[:, k] - (u @ prec[k]) / prec[k, k]
            u[:, k] = sample_truncnorm(rng, cond_mu, cond_sd[k], lo[k], hi[k])
        if t >= burn_in:
            out[t - burn_in] = u
    z = out @ a_inv.T + mean
    m, s, m_se, s_se = _moments_from_chains(z)
    return SampleMoments(m, s, m_se, s_se, n_keep * chains)


def rejection_tmvn(prior_mean, prior_cov, cs: ConstraintSystem, target_accepted: int = 1_000_000,
                   seed: int = 0, batch: int = 200_000, max_draws: int = 10**9) -> SampleMoments:
    """Exact sampler: draw from the prior and keep points in the region.

    Raises
    ------
    AcceptanceTooLow
        If a pilot of 10^4 draws accepts fewer than 1 in 10^4.
    """
    mean = np.asarray(prior_mean, dtype=float)
    cov = np.asarray(prior_cov, dtype=float)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("prior covariance is not positive definite") from exc
    d = mean.size
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), d, 1])))

    def draw(k):
        return mean + rng.standard_normal((k, d)) @ chol.T

    pilot = draw(10_000)
    hits = cs.contains(pilot)
    rate = hits.mean()
    if rate < 1e-4:
        raise AcceptanceTooLow(float(rate))
    kept = [pilot[hits]]
    n_acc = int(hits.sum())
    n_total = pilot.shape[0]
    while n_acc < target_accepted and n_total < max_draws:
        need = int(1.2 * (target_accepted - n_acc) / rate) + 1
        z = draw(min(batch, need))
        ok = cs.contains(z)
        kept.append(z[ok])
        n_acc += int(ok.sum())
        n_total += z.shape[0]
    z = np.concatenate(kept)
    n = z.shape[0]
    mu = z.mean(axis=0)
    dz = z - mu
    cov_s = dz.T @ dz / n
    sq = np.einsum("nj,nk->jk", dz * dz, dz * dz) / n
    cov_se = np.sqrt(np.maximum(sq - cov_s * cov_s, 0.0) / n)
    mass = n / n_total
    return SampleMoments(
        mu, 0.5 * (cov_s + cov_s.T), np.sqrt(np.diag(cov_s) / n), cov_se, n,
        mass=mass, mass_se=float(np.sqrt(mass * (1.0 - mass) / n_total)),
    )
