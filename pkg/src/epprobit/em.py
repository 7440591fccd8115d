"""EM estimation of probit models with an EP E-step.

One iteration:

1. E-step.  For every observation, EP approximates the mean ``mu_i`` and
   covariance ``S_i`` of its latent utilities given the outcome, under the
   current ``(beta, Sigma)``.  Each outcome region is mapped to a box through
   its involutory constraint matrix, so all observations sharing a choice set
   are solved together by :func:`epprobit.ep.ep_box_batch`.
2. ``beta`` by generalized least squares with the current ``Sigma``.
3. ``Shat = mean_i (S_i + r_i r_i')`` with residuals at the new ``beta``.
4. ``Sigma = Shat - y* I`` from the trace-constrained solve.

The E-step is split into fixed-size chunks.  Chunks are independent and may
run on several threads, but their boundaries and the order of every
reduction depend only on the data, so results do not change with the thread
count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constraints import build_constraints, reduce_reference
from .ep import EpConfig, ep_box_batch
from .errors import (
    DimensionMismatch,
    InfeasibleRegion,
    InvalidOutcome,
    NoProgress,
    NotConverged,
    NotPositiveDefinite,
)
from .model import REFERENCE, ChoiceObservation, ModelKind, ProbitModel
from .mstep import ShatAccumulator, solve_normal_equations, solve_trace_constrained

__all__ = [
    "EmConfig",
    "EmTrace",
    "IterationRecord",
    "REUSE_LAST",
    "DROP",
    "ABORT",
    "fit",
    "initialize",
    "lower_bound",
    "prepare",
    "e_step",
    "m_step",
]

REUSE_LAST = "reuse_last"
DROP = "drop"
ABORT = "abort"
_POLICIES = (REUSE_LAST, DROP, ABORT)

_NO_PROGRESS_RUN = 10
_NO_PROGRESS_DROP = 1e-6
_SUBSAMPLE_WINDOW = 3


@dataclass(frozen=True)
class EmConfig:
    """Settings for :func:`fit`.

    ``trace_target`` is the value of ``Tr(Sigma^{-1})`` that pins the scale
    (the identified dimension when ``None``).  ``thread_count`` only affects
    speed.  ``chunk_size`` fixes the order of floating point reductions, so
    changing it can move results in the last bits.
    """

    tol_sigma: float = 1e-4
    max_iters: int = 500
    trace_target: Optional[float] = None
    subsample_fraction: float = 1.0
    seed: int = 0
    ep: EpConfig = field(default_factory=EpConfig)
    ep_failure_policy: str = REUSE_LAST
    thread_count: int = 1
    chunk_size: int = 128

    def __post_init__(self):
        if not self.tol_sigma > 0:
            raise ValueError("tol_sigma must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.trace_target is not None and not self.trace_target > 0:
            raise ValueError("trace_target must be positive")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if self.ep_failure_policy not in _POLICIES:
            raise ValueError(f"ep_failure_policy must be one of {_POLICIES}")
        if self.thread_count < 1 or self.chunk_size < 1:
            raise ValueError("thread_count and chunk_size must be positive")


@dataclass
class IterationRecord:
    iteration: int
    beta: np.ndarray
    sigma: np.ndarray
    max_abs_sigma_change: float
    q_lower_bound: float
    e_step_ms: float
    m_step_ms: float
    n_ep_nonconverged: int
    n_used: int
    log_likelihood: float = float("nan")

    def to_dict(self, timings: bool = True) -> dict:
        d = {
            "iteration": self.iteration,
            "max_abs_sigma_change": self.max_abs_sigma_change,
            "q_lower_bound": self.q_lower_bound,
            "n_ep_nonconverged": self.n_ep_nonconverged,
            "n_used": self.n_used,
            "log_likelihood": self.log_likelihood,
            "beta": self.beta.tolist(),
            "sigma": self.sigma.tolist(),
        }
        if timings:
            d["e_step_ms"] = self.e_step_ms
            d["m_step_ms"] = self.m_step_ms
        return d


@dataclass
class EmTrace:
    records: List[IterationRecord] = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def iterations(self) -> int:
        return len(self.records)

    def fingerprint(self) -> bytes:
        """Bytes of every numeric field except wall-clock timings."""
        parts = []
        for r in self.records:
            parts.append(np.asarray([r.iteration, r.n_ep_nonconverged, r.n_used], dtype=np.int64).tobytes())
            parts.append(np.asarray([r.max_abs_sigma_change, r.q_lower_bound, r.log_likelihood]).tobytes())
            parts.append(r.beta.tobytes())
            parts.append(r.sigma.tobytes())
        return b"".join(parts)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class _Group:
    """Observations whose identified systems cover the same model positions."""

    positions: Tuple[int, ...]
    index: np.ndarray
    x: np.ndarray
    a: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass
class Prepared:
    kind: ModelKind
    dim: int
    p: int
    n: int
    groups: List[_Group]


def _model_size(data: Sequence[ChoiceObservation]) -> int:
    m = 0
    for obs in data:
        if obs.positions is None:
            m = max(m, obs.n_alternatives)
        else:
            m = max(m, max(obs.positions) + 1)
    return m


def prepare(data: Sequence[ChoiceObservation], kind: ModelKind, m: Optional[int] = None) -> Prepared:
    """Reduce each observation to its identified system and group by positions.

    Parameters
    ----------
    data : sequence of ChoiceObservation
    kind : ModelKind
    m : int, optional
        Number of model positions; inferred from the data by default.
    """
    if len(data) == 0:
        raise InvalidOutcome("no observations")
    m = _model_size(data) if m is None else int(m)
    dim = kind.system_dim(m)
    if dim < 1:
        raise InvalidOutcome(f"{kind.tag} kind with {m} alternatives has no identified utilities")
    p = data[0].x.shape[1]
    buckets: Dict[Tuple[int, ...], list] = {}
    for i, obs in enumerate(data):
        if obs.x.shape[1] != p:
            raise DimensionMismatch(f"observation {i} has {obs.x.shape[1]} covariates, expected {p}")
        pos = tuple(range(obs.n_alternatives)) if obs.positions is None else tuple(obs.positions)
        if max(pos) >= m:
            raise DimensionMismatch(f"observation {i} uses position {max(pos)} but the model has {m}")
        x = obs.x
        outcome = obs.outcome
        if kind.tag == REFERENCE:
            ref = kind.ref_index
            if ref not in pos:
                raise InvalidOutcome(f"observation {i} does not display the reference alternative {ref}")
            if outcome is None:
                raise InvalidOutcome(f"observation {i}: the reference kind has no outside option")
            red = reduce_reference(x, outcome, pos.index(ref))
            x = red.x_tilde
            outcome = red.chosen_reduced
            pos = tuple(q if q < ref else q - 1 for q in pos if q != ref)
            if not pos:
                raise InvalidOutcome(f"observation {i} shows only the reference alternative")
        try:
            cs = build_constraints(kind, outcome, len(pos))
        except InvalidOutcome as exc:
            raise InvalidOutcome(f"observation {i}: {exc}") from exc
        buckets.setdefault(pos, []).append((i, x, cs))

    groups = []
    for pos in sorted(buckets, key=lambda t: (len(t), t)):
        rows = buckets[pos]
        groups.append(_Group(
            positions=pos,
            index=np.array([r[0] for r in rows], dtype=int),
            x=np.stack([r[1] for r in rows]),
            a=np.stack([r[2].a_matrix for r in rows]),
            lower=np.stack([r[2].lower for r in rows]),
            upper=np.stack([r[2].upper for r in rows]),
        ))
    return Prepared(kind, dim, p, len(data), groups)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


@dataclass
class _GroupMoments:
    keep: np.ndarray        # rows of the group used this iteration
    mu: np.ndarray          # (n_keep, d) latent means
    cov_sum: np.ndarray     # (d, d) sum of latent covariances
    n_nonconverged: int
    log_lik: float          # sum of EP log masses over the used rows


def _chunk_moments(a, lower, upper, mean, sigma_g, cfg: EpConfig):
    shift = np.einsum("nij,nj->ni", a, mean)
    rect_cov = a @ sigma_g @ np.swapaxes(a, 1, 2)
    rect_cov = 0.5 * (rect_cov + np.swapaxes(rect_cov, 1, 2))
    res = ep_box_batch(rect_cov, lower - shift, upper - shift, cfg)
    mu = np.einsum("nij,nj->ni", a, res.mean) + mean
    cov = a @ res.cov @ np.swapaxes(a, 1, 2)
    return mu, cov, res


def e_step(prep: Prepared, model: ProbitModel, cfg: EmConfig, subset: Optional[np.ndarray] = None,
           pool: Optional[ThreadPoolExecutor] = None) -> List[_GroupMoments]:
    """EP moments for every observation (or the boolean ``subset``), grouped."""
    tasks = []
    for g in prep.groups:
        rows = np.arange(g.index.size) if subset is None else np.flatnonzero(subset[g.index])
        pos = np.asarray(g.positions)
        sigma_g = model.sigma[np.ix_(pos, pos)]
        for start in range(0, rows.size, cfg.chunk_size):
            r = rows[start:start + cfg.chunk_size]
            tasks.append((g, r, sigma_g))

    def run(task):
        g, r, sigma_g = task
        mean = g.x[r] @ model.beta
        return _chunk_moments(g.a[r], g.lower[r], g.upper[r], mean, sigma_g, cfg.ep)

    results = list(pool.map(run, tasks)) if pool is not None else [run(t) for t in tasks]

    out: Dict[int, list] = {}
    for (g, r, _), (mu, cov, res) in zip(tasks, results):
        bad_conv = ~res.converged & ~res.infeasible
        if cfg.ep_failure_policy == ABORT:
            if res.infeasible.any():
                raise InfeasibleRegion(f"EP found an empty region for observation {g.index[r][res.infeasible][0]}")
            if bad_conv.any():
                k = int(np.flatnonzero(bad_conv)[0])
                raise NotConverged(int(res.sweeps[k]), float(res.residual[k]))
        ok = ~res.infeasible
        if cfg.ep_failure_policy == DROP:
            ok &= res.converged
        out.setdefault(id(g), []).append((r[ok], mu[ok], cov[ok].sum(axis=0),
                                          int(bad_conv.sum() + res.infeasible.sum()), float(res.log_mass[ok].sum())))

    moments = []
    for g in prep.groups:
        parts = out.get(id(g), [])
        d = len(g.positions)
        if parts:
            keep = np.concatenate([p[0] for p in parts])
            mu = np.concatenate([p[1] for p in parts])
            cov_sum = np.zeros((d, d))
            for p in parts:
                cov_sum += p[2]
            nbad = sum(p[3] for p in parts)
            ll = sum(p[4] for p in parts)
        else:
            keep, mu, cov_sum, nbad, ll = np.zeros(0, dtype=int), np.zeros((0, d)), np.zeros((d, d)), 0, 0.0
        moments.append(_GroupMoments(keep, mu, cov_sum, nbad, ll))
    return moments


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _inv_spd(s):
    try:
        l_inv = np.linalg.inv(np.linalg.cholesky(s))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("covariance is not positive definite") from exc
    w = l_inv.T @ l_inv
    return 0.5 * (w + w.T)


def m_step(prep: Prepared, model: ProbitModel, moments: List[_GroupMoments], target: float):
    """GLS ``beta`` with the current ``Sigma``, then the trace-constrained ``Sigma``.

    Returns
    -------
    beta, sigma, shat_summary
    """
    p = prep.p
    lhs = np.zeros((p, p))
    rhs = np.zeros(p)
    for g, mom in zip(prep.groups, moments):
        if mom.keep.size == 0:
            continue
        pos = np.asarray(g.positions)
        w = _inv_spd(model.sigma[np.ix_(pos, pos)])
        x = g.x[mom.keep]
        wx = w @ x
        lhs += np.einsum("nkp,nkq->pq", x, wx)
        rhs += np.einsum("nkp,nk->p", wx, mom.mu)
    beta = solve_normal_equations(lhs, rhs)

    acc = ShatAccumulator(prep.dim)
    for g, mom in zip(prep.groups, moments):
        if mom.keep.size == 0:
            continue
        acc.add(list(g.positions), mom.cov_sum, mom.mu - g.x[mom.keep] @ beta)
    summary = acc.finish()
    solved = solve_trace_constrained(summary, target)
    return beta, solved.sigma_new, summary


def lower_bound(model: ProbitModel, shat) -> float:
    """EM surrogate ``-log det Sigma - Tr(Sigma^{-1} Shat)``."""
    sigma = np.asarray(model.sigma if isinstance(model, ProbitModel) else model, dtype=float)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("sigma is not positive definite") from exc
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    half = np.linalg.solve(chol, np.asarray(shat, dtype=float))
    half = np.linalg.solve(chol, half.T)
    return float(-logdet - np.trace(half))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def initialize(data, kind: ModelKind, cfg: EmConfig, m: Optional[int] = None) -> ProbitModel:
    """``beta = 0`` and ``Sigma = (d / c) I`` so that ``Tr(Sigma^{-1}) = c``."""
    if len(data) == 0:
        raise InvalidOutcome("no observations")
    m = _model_size(data) if m is None else int(m)
    d = kind.system_dim(m)
    c = float(d if cfg.trace_target is None else cfg.trace_target)
    p = data[0].x.shape[1]
    return ProbitModel(np.zeros(p), (d / c) * np.eye(d), kind)


def _subset(n: int, cfg: EmConfig, iteration: int) -> Optional[np.ndarray]:
    if cfg.subsample_fraction >= 1.0:
        return None
    k = max(1, int(round(cfg.subsample_fraction * n)))
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(iteration)]))
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=k, replace=False)] = True
    return mask


def fit(data: Sequence[ChoiceObservation], kind: ModelKind, cfg: Optional[EmConfig] = None,
        init: Optional[ProbitModel] = None, m: Optional[int] = None, callback=None):
    """Maximum likelihood estimate of ``(beta, Sigma)`` by EP-EM.

    Parameters
    ----------
    data : sequence of ChoiceObservation
    kind : ModelKind
    cfg : EmConfig, optional
    init : ProbitModel, optional
        Starting point; :func:`initialize` by default.
    m : int, optional
        Number of model positions when the data do not reveal it.
    callback : callable, optional
        Called with each :class:`IterationRecord` as it is produced.

    Returns
    -------
    model : ProbitModel
        Final iterate; ``sigma`` is the covariance of the identified system.
    trace : EmTrace
        ``trace.converged`` tells whether the ``Sigma`` change fell below
        ``tol_sigma`` before ``max_iters``.

    Raises
    ------
    NoProgress
        If the EP log likelihood per observation decreases by more than 1e-6
        on 10 consecutive iterations.  The surrogate ``q_lower_bound`` is
        recorded but not monitored: it is evaluated against a different
        ``Shat`` at every iteration, so it need not increase.
    """
    cfg = cfg or EmConfig()
    prep = prepare(data, kind, m)
    model = init if init is not None else initialize(data, kind, cfg, _model_size(data) if m is None else m)
    if model.dim != prep.dim or model.beta.size != prep.p:
        raise DimensionMismatch(f"initial model has dim {model.dim}, p {model.beta.size}; data need {prep.dim}, {prep.p}")
    model = ProbitModel(model.beta.copy(), model.sigma.copy(), kind)
    target = float(prep.dim if cfg.trace_target is None else cfg.trace_target)

    trace = EmTrace()
    changes: List[float] = []
    ll_prev = None
    decreasing = 0
    pool = ThreadPoolExecutor(cfg.thread_count) if cfg.thread_count > 1 else None
    try:
        for it in range(1, cfg.max_iters + 1):
            subset = _subset(prep.n, cfg, it)
            t0 = time.perf_counter()
            moments = e_step(prep, model, cfg, subset, pool)
            t1 = time.perf_counter()
            beta, sigma, summary = m_step(prep, model, moments, target)
            t2 = time.perf_counter()

            change = float(np.abs(sigma - model.sigma).max())
            n_used = int(sum(mm.keep.size for mm in moments))
            # EP log likelihood at the parameters the E-step used, per observation
            ll = sum(mm.log_lik for mm in moments) / max(n_used, 1)
            model = ProbitModel(beta, sigma, kind)
            q = lower_bound(model, summary.s_hat)
            rec = IterationRecord(
                iteration=it,
                beta=beta.copy(),
                sigma=sigma.copy(),
                max_abs_sigma_change=change,
                q_lower_bound=q,
                e_step_ms=1e3 * (t1 - t0),
                m_step_ms=1e3 * (t2 - t1),
                n_ep_nonconverged=sum(mm.n_nonconverged for mm in moments),
                n_used=n_used,
                log_likelihood=ll,
            )
            trace.records.append(rec)
            if callback is not None:
                callback(rec)

            if ll_prev is not None and ll < ll_prev - _NO_PROGRESS_DROP:
                decreasing += 1
                if decreasing >= _NO_PROGRESS_RUN:
                    raise NoProgress(f"EP log likelihood decreased on {decreasing} consecutive iterations", trace)
            else:
                decreasing = 0
            ll_prev = ll

            changes.append(change)
            if cfg.subsample_fraction < 1.0:
                window = changes[-_SUBSAMPLE_WINDOW:]
                done = len(window) == _SUBSAMPLE_WINDOW and max(window) < cfg.tol_sigma
            else:
                done = change < cfg.tol_sigma
            if done:
                trace.converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return model, trace
