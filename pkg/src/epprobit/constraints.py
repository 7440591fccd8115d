"""Linear constraint regions that encode observed outcomes.

A multinomial choice of coordinate ``j`` (after any reference differencing)
is the polytope ``{z : z_j >= 0, z_j >= z_k for all k}``, written as
``0 <= A z`` with ``A = -I + 1 e_j' + e_j e_j'``.  That matrix squares to
the identity, so ``U = A (Z - mean)`` turns the polytope into a box and the
moments of ``Z`` come back through the same matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptySubset, InvalidOutcome, NotInvolutory
from .model import MULTIVARIATE, ModelKind, ProbitModel, TmvnMoments

__all__ = [
    "ConstraintSystem",
    "ReducedDesign",
    "build_constraints",
    "reduce_reference",
    "reduction_matrix",
    "reduce_covariance",
    "axis_align",
    "untransform_moments",
    "marginalize_model",
    "choice_matrix",
]


@dataclass(frozen=True)
class ConstraintSystem:
    """The region ``{z : lower <= a_matrix @ z <= upper}``."""

    a_matrix: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    involutory: bool = False
    axis_aligned: bool = False

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_matrix, dtype=float))
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if a.shape[0] != lo.size or hi.size != lo.size:
            raise DimensionMismatch(f"A has {a.shape[0]} rows but bounds have {lo.size}/{hi.size}")
        if not np.all(lo < hi):
            raise ValueError("every lower bound must be below its upper bound")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.a_matrix.shape[1]

    @classmethod
    def box(cls, lower, upper) -> "ConstraintSystem":
        lower = np.asarray(lower, dtype=float).reshape(-1)
        return cls(np.eye(lower.size), lower, upper, involutory=True, axis_aligned=True)

    @classmethod
    def general(cls, a_matrix, lower, upper) -> "ConstraintSystem":
        """Constraint system with the structural flags detected from ``a_matrix``."""
        a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
        square = a.shape[0] == a.shape[1]
        involutory = bool(square and np.allclose(a @ a, np.eye(a.shape[0]), rtol=0.0, atol=1e-12))
        axis = bool(square and np.array_equal(a, np.eye(a.shape[0])))
        return cls(a, lower, upper, involutory=involutory, axis_aligned=axis)

    def contains(self, z) -> np.ndarray:
        """Membership test for one point or a stack of points (rows)."""
        z = np.asarray(z, dtype=float)
        az = z @ self.a_matrix.T
        return np.all((az >= self.lower) & (az <= self.upper), axis=-1)


@dataclass(frozen=True)
class ReducedDesign:
    x_tilde: np.ndarray
    chosen_reduced: Optional[int]
    reduction: np.ndarray


def choice_matrix(j: int, dim: int) -> np.ndarray:
    """``-I + 1 e_j' + e_j e_j'``: row ``j`` is ``e_j``, row ``k`` is ``e_j - e_k``."""
    a = -np.eye(dim)
    a[:, j] += 1.0
    a[j, j] += 1.0
    return a


def build_constraints(kind: ModelKind, outcome, dim: int) -> ConstraintSystem:
    """Region of the identified latent system that produces ``outcome``.

    Parameters
    ----------
    kind : ModelKind
    outcome :
        Multivariate kind: 0/1 vector of length ``dim``.  Multinomial kinds:
        index of the chosen coordinate of the identified system, or ``None``
        when the outside option (or the reference alternative) was chosen.
    dim : int
        Dimension of the identified system (``m`` or ``m - 1``).
    """
    if dim < 1:
        raise InvalidOutcome(f"system dimension must be positive, got {dim}")
    if kind.tag == MULTIVARIATE:
        y = np.asarray(outcome)
        if y.shape != (dim,) or not np.all((y == 0) | (y == 1)):
            raise InvalidOutcome(f"multivariate outcome must be a 0/1 vector of length {dim}, got {outcome!r}")
        lower = np.where(y == 1, 0.0, -np.inf)
        upper = np.where(y == 1, np.inf, 0.0)
        return ConstraintSystem(np.eye(dim), lower, upper, involutory=True, axis_aligned=True)

    lower = np.zeros(dim)
    upper = np.full(dim, np.inf)
    if outcome is None:
        return ConstraintSystem(-np.eye(dim), lower, upper, involutory=True, axis_aligned=False)
    if isinstance(outcome, (bool, np.bool_)) or not isinstance(outcome, (int, np.integer)):
        raise InvalidOutcome(f"multinomial outcome must be an index or None, got {outcome!r}")
    j = int(outcome)
    if not 0 <= j < dim:
        raise InvalidOutcome(f"chosen index {j} outside [0, {dim})")
    return ConstraintSystem(choice_matrix(j, dim), lower, upper, involutory=True, axis_aligned=dim == 1)


def reduction_matrix(m: int, ref_index: int) -> np.ndarray:
    """``(m-1, m)`` matrix with rows ``e_j - e_ref`` for every ``j != ref``."""
    if not 0 <= ref_index < m:
        raise InvalidOutcome(f"reference index {ref_index} outside [0, {m})")
    keep = [j for j in range(m) if j != ref_index]
    d = np.zeros((m - 1, m))
    d[np.arange(m - 1), keep] = 1.0
    d[:, ref_index] = -1.0
    return d


def reduce_covariance(sigma, ref_index: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    d = reduction_matrix(sigma.shape[0], ref_index)
    out = d @ sigma @ d.T
    return 0.5 * (out + out.T)


def reduce_reference(x, outcome: Optional[int], ref_index: int) -> ReducedDesign:
    """Difference covariates and outcome against alternative ``ref_index``.

    ``chosen_reduced`` is ``None`` when the reference itself was chosen.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = x.shape[0]
    d = reduction_matrix(m, ref_index)
    if outcome is None or not 0 <= int(outcome) < m:
        raise InvalidOutcome(f"outcome {outcome!r} outside [0, {m})")
    outcome = int(outcome)
    if outcome == ref_index:
        chosen = None
    else:
        chosen = outcome if outcome < ref_index else outcome - 1
    return ReducedDesign(d @ x, chosen, d)


def axis_align(cs: ConstraintSystem, mean, cov):
    """Box problem for ``U = A (Z - mean)``.

    Returns
    -------
    rect_lower, rect_upper : ndarray
        Bounds ``l - A mean`` and ``u - A mean``.
    rect_cov : ndarray
        ``A cov A'``; ``U`` has mean zero.
    """
    if not cs.involutory:
        raise NotInvolutory("axis alignment needs an involutory constraint matrix")
    a = cs.a_matrix
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mean.shape != (cs.dim,) or cov.shape != (cs.dim, cs.dim):
        raise DimensionMismatch(f"expected dimension {cs.dim}, got mean {mean.shape} cov {cov.shape}")
    shift = a @ mean
    rect_cov = a @ cov @ a.T
    return cs.lower - shift, cs.upper - shift, 0.5 * (rect_cov + rect_cov.T)


def untransform_moments(cs: ConstraintSystem, mean, u_moments: TmvnMoments) -> TmvnMoments:
    """Map moments of ``U = A (Z - mean)`` back to ``Z = A U + mean``."""
    if not cs.involutory:
        raise NotInvolutory("untransform needs an involutory constraint matrix")
    a = cs.a_matrix
    mean = np.asarray(mean, dtype=float)
    u_mean = np.asarray(u_moments.mean, dtype=float)
    u_cov = np.asarray(u_moments.cov, dtype=float)
    if mean.shape != (cs.dim,) or u_mean.shape != (cs.dim,) or u_cov.shape != (cs.dim, cs.dim):
        raise DimensionMismatch("moment dimensions do not match the constraint system")
    cov = a @ u_cov @ a.T
    return TmvnMoments(
        log_mass=u_moments.log_mass,
        mean=a @ u_mean + mean,
        cov=0.5 * (cov + cov.T),
        converged=u_moments.converged,
        sweeps=u_moments.sweeps,
        residual=u_moments.residual,
    )


def marginalize_model(model: ProbitModel, keep: Sequence[int]) -> ProbitModel:
    """Restrict the covariance to the positions in ``keep`` (a smaller choice set)."""
    keep = [int(k) for k in keep]
    if not keep:
        raise EmptySubset("keep must name at least one position")
    if min(keep) < 0 or max(keep) >= model.dim:
        raise InvalidOutcome(f"positions {keep} outside [0, {model.dim})")
    idx = np.asarray(keep)
    return ProbitModel(model.beta.copy(), model.sigma[np.ix_(idx, idx)].copy(), model.kind)
