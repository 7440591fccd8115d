"""Choice probabilities and position counterfactuals.

The probability of each outcome is the Gaussian mass of its region,
estimated by the EP normalizing constant.  EP masses of the different
outcomes need not add up to one, so both the raw masses and their
normalized version are reported.

Probabilities are computed on the trace-normalized representative of the
model's scale class, which makes them exactly invariant (up to rounding)
under ``(beta, Sigma) -> (c beta, c^2 Sigma)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .constraints import build_constraints, reduce_reference
from .ep import EpConfig, ep_moments
from .errors import DimensionMismatch, InfeasibleRegion, InvalidOutcome
from .model import MULTIVARIATE, OUTSIDE, REFERENCE, ProbitModel

__all__ = [
    "ChoiceProbabilities",
    "Counterfactual",
    "choice_probabilities",
    "outcome_probability",
    "counterfactual_swap_to_top",
]


@dataclass(frozen=True)
class ChoiceProbabilities:
    """Outcome probabilities for one choice situation.

    For the outside kind entry 0 is the outside option and entry ``j + 1``
    is row ``j`` of the covariates; for the reference kind entry ``j`` is
    row ``j``.
    """

    raw_mass: np.ndarray
    normalized: np.ndarray
    mass_defect: float
    has_outside: bool

    def of(self, row: Optional[int]) -> float:
        """Normalized probability of covariate row ``row`` (``None`` for outside)."""
        if row is None:
            if not self.has_outside:
                raise InvalidOutcome("this model has no outside option")
            return float(self.normalized[0])
        return float(self.normalized[row + 1 if self.has_outside else row])


class Counterfactual(NamedTuple):
    baseline: ChoiceProbabilities
    swapped: ChoiceProbabilities
    uplift: float


def _sub_sigma(model: ProbitModel, positions, k: int) -> np.ndarray:
    if positions is None:
        return model.sigma
    pos = np.asarray(positions, dtype=int)
    if pos.size != k:
        raise DimensionMismatch(f"{pos.size} positions for {k} identified utilities")
    return model.sigma[np.ix_(pos, pos)]


def _region_mass(mean, cov, cs, cfg) -> float:
    try:
        return float(np.exp(ep_moments(mean, cov, cs, cfg).log_mass))
    except InfeasibleRegion:
        return 0.0


def _check_x(model: ProbitModel, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.beta.size:
        raise DimensionMismatch(f"x has {x.shape[1]} covariates, model has {model.beta.size}")
    return x


def choice_probabilities(model: ProbitModel, x, positions: Optional[Sequence[int]] = None,
                         cfg: Optional[EpConfig] = None) -> ChoiceProbabilities:
    """Probability of every outcome of a multinomial model.

    Parameters
    ----------
    model : ProbitModel
        Outside or reference kind.
    x : array, shape (k, p)
        Covariates of the displayed alternatives.
    positions : sequence of int, optional
        Model positions of the rows of ``x``; all positions by default.
    cfg : EpConfig, optional

    Returns
    -------
    ChoiceProbabilities
    """
    kind = model.kind
    if kind.tag == MULTIVARIATE:
        raise InvalidOutcome("multivariate models have no single choice; use outcome_probability")
    model = model.trace_normalized()
    x = _check_x(model, x)
    k = x.shape[0]
    if positions is not None and len(positions) != k:
        raise DimensionMismatch(f"{len(positions)} positions for {k} rows of x")

    if kind.tag == OUTSIDE:
        if positions is None and k != model.dim:
            raise DimensionMismatch(f"x has {k} rows, model has {model.dim} alternatives")
        sigma = _sub_sigma(model, positions, k)
        mean = x @ model.beta
        raw = np.array([_region_mass(mean, sigma, build_constraints(kind, j, k), cfg) for j in [None, *range(k)]])
        has_outside = True
    else:
        ref = kind.ref_index
        pos = list(range(k)) if positions is None else [int(q) for q in positions]
        if positions is None and k != model.dim + 1:
            raise DimensionMismatch(f"x has {k} rows, model has {model.dim + 1} alternatives")
        if ref not in pos:
            raise InvalidOutcome(f"reference alternative {ref} is not displayed")
        r = pos.index(ref)
        red_pos = [q if q < ref else q - 1 for q in pos if q != ref]
        sigma = _sub_sigma(model, None if positions is None else red_pos, k - 1)
        raw = np.empty(k)
        for j in range(k):
            red = reduce_reference(x, j, r)
            cs = build_constraints(kind, red.chosen_reduced, k - 1)
            raw[j] = _region_mass(red.x_tilde @ model.beta, sigma, cs, cfg)
        has_outside = False

    total = raw.sum()
    return ChoiceProbabilities(raw, raw / total, float(abs(total - 1.0)), has_outside)


def outcome_probability(model: ProbitModel, x, outcome, positions: Optional[Sequence[int]] = None,
                        cfg: Optional[EpConfig] = None) -> float:
    """EP probability of one outcome (any kind, including 0/1 vectors)."""
    kind = model.kind
    model = model.trace_normalized()
    x = _check_x(model, x)
    k = x.shape[0]
    if kind.tag == REFERENCE:
        pos = list(range(k)) if positions is None else [int(q) for q in positions]
        ref = kind.ref_index
        if ref not in pos:
            raise InvalidOutcome(f"reference alternative {ref} is not displayed")
        red = reduce_reference(x, outcome, pos.index(ref))
        red_pos = None if positions is None else [q if q < ref else q - 1 for q in pos if q != ref]
        cs = build_constraints(kind, red.chosen_reduced, k - 1)
        return _region_mass(red.x_tilde @ model.beta, _sub_sigma(model, red_pos, k - 1), cs, cfg)
    cs = build_constraints(kind, outcome, k)
    return _region_mass(x @ model.beta, _sub_sigma(model, positions, k), cs, cfg)


def counterfactual_swap_to_top(model: ProbitModel, x, item: int, positions: Optional[Sequence[int]] = None,
                               cfg: Optional[EpConfig] = None) -> Counterfactual:
    """Move ``item`` to the top slot by exchanging covariate rows ``item`` and 0.

    The covariance stays attached to positions, so only the fixed utilities
    move.  ``uplift`` is the change in the item's normalized probability.
    """
    x = _check_x(model, x)
    if not 0 <= item < x.shape[0]:
        raise InvalidOutcome(f"item {item} outside [0, {x.shape[0]})")
    baseline = choice_probabilities(model, x, positions, cfg)
    xs = x.copy()
    xs[[0, item]] = xs[[item, 0]]
    swapped = choice_probabilities(model, xs, positions, cfg)
    return Counterfactual(baseline, swapped, swapped.of(0) - baseline.of(item))
