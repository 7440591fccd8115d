"""Model-level data types: model kinds, fitted models, observations."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

__all__ = ["ModelKind", "ProbitModel", "ChoiceObservation", "TmvnMoments"]

MULTIVARIATE = "multivariate"
OUTSIDE = "outside"
REFERENCE = "reference"


@dataclass(frozen=True)
class ModelKind:
    """Which probit likelihood the data follows.

    ``multivariate``
        every coordinate reports the sign of its own latent utility;
    ``outside``
        multinomial choice with an outside option chosen when all utilities
        are negative;
    ``reference``
        multinomial choice identified by differencing against alternative
        ``ref_index``.
    """

    tag: str
    ref_index: Optional[int] = None

    def __post_init__(self):
        if self.tag not in (MULTIVARIATE, OUTSIDE, REFERENCE):
            raise ValueError(f"unknown model kind {self.tag!r}")
        if self.tag == REFERENCE:
            if self.ref_index is None or self.ref_index < 0:
                raise ValueError("reference kind needs a non-negative ref_index")
        elif self.ref_index is not None:
            raise ValueError(f"{self.tag} kind takes no ref_index")

    @classmethod
    def multivariate(cls) -> "ModelKind":
        return cls(MULTIVARIATE)

    @classmethod
    def outside(cls) -> "ModelKind":
        return cls(OUTSIDE)

    @classmethod
    def reference(cls, ref_index: int = 0) -> "ModelKind":
        return cls(REFERENCE, int(ref_index))

    @property
    def is_multinomial(self) -> bool:
        return self.tag != MULTIVARIATE

    def system_dim(self, m: int) -> int:
        """Dimension of the identified latent system for ``m`` alternatives."""
        return m - 1 if self.tag == REFERENCE else m

    def to_dict(self) -> dict:
        d = {"kind": self.tag}
        if self.ref_index is not None:
            d["ref_index"] = self.ref_index
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelKind":
        if isinstance(d, str):
            d = {"kind": d}
        tag = d.get("kind")
        if tag == REFERENCE:
            return cls.reference(d.get("ref_index", 0))
        return cls(tag)


@dataclass
class ProbitModel:
    """Coefficients and latent covariance of an identified probit system.

    For the reference kind ``sigma`` is the covariance of the differenced
    utilities, i.e. it has one row fewer than there are alternatives.
    """

    beta: np.ndarray
    sigma: np.ndarray
    kind: ModelKind = field(default_factory=ModelKind.outside)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if self.sigma.shape[0] != self.sigma.shape[1]:
            raise ValueError(f"sigma must be square, got {self.sigma.shape}")

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    @cached_property
    def omega(self) -> np.ndarray:
        """Precision matrix ``inv(sigma)``."""
        omega = np.linalg.inv(self.sigma)
        return 0.5 * (omega + omega.T)

    def rescaled(self, c: float) -> "ProbitModel":
        """Observationally equivalent model ``(c * beta, c**2 * sigma)``."""
        return ProbitModel(c * self.beta, (c * c) * self.sigma, self.kind)

    def trace_normalized(self, target: Optional[float] = None) -> "ProbitModel":
        """Representative of the scale class with ``Tr(inv(sigma)) == target``."""
        target = self.dim if target is None else target
        c = np.sqrt(np.trace(self.omega) / target)
        return self.rescaled(c)


@dataclass
class ChoiceObservation:
    """One decision.

    Parameters
    ----------
    x : array, shape (k, p)
        Covariates, one row per displayed alternative.
    outcome :
        Multinomial kinds: 0-based row of ``x`` that was chosen, or ``None``
        for the outside option.  Multivariate kind: 0/1 vector of length k.
    positions : sequence of int, optional
        Model positions occupied by the rows of ``x`` when the choice set is
        smaller than the model; defaults to ``range(k)``.
    """

    x: np.ndarray
    outcome: object
    positions: Optional[Sequence[int]] = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.positions is not None:
            self.positions = tuple(int(j) for j in self.positions)
            if len(self.positions) != self.x.shape[0]:
                raise ValueError("positions must list one model position per row of x")
            if len(set(self.positions)) != len(self.positions):
                raise ValueError("positions must be distinct")
        if isinstance(self.outcome, (list, tuple, np.ndarray)):
            self.outcome = np.asarray(self.outcome, dtype=int)
        elif self.outcome is not None:
            self.outcome = int(self.outcome)

    @property
    def n_alternatives(self) -> int:
        return self.x.shape[0]


@dataclass
class TmvnMoments:
    """Log mass, mean and covariance of a truncated multivariate normal.

    ``converged``, ``sweeps`` and ``residual`` describe the EP run that
    produced the moments; exact or sampled moments leave the defaults.
    """

    log_mass: float
    mean: np.ndarray
    cov: np.ndarray
    converged: bool = True
    sweeps: int = 0
    residual: float = 0.0

    @property
    def mass(self) -> float:
        return float(np.exp(self.log_mass))
