from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainMismatchError, InvalidInputError
from .measures import WEIGHT_SUM_TOL, BoxDomain, CostFunction, DiscreteMeasure


@dataclass(frozen=True, eq=False)
class BarycenterProblem:
    """K weighted marginals with inner strength ``lam`` and outer strength ``tau``.

    The barycenter minimizes ``sum_k w_k T_lam(mu, nu_k) + tau H(mu)`` over
    probability measures on ``domain``.
    """

    marginals: Sequence[DiscreteMeasure]
    weights: np.ndarray
    lam: float
    tau: float
    domain: BoxDomain
    cost: CostFunction = field(default_factory=CostFunction.squared_half)

    def __post_init__(self):
        marginals = tuple(self.marginals)
        if len(marginals) < 1:
            raise InvalidInputError("need at least one marginal")
        weights = np.asarray(self.weights, dtype=float).ravel()
        if weights.shape[0] != len(marginals):
            raise InvalidInputError("one weight per marginal is required")
        if np.any(weights < 0) or abs(weights.sum() - 1) > WEIGHT_SUM_TOL:
            raise InvalidInputError("weights must be nonnegative and sum to 1")
        if not self.lam > 0:
            raise InvalidInputError("lam must be positive")
        if not self.tau >= 0:
            raise InvalidInputError("tau must be nonnegative")
        for k, nu in enumerate(marginals):
            if nu.dim != self.domain.dim:
                raise DomainMismatchError(f"marginal {k} has the wrong dimension")
            if not np.all(self.domain.contains(nu.points)):
                raise DomainMismatchError(f"marginal {k} has atoms outside the domain")
        weights.setflags(write=False)
        object.__setattr__(self, "marginals", marginals)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "tau", float(self.tau))

    @classmethod
    def uniform_weights(cls, marginals, lam, tau, domain, cost=None) -> "BarycenterProblem":
        K = len(marginals)
        return cls(marginals, np.full(K, 1.0 / K), lam, tau, domain, cost or CostFunction.squared_half())

    @property
    def K(self) -> int:
        return len(self.marginals)

    def with_params(self, lam=None, tau=None, marginals=None) -> "BarycenterProblem":
        return BarycenterProblem(
            self.marginals if marginals is None else marginals,
            self.weights,
            self.lam if lam is None else lam,
            self.tau if tau is None else tau,
            self.domain,
            self.cost,
        )
