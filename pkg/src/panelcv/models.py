"""Single-index loss families with analytic derivatives.

Every family is a loss of the index ``eta = x'beta (+ alpha)``, so the
beta- and alpha-derivatives all follow from the first three derivatives of
the loss in ``eta``. The lag coefficient of a dynamic family is simply the
first entry of ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .errors import DomainError

FAMILY_NAMES = ("linear", "linear-dyn", "probit-dyn", "poisson")

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ModelFamily:
    """A loss family, optionally with an individual fixed effect."""

    name: str
    fixed_effects: bool = False

    def __post_init__(self):
        if self.name not in FAMILY_NAMES:
            raise ValueError(f"unknown family {self.name!r}; expected one of {FAMILY_NAMES}")

    @property
    def link(self) -> str:
        if self.name.startswith("linear"):
            return "gaussian"
        if self.name.startswith("probit"):
            return "probit"
        return "poisson"

    @property
    def dynamic(self) -> bool:
        return self.name.endswith("-dyn")

    @property
    def is_linear(self) -> bool:
        return self.link == "gaussian"

    @property
    def tag(self) -> str:
        return self.name + ("+fe" if self.fixed_effects else "")

    def check_response(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if self.link == "probit" and not np.all((y == 0.0) | (y == 1.0)):
            raise DomainError("probit responses must be 0 or 1")
        if self.link == "poisson" and not np.all((y >= 0.0) & (y == np.floor(y))):
            raise DomainError("poisson responses must be non-negative integers")

    def index_derivatives(self, y, eta, order: int = 2) -> tuple[np.ndarray, ...]:
        """Loss and its first ``order`` derivatives in the index, elementwise.

        Returns ``(L, L', L'', ...)`` up to ``order <= 3``.
        """
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.link == "gaussian":
            r = eta - y
            out = [0.5 * r * r, r, np.ones_like(r), np.zeros_like(r)]
        elif self.link == "poisson":
            mu = np.exp(eta)
            out = [mu - y * eta, mu - y, mu, mu]
        else:
            q = 2.0 * y - 1.0
            u = q * eta
            logcdf = log_ndtr(u)
            mills = np.exp(-0.5 * u * u - _LOG_SQRT_2PI - logcdf)
            h = mills * (u + mills)
            out = [-logcdf, -q * mills, h, q * (mills - h * (u + 2.0 * mills))]
        return tuple(out[: order + 1])

    def loss_values(self, y, eta) -> np.ndarray:
        return self.index_derivatives(y, eta, order=0)[0]

    def mean(self, eta) -> np.ndarray:
        """Conditional mean of the response given the index (used for prediction)."""
        eta = np.asarray(eta, dtype=float)
        if self.link == "gaussian":
            return eta
        if self.link == "poisson":
            return np.exp(eta)
        return ndtr(eta)


def get_family(name: str, fixed_effects: bool = False) -> ModelFamily:
    if name.endswith("+fe"):
        name, fixed_effects = name[:-3], True
    return ModelFamily(name, fixed_effects)


@dataclass(frozen=True)
class ObsDerivatives:
    """Per-observation loss derivatives. Alpha entries are None without a fixed effect."""

    loss: float
    score: np.ndarray
    hessian: np.ndarray
    l_alpha: float | None = None
    l_alphaalpha: float | None = None
    l_alphabeta: np.ndarray | None = None


def _index(family: ModelFamily, x, beta, alpha):
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if x.shape[-1] != beta.shape[-1]:
        raise ValueError(f"covariate dimension {x.shape[-1]} != coefficient dimension {beta.shape[-1]}")
    if family.fixed_effects and alpha is None:
        raise ValueError("alpha is required for a fixed-effects family")
    if not family.fixed_effects and alpha is not None:
        raise ValueError("alpha given for a family without fixed effects")
    eta = x @ beta
    return eta + alpha if alpha is not None else eta


def loss(family: ModelFamily, y: float, x, beta, alpha: float | None = None) -> float:
    """Loss of one observation ``z = (y, x)``."""
    family.check_response(y)
    return float(family.loss_values(y, _index(family, x, beta, alpha)))


def derivatives(family: ModelFamily, y: float, x, beta, alpha: float | None = None) -> ObsDerivatives:
    family.check_response(y)
    x = np.asarray(x, dtype=float)
    eta = _index(family, x, beta, alpha)
    l0, l1, l2 = (float(v) for v in family.index_derivatives(y, eta, order=2))
    hess = l2 * np.outer(x, x)
    hess = 0.5 * (hess + hess.T)
    if not family.fixed_effects:
        return ObsDerivatives(l0, l1 * x, hess)
    return ObsDerivatives(l0, l1 * x, hess, l1, l2, l2 * x)
