"""Seeded simulators for the grouped panel designs used in the Monte Carlo study.

Designs
-------
``1``/``1FE``   linear static,  Y = b'x + a_i + e
``2``/``2FE``   linear dynamic, Y = g Y_{t-1} + b'x + a_i + e
``3``           dynamic probit, Y = 1(g Y_{t-1} + b'x >= e)
``4``           static Poisson, Y ~ Poisson(exp(b'x))

Covariates are ``x = (0.2 a_i + e1, 0.2 a_i + e2)`` with standard normal
``e``; fixed effects ``a_i ~ U[-1, 1]`` in the FE variants and zero
otherwise. Design 4 draws ``x ~ N(0, I_2)`` with no fixed effect. Dynamic
designs run ``burn_in`` discarded periods from ``Y = 0``.

Every individual draws from its own Philox substream keyed by
``(seed, i)``, so panels do not depend on generation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PanelDataset, make_lagged, write_csv
from .errors import SpecError
from .estimation import GroupAssignment
from .models import ModelFamily

DEFAULT_BETAS = {
    "1": [(0.5, 0.5), (0.56, 0.44), (0.44, 0.56), (0.38, 0.62)],
    "1FE": [(1.4, 0.6), (1.0, 1.0), (0.6, 1.4), (0.2, 1.8)],
    "2": [(0.1, 0.3, 0.7), (0.1, 0.5, 0.5), (0.1, 0.7, 0.3), (0.1, 0.1, 0.9)],
    "2FE": [(0.1, 1.4, 0.6), (0.1, 1.0, 1.0), (0.1, 0.6, 1.4), (0.1, 0.2, 1.8)],
    "3": [(0.1, 0.3, 1.7), (0.1, 0.6, 1.4), (0.1, 0.9, 1.1), (0.1, 1.2, 0.8)],
    "4": [(0.35, 0.65), (0.5, 0.5), (0.2, 0.8), (0.65, 0.35)],
}

DGP_IDS = tuple(DEFAULT_BETAS)

_FAMILIES = {
    "1": ModelFamily("linear"),
    "1FE": ModelFamily("linear", True),
    "2": ModelFamily("linear-dyn"),
    "2FE": ModelFamily("linear-dyn", True),
    "3": ModelFamily("probit-dyn"),
    "4": ModelFamily("poisson"),
}


def dgp_family(dgp: str) -> ModelFamily:
    """Estimation family matching a design."""
    return _FAMILIES[_normalize(dgp)]


def _normalize(dgp) -> str:
    key = str(dgp).upper().replace(" ", "")
    if key not in DEFAULT_BETAS:
        raise SpecError(f"unknown DGP {dgp!r}; expected one of {DGP_IDS}")
    return key


@dataclass
class DgpSpec:
    dgp: str
    n: int
    t: int
    n_groups: int = 4
    betas: np.ndarray | None = None
    burn_in: int = 100
    seed: int = 0
    allow_uneven: bool = False

    def __post_init__(self):
        self.dgp = _normalize(self.dgp)
        if self.betas is None:
            betas = np.array(DEFAULT_BETAS[self.dgp], dtype=float)
            if self.n_groups != betas.shape[0]:
                raise SpecError(
                    f"default coefficients have {betas.shape[0]} groups; pass betas for G0={self.n_groups}"
                )
        else:
            betas = np.atleast_2d(np.asarray(self.betas, dtype=float))
            if betas.shape[0] != self.n_groups:
                raise SpecError(f"betas has {betas.shape[0]} rows for {self.n_groups} groups")
        self.betas = betas
        if self.n < self.n_groups or self.t < 1:
            raise SpecError(f"invalid panel size N={self.n}, T={self.t}")
        if self.n % self.n_groups and not self.allow_uneven:
            raise SpecError(f"N={self.n} is not divisible by G0={self.n_groups}")
        if self.burn_in < 0:
            raise SpecError("burn_in must be non-negative")

    @property
    def dynamic(self) -> bool:
        return self.dgp in ("2", "2FE", "3")

    @property
    def fixed_effects(self) -> bool:
        return self.dgp.endswith("FE")

    @property
    def family(self) -> ModelFamily:
        return dgp_family(self.dgp)


@dataclass
class Simulation:
    data: PanelDataset
    assignment: GroupAssignment
    alphas: np.ndarray
    # responses before the first kept period (dynamic designs), shape (N,)
    initial_response: np.ndarray | None = None
    spec: DgpSpec | None = field(default=None, repr=False)

    def write(self, directory: str | Path, stem: str = "panel") -> tuple[Path, Path]:
        """Write the long-format CSV plus a JSON truth sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{stem}.csv"
        truth_path = directory / f"{stem}_truth.json"
        write_csv(self.data, csv_path)
        truth = {
            "dgp": self.spec.dgp if self.spec else None,
            "n_groups": self.assignment.n_groups,
            "memberships": self.assignment.memberships.tolist(),
            "alphas": self.alphas.tolist(),
            "betas": self.spec.betas.tolist() if self.spec else None,
            "lag_column": self.data.lag_column,
        }
        truth_path.write_text(json.dumps(truth, indent=1))
        return csv_path, truth_path


def true_labels(n: int, n_groups: int) -> np.ndarray:
    """Consecutive blocks: the first N/G0 individuals form group 0, and so on.

    A remainder goes one each to the earliest groups.
    """
    base, extra = divmod(n, n_groups)
    sizes = [base + (1 if g < extra else 0) for g in range(n_groups)]
    return np.repeat(np.arange(n_groups), sizes)


def _individual_rng(seed: int, i: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(i),))
    return np.random.Generator(np.random.Philox(ss))


def _simulate_individual(spec: DgpSpec, beta: np.ndarray, rng: np.random.Generator):
    periods = spec.t + (spec.burn_in if spec.dynamic else 0)
    alpha = rng.uniform(-1.0, 1.0) if spec.fixed_effects else 0.0
    if spec.dgp == "4":
        x = rng.standard_normal((periods, 2))
        y = rng.poisson(np.exp(x @ beta)).astype(float)
        return y, x, alpha, None
    x = 0.2 * alpha + rng.standard_normal((periods, 2))
    eps = rng.standard_normal(periods)
    if not spec.dynamic:
        return x @ beta + alpha + eps, x, alpha, None
    gamma, b = beta[0], beta[1:]
    index = x @ b
    y = np.empty(periods + 1)
    y[0] = 0.0
    for s in range(periods):
        if spec.dgp == "3":
            y[s + 1] = 1.0 if gamma * y[s] + index[s] >= eps[s] else 0.0
        else:
            y[s + 1] = gamma * y[s] + index[s] + alpha + eps[s]
    kept = slice(periods - spec.t, periods)
    # y[k] is the response before period k; y[k + 1] the response at period k
    lag = y[:-1][kept]
    return y[1:][kept], np.column_stack([lag, x[kept]]), alpha, lag[0]


def simulate(spec: DgpSpec) -> Simulation:
    """Draw one panel with its true memberships and fixed effects."""
    labels = true_labels(spec.n, spec.n_groups)
    ys, xs, alphas, init = [], [], [], []
    for i in range(spec.n):
        y, x, a, y0 = _simulate_individual(spec, spec.betas[labels[i]], _individual_rng(spec.seed, i))
        ys.append(y)
        xs.append(x)
        alphas.append(a)
        init.append(y0)
    data = PanelDataset(np.array(ys), np.array(xs), lag_column=0 if spec.dynamic else None)
    return Simulation(
        data,
        GroupAssignment(labels, spec.n_groups),
        np.array(alphas),
        np.array(init) if spec.dynamic else None,
        spec,
    )


def unlagged(sim: Simulation) -> PanelDataset:
    """Dynamic panel without its lag column, prefixed by the initial response.

    Passing the result through :func:`make_lagged` reproduces ``sim.data``.
    """
    data = sim.data
    if data.lag_column is None:
        return data
    keep = [k for k in range(data.n_covariates) if k != data.lag_column]
    y = np.column_stack([sim.initial_response, data.responses])
    x = data.covariates[:, :, keep]
    # the initial period carries no covariates of its own
    x = np.concatenate([np.zeros((x.shape[0], 1, x.shape[2])), x], axis=1)
    return PanelDataset(y, x, data.individual_ids,
                        np.arange(data.time_index[0] - 1, data.time_index[-1] + 1))


# ---------------------------------------------------------------------------


@dataclass
class MomentRow:
    name: str
    sample: float
    target: float | None
    tolerance: float | None
    passed: bool


@dataclass
class MomentsReport:
    dgp: str
    n_draws: int
    rows: list[MomentRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def as_dict(self) -> dict:
        return {"dgp": self.dgp, "n_draws": self.n_draws, "passed": self.passed,
                "rows": [r.__dict__ for r in self.rows]}


def dgp_moments_check(spec: DgpSpec, n_draws: int = 1_000_000, rel_tol: float = 0.02) -> MomentsReport:
    """Compare simulated marginal moments with their analytic values.

    Uses ``spec.n`` individuals and enough periods to reach ``n_draws``
    observations.
    """
    t = max(1, math.ceil(n_draws / spec.n))
    big = DgpSpec(spec.dgp, spec.n, t, spec.n_groups, spec.betas, spec.burn_in, spec.seed,
                  spec.allow_uneven)
    sim = simulate(big)
    data = sim.data
    x = data.covariates[:, :, 1:] if spec.dynamic else data.covariates
    y = data.responses
    var_alpha = 1.0 / 3.0 if spec.fixed_effects else 0.0
    x_var = 1.0 if spec.dgp == "4" else 1.0 + 0.04 * var_alpha
    rows = []

    def add(name, sample, target, tol):
        ok = True if target is None else abs(sample - target) <= tol
        rows.append(MomentRow(name, float(sample), target, tol, bool(ok)))

    def mean_tol(between, within):
        # four standard errors; the fixed effects contribute only N independent draws
        return 4.0 * math.sqrt(between / spec.n + within / y.size)

    for k in range(x.shape[2]):
        add(f"mean(x{k + 1})", x[:, :, k].mean(), 0.0, mean_tol(0.04 * var_alpha, 1.0))
        add(f"var(x{k + 1})", x[:, :, k].var(), x_var, rel_tol * x_var)
    a = sim.alphas
    add("alpha within [-1, 1]", float(np.all(np.abs(a) <= 1.0)), 1.0, 0.0)
    if spec.fixed_effects:
        add("var(alpha)", a.var(), var_alpha, max(0.1 * var_alpha, 3.0 * math.sqrt(2.0 / a.size) * var_alpha))
    labels = sim.assignment.labels
    weights = np.bincount(labels, minlength=spec.n_groups) / spec.n
    betas = spec.betas
    if spec.dgp in ("1", "1FE"):
        s = betas.sum(axis=1)
        between = float(weights @ ((1 + 0.2 * s) ** 2 * var_alpha))
        within = float(weights @ ((betas ** 2).sum(axis=1) + 1.0))
        y_var = between + within
        add("mean(y)", y.mean(), 0.0, mean_tol(between, within))
        add("var(y)", y.var(), y_var, rel_tol * y_var)
    elif spec.dgp == "4":
        y_mean = float(weights @ np.exp(0.5 * (betas ** 2).sum(axis=1)))
        add("mean(y)", y.mean(), y_mean, rel_tol * y_mean)
    elif spec.dgp == "3":
        add("y in {0, 1}", float(np.all((y == 0) | (y == 1))), 1.0, 0.0)
        add("mean(y)", y.mean(), None, None)
    else:
        add("mean(y)", y.mean(), None, None)
        add("var(y)", y.var(), None, None)
    return MomentsReport(spec.dgp, int(y.size), rows)


__all__ = [
    "DEFAULT_BETAS",
    "DGP_IDS",
    "DgpSpec",
    "Simulation",
    "dgp_family",
    "dgp_moments_check",
    "make_lagged",
    "simulate",
    "true_labels",
    "unlagged",
]
