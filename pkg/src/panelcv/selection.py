"""Group-number selection: split-sample cross-validation and information criteria."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import PanelDataset, RunConfig, TimeSplit, split_time
from .errors import PanelError, SelectionError, UnsupportedMethodError
from .estimation import (
    FitResult,
    WeightSet,
    fe_weights,
    fit,
    group_minimize,
    nodewise_fit,
    plain_weights,
    profile_scores,
)
from .models import ModelFamily

log = logging.getLogger(__name__)

METHODS = ("cv", "bic", "pc", "lic", "ht")


def substream_seed(master: int, *keys: int) -> int:
    """Deterministic 63-bit seed for a named substream of ``master``."""
    state = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    return int(state.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class CvDecomposition:
    s_term: float
    d_term: float
    r_term: float

    @property
    def total(self) -> float:
        return self.s_term + self.d_term + 2.0 * self.r_term

    def __add__(self, other: "CvDecomposition") -> "CvDecomposition":
        return CvDecomposition(self.s_term + other.s_term, self.d_term + other.d_term,
                               self.r_term + other.r_term)


@dataclass
class SelectionResult:
    method: str
    g_values: list[int]
    criterion: list[float]
    chosen: int
    decomposition: list[CvDecomposition | None] | None = None
    fits: dict = field(default_factory=dict)
    split: dict | None = None
    invalid: list[int] = field(default_factory=list)
    penalty: list[float] | None = None
    fit_term: list[float] | None = None

    def criterion_at(self, G: int) -> float:
        return self.criterion[self.g_values.index(G)]


# ---------------------------------------------------------------------------
# quadratic criteria


def _score_vectors(data: PanelDataset, family: ModelFamily, per_individual_beta,
                   config: RunConfig | None = None) -> np.ndarray:
    """Time-averaged score (plain) or profile score (fixed effects) per individual."""
    B = np.asarray(per_individual_beta, dtype=float)
    if family.fixed_effects:
        return profile_scores(data, family, B, config)
    y, X = data.responses, data.covariates
    l1 = family.index_derivatives(y, np.einsum("ntp,np->nt", X, B), order=1)[1]
    return np.einsum("nt,ntp->np", l1, X) / X.shape[1]


def _scale(data: PanelDataset, weights: WeightSet) -> float:
    n = data.n_individuals
    return 1.0 / (n * data.n_periods) if weights.kind == "V" else 1.0 / n


def _quadratic(vectors: np.ndarray, forms: np.ndarray) -> np.ndarray:
    return np.einsum("np,npq,nq->n", vectors, forms, vectors)


def q_criterion(data: PanelDataset, family: ModelFamily, coefficients, labels,
                weights: WeightSet, config: RunConfig | None = None) -> float:
    """Weighted squared norm of time-averaged scores, averaged over individuals.

    Without fixed effects this is ``N^-1 sum_i s_i' W_i^-1 s_i``; with fixed
    effects ``(NT)^-1 sum_i U_i' V_i^-2 U_i`` with alpha re-profiled on
    ``data`` at each group's coefficients.
    """
    B = np.asarray(coefficients, dtype=float)[np.asarray(labels)]
    if weights.kind == "W" and weights.n_singular:
        warnings.warn(f"{weights.n_singular} singular W matrices; using pseudo-inverses",
                      RuntimeWarning, stacklevel=2)
    if weights.kind == "V" and weights.n_singular:
        warnings.warn(f"{weights.n_singular} singular V matrices skipped", RuntimeWarning,
                      stacklevel=2)
    vec = _score_vectors(data, family, B, config)
    return float(_scale(data, weights) * _quadratic(vec, weights.quadratic_forms()).sum())


def q_criterion_fe(data: PanelDataset, family: ModelFamily, coefficients, labels,
                   weights: WeightSet, config: RunConfig | None = None) -> float:
    if not family.fixed_effects or weights.kind != "V":
        raise PanelError("q_criterion_fe needs a fixed-effects family and V weights")
    return q_criterion(data, family, coefficients, labels, weights, config)


def evaluation_weights(data: PanelDataset, family: ModelFamily, own_fit: FitResult,
                       config: RunConfig | None = None) -> WeightSet:
    """Weights for evaluating on ``data``, anchored at the fit estimated on ``data`` itself."""
    config = config or RunConfig()
    if family.fixed_effects:
        anchors = own_fit.stage1_coefficients[own_fit.labels]
        return fe_weights(data, family, anchors, own_fit.stage1_alphas,
                          {"anchor": "stage1", "n_groups": own_fit.n_groups})
    if config.w_anchor == "nodewise":
        nw = nodewise_fit(data, family, config)
        return plain_weights(data, family, nw.coefficients, {"anchor": "nodewise"})
    return plain_weights(data, family, own_fit.individual_coefficients(),
                         {"anchor": "fit", "n_groups": own_fit.n_groups})


def _match_groups(train_labels, test_labels, G):
    """Permutation mapping train group g to the test group that shares most members."""
    table = np.zeros((G, G))
    np.add.at(table, (train_labels, test_labels), 1.0)
    rows, cols = linear_sum_assignment(-table)
    perm = np.empty(G, dtype=np.int64)
    perm[rows] = cols
    return perm


def cv_decompose(test_data: PanelDataset, family: ModelFamily, train_fit: FitResult,
                 weights: WeightSet, test_fit: FitResult | None = None,
                 config: RunConfig | None = None) -> CvDecomposition:
    """Split the out-of-sample criterion into discrepancy, fit and cross terms.

    Individuals keep the training memberships. The reference coefficients
    on the evaluation data are, by default, the evaluation-data minimisers
    for those same memberships; when ``test_fit`` is given its groups are
    matched to the training groups by membership overlap and its
    coefficients are used instead.
    """
    labels = train_fit.labels
    G = train_fit.n_groups
    if test_fit is not None:
        if test_fit.n_groups != G:
            raise PanelError(f"fits disagree on the group count: {G} vs {test_fit.n_groups}")
        perm = _match_groups(labels, test_fit.labels, G)
        ref = test_fit.coefficients[perm]
    else:
        ref = group_minimize(test_data, family, labels, train_fit.coefficients, config)
    forms = weights.quadratic_forms()
    a = _score_vectors(test_data, family, train_fit.coefficients[labels], config)
    b = _score_vectors(test_data, family, ref[labels], config)
    delta = a - b
    c = _scale(test_data, weights)
    s = c * float(_quadratic(delta, forms).sum())
    d = c * float(_quadratic(b, forms).sum())
    r = c * float(np.einsum("np,npq,nq->", delta, forms, b))
    return CvDecomposition(s, d, r)


def _fit_or_none(data, family, G, config, seed):
    try:
        return fit(data, family, G, config, seed)
    except (PanelError, np.linalg.LinAlgError, FloatingPointError) as exc:
        warnings.warn(f"fit with G={G} failed: {exc}", RuntimeWarning, stacklevel=3)
        return None


def _cv_at(data: PanelDataset, family: ModelFamily, config: RunConfig, G: int):
    """Criterion, decomposition and fits for one G; ``(nan, None, None)`` on failure."""
    train, test = split_time(data)
    fit_tr = _fit_or_none(train, family, G, config, substream_seed(config.seed, G, 0))
    fit_te = _fit_or_none(test, family, G, config, substream_seed(config.seed, G, 1))
    if fit_tr is None or fit_te is None:
        return math.nan, None, None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            w_te = evaluation_weights(test, family, fit_te, config)
            w_tr = evaluation_weights(train, family, fit_tr, config)
            q1 = q_criterion(test, family, fit_tr.coefficients, fit_tr.labels, w_te, config)
            q2 = q_criterion(train, family, fit_te.coefficients, fit_te.labels, w_tr, config)
            dec = (cv_decompose(test, family, fit_tr, w_te, config=config)
                   + cv_decompose(train, family, fit_te, w_tr, config=config))
    except (PanelError, np.linalg.LinAlgError) as exc:
        warnings.warn(f"CV evaluation at G={G} failed: {exc}", RuntimeWarning, stacklevel=2)
        return math.nan, None, None
    return q1 + q2, dec, {"train": fit_tr, "test": fit_te}


def _sweep(fn, data, family, config, g_values):
    # results come back in G order whatever the worker count
    if config.threads > 1 and len(g_values) > 1:
        n = len(g_values)
        with ProcessPoolExecutor(max_workers=min(config.threads, n)) as pool:
            return list(pool.map(fn, [data] * n, [family] * n, [config] * n, g_values))
    return [fn(data, family, config, G) for G in g_values]


def cv_select(data: PanelDataset, family: ModelFamily, config: RunConfig | None = None,
              keep_fits: bool = True) -> SelectionResult:
    """Choose the group count minimising the two-way split-sample criterion.

    For every G the two halves are fitted independently; each fit is scored
    on the other half with weights anchored on that half's own fit. Ties go
    to the smallest G. With ``config.threads > 1`` the values of G are
    processed in parallel.
    """
    config = config or RunConfig()
    if config.g_max > data.n_individuals / 2:
        raise SelectionError(
            f"g_max={config.g_max} exceeds N/2={data.n_individuals / 2:g}"
        )
    family.check_response(data.responses)
    split_time(data)
    g_values = list(range(config.g_min, config.g_max + 1))
    criterion, decomposition, fits, invalid = [], [], {}, []
    for G, (value, dec, pair) in zip(g_values, _sweep(_cv_at, data, family, config, g_values)):
        if not math.isfinite(value):
            invalid.append(G)
        criterion.append(value)
        decomposition.append(dec)
        if keep_fits and pair is not None:
            fits[G] = pair
    chosen = _argmin(g_values, criterion, "cv")
    return SelectionResult("cv", g_values, criterion, chosen, decomposition, fits,
                           TimeSplit.middle(data.n_periods).as_dict(), invalid)


def _argmin(g_values, criterion, method):
    values = np.array(criterion, dtype=float)
    ok = np.isfinite(values)
    if not ok.any():
        raise SelectionError(f"{method}: every candidate group count failed")
    return int(np.array(g_values)[ok][np.argmin(values[ok])])


# ---------------------------------------------------------------------------
# information criteria


def ic_penalty(method: str, family: ModelFamily, n: int, t: int, p: int, G: int,
               config: RunConfig | None = None, sigma2: float | None = None) -> float:
    """Penalty added to the mean loss for ``G`` groups.

    BIC:  sigma2 (G T + N + p) / (N T) log(N T)
    LIC:  p lambda G, lambda = c (N T)^-1/2 with c = 2/3 for linear models
    PC:   lambda G, lambda = 1 / (5 log T T^1/8), times log(N)^1/8 for
          non-linear models
    """
    config = config or RunConfig()
    k = config.ic_constants
    method = method.lower()
    if method == "bic":
        if sigma2 is None:
            raise PanelError("BIC penalty needs sigma2")
        return sigma2 * (G * t + n + p) / (n * t) * math.log(n * t)
    if method == "pc":
        lam = k.get("pc_lambda")
        if lam is None:
            lam = 1.0 / (5.0 * math.log(t) * t ** 0.125)
            if not family.is_linear:
                lam *= math.log(n) ** 0.125
        return float(lam) * G
    if method == "lic":
        lam = k.get("lic_lambda")
        if lam is None:
            if family.is_linear:
                lam = float(k.get("lic_c", 2.0 / 3.0)) / math.sqrt(n * t)
            elif k.get("lic_probit_literal"):
                lam = math.log(math.log(t) / (4.0 * t))
            else:
                raise UnsupportedMethodError(
                    "LIC for non-linear families needs ic_constants['lic_lambda'] "
                    "(or lic_probit_literal=True)"
                )
        return p * float(lam) * G
    if method == "ht":
        raise UnsupportedMethodError("the HT sequential test is not implemented")
    raise UnsupportedMethodError(f"unknown information criterion {method!r}")


def _ic_fit(data, family, config, G):
    return _fit_or_none(data, family, G, config, substream_seed(config.seed, G, 2))


def ic_select(data: PanelDataset, family: ModelFamily, method: str,
              config: RunConfig | None = None, keep_fits: bool = True) -> SelectionResult:
    """Full-sample fits per G scored by mean (profile) loss plus a penalty."""
    config = config or RunConfig()
    method = method.lower()
    if method == "bic" and not family.is_linear:
        raise UnsupportedMethodError("BIC applies to linear panel models only")
    if method not in ("bic", "pc", "lic"):
        raise UnsupportedMethodError(f"information criterion {method!r} is not available")
    n, t, p = data.shape
    # surfaces a missing non-linear LIC tuning before any fitting
    if method != "bic":
        ic_penalty(method, family, n, t, p, 1, config)
    g_values = list(range(config.g_min, config.g_max + 1))
    fits, fit_term, invalid = {}, [], []
    for G, f in zip(g_values, _sweep(_ic_fit, data, family, config, g_values)):
        fits[G] = f
        if f is None:
            invalid.append(G)
            fit_term.append(math.nan)
        else:
            fit_term.append(f.final_loss)
    sigma2 = None
    if method == "bic":
        g_max_fit = fits.get(config.g_max)
        if g_max_fit is None:
            raise SelectionError("BIC needs a successful fit at g_max")
        dof = n * t - config.g_max * t - n - p
        if dof <= 0:
            raise SelectionError(f"BIC variance estimate has non-positive dof {dof}")
        sigma2 = g_max_fit.final_loss * n * t / dof
    penalty = [ic_penalty(method, family, n, t, p, G, config, sigma2) for G in g_values]
    criterion = [ft + pen for ft, pen in zip(fit_term, penalty)]
    chosen = _argmin(g_values, criterion, method)
    return SelectionResult(method, g_values, criterion, chosen, None,
                           fits if keep_fits else {}, None, invalid, penalty, fit_term)


def select(data: PanelDataset, family: ModelFamily, method: str,
           config: RunConfig | None = None, keep_fits: bool = True) -> SelectionResult:
    method = method.lower()
    if method == "cv":
        return cv_select(data, family, config, keep_fits)
    return ic_select(data, family, method, config, keep_fits)
