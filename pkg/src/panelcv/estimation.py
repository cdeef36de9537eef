"""K-means type estimation of grouped panel models.

``fit_groups`` alternates membership and coefficient updates on the plain
loss. ``fit_groups_fe`` does the same on the fixed-effect profile loss and
then re-estimates each group's coefficients by minimising the reweighted
quadratic criterion built from the profile score and its Jacobian.

Arrays follow the panel layout: responses ``(N, T)``, covariates
``(N, T, p)``, coefficient tables ``(G, p)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import PanelDataset, RunConfig
from .errors import InfeasibleError, SingularProfileError
from .models import ModelFamily

log = logging.getLogger(__name__)

RIDGE = 1e-8
COND_LIMIT = 1e8
ALPHA_BRACKET = 40.0


@dataclass(frozen=True)
class GroupAssignment:
    """Group labels, stored 0-based; ``memberships`` gives the 1-based view."""

    labels: np.ndarray
    n_groups: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def memberships(self) -> np.ndarray:
        return self.labels + 1

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_groups)

    @property
    def complete(self) -> bool:
        return bool(np.all(self.sizes > 0))


@dataclass
class FitResult:
    n_groups: int
    coefficients: np.ndarray
    assignment: GroupAssignment
    alphas: np.ndarray | None
    final_loss: float
    restart_losses: list[float]
    iterations: int
    converged: bool
    trace: list[float]
    family: str
    flags: dict = field(default_factory=dict)
    # fixed-effect fits only: first-stage estimates that anchor the V weights
    stage1_coefficients: np.ndarray | None = None
    stage1_alphas: np.ndarray | None = None
    stage2_objective: list[tuple[float, float]] | None = None

    @property
    def labels(self) -> np.ndarray:
        return self.assignment.labels

    def individual_coefficients(self) -> np.ndarray:
        return self.coefficients[self.labels]


@dataclass
class WeightSet:
    """Per-individual weighting matrices for the quadratic criteria.

    ``kind`` is ``"W"`` (time-averaged Hessian, enters as ``W^-1``) or
    ``"V"`` (profile-score Jacobian, enters as ``V^-2``).
    """

    kind: str
    matrices: np.ndarray
    singular: np.ndarray
    anchor: dict = field(default_factory=dict)

    def quadratic_forms(self) -> np.ndarray:
        """The matrices that weight the score vectors, shape (N, p, p).

        Singular W matrices fall back to the pseudo-inverse; singular V
        matrices get a zero form so the individual drops out of the sum.
        """
        mats = self.matrices
        out = np.zeros_like(mats)
        ok = ~self.singular
        if self.kind == "W":
            if ok.any():
                out[ok] = np.linalg.inv(mats[ok])
            if (~ok).any():
                out[~ok] = np.linalg.pinv(mats[~ok], hermitian=True)
        else:
            if ok.any():
                vinv = np.linalg.inv(mats[ok])
                out[ok] = vinv @ vinv
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    @property
    def n_singular(self) -> int:
        return int(self.singular.sum())


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _ill_conditioned(mats: np.ndarray) -> np.ndarray:
    mats = np.asarray(mats, dtype=float)
    if mats.shape[-1] == 0:
        return np.zeros(mats.shape[:-2], dtype=bool)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(mats)
    return ~np.isfinite(cond) | (cond > COND_LIMIT)


def _index(X: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Index for every individual under every coefficient row: (N, G, T)."""
    return np.einsum("ntp,gp->ngt", X, B)


# ---------------------------------------------------------------------------
# alpha profiling


def _profile_alpha_batch(family: ModelFamily, y: np.ndarray, eta0: np.ndarray,
                         max_iter: int = 100, tol: float = 1e-10):
    """Minimise ``mean_t L(y_t, eta0_t + a)`` over scalar ``a`` for each series.

    ``eta0`` has shape ``(..., T)`` and ``y`` broadcasts against it. Returns
    ``(alpha, converged)`` of shape ``eta0.shape[:-1]``.
    """
    y = np.broadcast_to(y, eta0.shape)
    if family.link == "gaussian":
        a = np.mean(y - eta0, axis=-1)
        return a, np.ones(a.shape, dtype=bool)
    if family.link == "poisson":
        total = y.sum(axis=-1)
        with np.errstate(divide="ignore"):
            a = np.log(total) - logsumexp(eta0, axis=-1)
        ok = total > 0
        # all-zero series: the minimiser runs off to -inf
        bound = -(ALPHA_BRACKET + np.max(np.abs(eta0), axis=-1))
        return np.where(ok, a, bound), ok

    span = ALPHA_BRACKET + np.max(np.abs(eta0), axis=-1)
    lo, hi = -span, span.copy()
    a = np.zeros(eta0.shape[:-1])
    done = np.zeros(a.shape, dtype=bool)
    for _ in range(max_iter):
        _, l1, l2 = family.index_derivatives(y, eta0 + a[..., None], order=2)
        s = l1.mean(axis=-1)
        h = l2.mean(axis=-1)
        lo = np.where(s < 0, a, lo)
        hi = np.where(s > 0, a, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(h > 0, -s / h, np.nan)
        cand = a + step
        inside = np.isfinite(cand) & (cand > lo) & (cand < hi)
        new = np.where(inside, cand, 0.5 * (lo + hi))
        new = np.where(done, a, new)
        moved = np.abs(new - a)
        a = new
        done |= moved <= tol
        if done.all():
            break
    # a minimiser beyond the bracket means the series is separated
    at_edge = (np.abs(a - (-span)) <= tol) | (np.abs(a - span) <= tol)
    return a, done & ~at_edge


def profile_alpha(y, x, family: ModelFamily, beta, config: RunConfig | None = None):
    """Fixed effect that minimises one individual's time-averaged loss at ``beta``.

    Returns ``(alpha, converged)``; on non-convergence the last iterate is
    returned with ``converged=False``.
    """
    config = config or RunConfig()
    y = np.asarray(y, dtype=float)
    eta0 = np.asarray(x, dtype=float) @ np.asarray(beta, dtype=float)
    a, ok = _profile_alpha_batch(family, y, eta0, config.alpha_max_iter, config.alpha_tol)
    return float(a), bool(ok)


def _profiled_losses(family, y, X, B, config):
    """Profiled per-individual mean losses for every group: (N, G), alphas (N, G)."""
    eta0 = _index(X, B)
    a, ok = _profile_alpha_batch(family, y[:, None, :], eta0, config.alpha_max_iter, config.alpha_tol)
    losses = family.loss_values(y[:, None, :], eta0 + a[..., None]).mean(axis=-1)
    return losses, a, ok


def _plain_losses(family, y, X, B):
    return family.loss_values(y[:, None, :], _index(X, B)).mean(axis=-1)


# ---------------------------------------------------------------------------
# profile score and its Jacobian


def _profile_score(family, y, X, B, a, jacobian=True):
    """Time-averaged profile score and its beta-Jacobian at fixed alpha.

    ``y`` (N, T), ``X`` (N, T, p), ``B`` (N, p), ``a`` (N,). Returns
    ``(U, J, d)`` with ``d`` the averaged second alpha-derivative.
    """
    eta = np.einsum("ntp,np->nt", X, B) + a[:, None]
    order = 3 if jacobian else 2
    derivs = family.index_derivatives(y, eta, order=order)
    l1, l2 = derivs[1], derivs[2]
    m = l1.mean(axis=1)
    d = l2.mean(axis=1)
    c = np.einsum("nt,ntp->np", l2, X) / X.shape[1]
    score = np.einsum("nt,ntp->np", l1, X) / X.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = m / d
    U = score - ratio[:, None] * c
    if not jacobian:
        return U, None, d
    l3 = derivs[3]
    T = X.shape[1]
    hbb = np.einsum("nt,ntp,ntq->npq", l2, X, X) / T
    e3 = np.einsum("nt,ntp,ntq->npq", l3, X, X) / T
    e = np.einsum("nt,ntp->np", l3, X) / T
    with np.errstate(divide="ignore", invalid="ignore"):
        J = (
            hbb
            - np.einsum("np,nq->npq", c, c) / d[:, None, None]
            - ratio[:, None, None] * e3
            + (ratio / d)[:, None, None] * np.einsum("np,nq->npq", c, e)
        )
    return U, J, d


def _check_profile(d):
    if np.any(np.abs(d) <= 1e-12):
        raise SingularProfileError("averaged second alpha-derivative is numerically zero")


def u_bar(y, x, family: ModelFamily, beta, alpha: float) -> np.ndarray:
    """Time-averaged profile score of one individual at ``(beta, alpha)``."""
    y = np.asarray(y, dtype=float)[None]
    X = np.asarray(x, dtype=float)[None]
    U, _, d = _profile_score(family, y, X, np.asarray(beta, dtype=float)[None],
                             np.array([float(alpha)]), jacobian=False)
    _check_profile(d)
    return U[0]


def u_bar_jacobian(y, x, family: ModelFamily, beta, alpha: float) -> np.ndarray:
    """Analytic beta-Jacobian of :func:`u_bar` at fixed alpha (not symmetrised)."""
    y = np.asarray(y, dtype=float)[None]
    X = np.asarray(x, dtype=float)[None]
    _, J, d = _profile_score(family, y, X, np.asarray(beta, dtype=float)[None],
                             np.array([float(alpha)]))
    _check_profile(d)
    return J[0]


def v_matrix(y, x, family: ModelFamily, beta, alpha: float) -> tuple[np.ndarray, bool]:
    """Symmetrised profile-score Jacobian and a flag for condition number above 1e8."""
    V = _sym(u_bar_jacobian(y, x, family, beta, alpha))
    return V, bool(_ill_conditioned(V))


def weight_matrix(y, x, family: ModelFamily, beta) -> tuple[np.ndarray, bool]:
    """Time-averaged loss Hessian at ``beta`` and a flag for indefinite/ill-conditioned W."""
    W = _hessian_average(family, np.asarray(y, float)[None], np.asarray(x, float)[None],
                         np.asarray(beta, float)[None])[0]
    return W, bool(_w_flags(W[None])[0])


def _hessian_average(family, y, X, B):
    eta = np.einsum("ntp,np->nt", X, B)
    l2 = family.index_derivatives(y, eta, order=2)[2]
    return _sym(np.einsum("nt,ntp,ntq->npq", l2, X, X) / X.shape[1])


def _w_flags(W):
    eig_min = np.linalg.eigvalsh(W)[:, 0] if W.shape[-1] else np.zeros(W.shape[0])
    return (eig_min < -1e-8) | _ill_conditioned(W)


def plain_weights(data: PanelDataset, family: ModelFamily, anchors: np.ndarray,
                  anchor: dict | None = None) -> WeightSet:
    """W weights for every individual, anchored at per-individual coefficients (N, p)."""
    W = _hessian_average(family, data.responses, data.covariates, np.asarray(anchors, float))
    return WeightSet("W", W, _w_flags(W), dict(anchor or {}))


def fe_weights(data: PanelDataset, family: ModelFamily, anchors: np.ndarray,
               alphas: np.ndarray, anchor: dict | None = None) -> WeightSet:
    """V weights for every individual at per-individual (beta, alpha) anchors."""
    _, J, d = _profile_score(family, data.responses, data.covariates,
                             np.asarray(anchors, float), np.asarray(alphas, float))
    V = _sym(J)
    singular = _ill_conditioned(V) | (np.abs(d) <= 1e-12) | ~np.all(np.isfinite(V), axis=(1, 2))
    V = np.where(np.isfinite(V), V, 0.0)
    return WeightSet("V", V, singular, dict(anchor or {}))


# ---------------------------------------------------------------------------
# node-wise estimators


def _batched_newton(f, grad_hess, B0, max_iter, tol=1e-10):
    """Damped Newton for N independent problems. Returns (B, ridge_used, converged)."""
    B = np.array(B0, dtype=float)
    n, p = B.shape
    ridge = np.zeros(n, dtype=bool)
    conv = np.zeros(n, dtype=bool)
    fcur = f(B)
    eye = np.eye(p)
    for _ in range(max_iter):
        g, H = grad_hess(B)
        eig_min = np.linalg.eigvalsh(H)[:, 0]
        scale = np.maximum(1.0, np.abs(np.trace(H, axis1=1, axis2=2)))
        weak = eig_min <= RIDGE * scale
        ridge |= weak
        H = H + np.where(weak, RIDGE, 0.0)[:, None, None] * eye
        step = -np.linalg.solve(H, g[..., None])[..., 0]
        step[conv] = 0.0
        t = np.ones(n)
        accepted = np.zeros(n, dtype=bool)
        for _ in range(40):
            trial = B + t[:, None] * step
            ftrial = f(trial)
            ok = ~accepted & (ftrial <= fcur + 1e-13 * np.abs(fcur))
            B = np.where(ok[:, None], trial, B)
            fcur = np.where(ok, ftrial, fcur)
            accepted |= ok
            if accepted.all():
                break
            t = np.where(accepted, t, 0.5 * t)
        moved = np.max(np.abs(t[:, None] * step), axis=1)
        conv |= (moved <= tol * (1.0 + np.max(np.abs(B), axis=1))) | ~accepted
        if conv.all():
            break
    return B, ridge, conv


def _gaussian_nodewise(y, X):
    T = X.shape[1]
    A = np.einsum("ntp,ntq->npq", X, X) / T
    b = np.einsum("ntp,nt->np", X, y) / T
    singular = _ill_conditioned(A)
    A = A + np.where(singular, RIDGE, 0.0)[:, None, None] * np.eye(X.shape[2])
    return np.linalg.solve(A, b[..., None])[..., 0], singular


def _within(y, X):
    return y - y.mean(axis=1, keepdims=True), X - X.mean(axis=1, keepdims=True)


@dataclass
class NodewiseResult:
    coefficients: np.ndarray
    flagged: np.ndarray
    alphas: np.ndarray | None = None


def nodewise_fit(data: PanelDataset, family: ModelFamily, config: RunConfig | None = None) -> NodewiseResult:
    """Per-individual minimiser of the time-averaged (profile) loss.

    Individuals whose design is singular, or whose Newton iteration does not
    settle (e.g. separated probit series), get a ridge fallback and are
    flagged.
    """
    config = config or RunConfig()
    family.check_response(data.responses)
    y, X = data.responses, data.covariates
    n, T, p = data.shape
    if T < p + int(family.fixed_effects) + 1:
        log.warning("T=%d is too short for node-wise fits with p=%d", T, p)
    if family.is_linear:
        if family.fixed_effects:
            yd, Xd = _within(y, X)
            G, flagged = _gaussian_nodewise(yd, Xd)
            alphas = np.mean(y - np.einsum("ntp,np->nt", X, G), axis=1)
            return NodewiseResult(G, flagged, alphas)
        G, flagged = _gaussian_nodewise(y, X)
        return NodewiseResult(G, flagged)

    if family.fixed_effects:
        def prof(B):
            eta0 = np.einsum("ntp,np->nt", X, B)
            a, _ = _profile_alpha_batch(family, y, eta0, config.alpha_max_iter, config.alpha_tol)
            return eta0, a

        def f(B):
            eta0, a = prof(B)
            return family.loss_values(y, eta0 + a[:, None]).mean(axis=1)

        def gh(B):
            _, a = prof(B)
            U, J, _ = _profile_score(family, y, X, B, a)
            return U, _sym(np.nan_to_num(J))
    else:
        def f(B):
            return family.loss_values(y, np.einsum("ntp,np->nt", X, B)).mean(axis=1)

        def gh(B):
            _, l1, l2 = family.index_derivatives(y, np.einsum("ntp,np->nt", X, B), order=2)
            g = np.einsum("nt,ntp->np", l1, X) / T
            H = np.einsum("nt,ntp,ntq->npq", l2, X, X) / T
            return g, _sym(H)

    B, ridge, conv = _batched_newton(f, gh, np.zeros((n, p)), config.newton_max_iter)
    alphas = None
    if family.fixed_effects:
        alphas = _profile_alpha_batch(family, y, np.einsum("ntp,np->nt", X, B),
                                      config.alpha_max_iter, config.alpha_tol)[0]
    return NodewiseResult(B, ridge | ~conv | ~np.all(np.isfinite(B), axis=1), alphas)


# ---------------------------------------------------------------------------
# group-level coefficient updates


class _GaussianUpdater:
    """Closed-form pooled least squares from per-individual moments."""

    def __init__(self, y, X):
        T = X.shape[1]
        self.A = np.einsum("ntp,ntq->npq", X, X) / T
        self.b = np.einsum("ntp,nt->np", X, y) / T
        self.ridged = 0

    def __call__(self, labels, B):
        G, p = B.shape
        onehot = np.zeros((G, labels.size))
        onehot[labels, np.arange(labels.size)] = 1.0
        A = np.einsum("gn,npq->gpq", onehot, self.A)
        b = onehot @ self.b
        bad = _ill_conditioned(A)
        if bad.any():
            self.ridged += int(bad.sum())
            A = A + np.where(bad, RIDGE, 0.0)[:, None, None] * np.eye(p)
        return np.linalg.solve(A, b[..., None])[..., 0]


class _NewtonUpdater:
    """Pooled damped Newton per group; profile Newton for fixed-effect families."""

    def __init__(self, family, y, X, config):
        self.family, self.y, self.X, self.config = family, y, X, config
        self.ridged = 0

    def _objective(self, idx, beta):
        y, X = self.y[idx], self.X[idx]
        eta0 = X @ beta
        if self.family.fixed_effects:
            a, _ = _profile_alpha_batch(self.family, y, eta0, self.config.alpha_max_iter,
                                        self.config.alpha_tol)
            eta0 = eta0 + a[:, None]
            return float(self.family.loss_values(y, eta0).mean()), a
        return float(self.family.loss_values(y, eta0).mean()), None

    def _grad_hess(self, idx, beta, a):
        y, X = self.y[idx], self.X[idx]
        n, T, p = X.shape
        if self.family.fixed_effects:
            U, J, _ = _profile_score(self.family, y, X, np.broadcast_to(beta, (n, p)), a)
            return U.mean(axis=0), _sym(np.nan_to_num(J).mean(axis=0))
        _, l1, l2 = self.family.index_derivatives(y, X @ beta, order=2)
        g = np.einsum("nt,ntp->p", l1, X) / (n * T)
        H = np.einsum("nt,ntp,ntq->pq", l2, X, X) / (n * T)
        return g, _sym(H)

    def minimize(self, idx, beta):
        beta = np.array(beta, dtype=float)
        fcur, a = self._objective(idx, beta)
        p = beta.size
        for _ in range(self.config.newton_max_iter):
            g, H = self._grad_hess(idx, beta, a)
            eig_min = np.linalg.eigvalsh(H)[0]
            if eig_min <= RIDGE * max(1.0, abs(np.trace(H))):
                H = H + RIDGE * np.eye(p)
                self.ridged += 1
            step = -np.linalg.solve(H, g)
            t = 1.0
            for _ in range(40):
                trial = beta + t * step
                ftrial, atrial = self._objective(idx, trial)
                if ftrial <= fcur + 1e-13 * abs(fcur):
                    break
                t *= 0.5
            else:
                break
            beta, fcur, a = trial, ftrial, atrial
            if np.max(np.abs(t * step)) <= 1e-10 * (1.0 + np.max(np.abs(beta))):
                break
        return beta

    def __call__(self, labels, B):
        out = np.array(B, dtype=float)
        for g in range(B.shape[0]):
            idx = np.flatnonzero(labels == g)
            out[g] = self.minimize(idx, B[g])
        return out


# ---------------------------------------------------------------------------
# alternating minimisation


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0 and np.isfinite(total):
            j = rng.choice(n, p=d2 / total)
        else:
            j = rng.integers(n)
        centers.append(points[j])
        d2 = np.minimum(d2, np.sum((points - points[j]) ** 2, axis=1))
    return np.array(centers)


def _repair_empty(labels, Lmat, B, points, usable):
    """Move the worst-fitted individual into each empty group, centred on its own estimate."""
    G = B.shape[0]
    repairs = 0
    while True:
        sizes = np.bincount(labels, minlength=G)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return labels, B, repairs
        g = empty[0]
        current = Lmat[np.arange(labels.size), labels]
        movable = (sizes[labels] > 1) & usable
        if not movable.any():
            movable = sizes[labels] > 1
        j = int(np.argmax(np.where(movable, current, -np.inf)))
        labels = labels.copy()
        labels[j] = g
        B = B.copy()
        B[g] = points[j]
        repairs += 1


@dataclass
class _Run:
    B: np.ndarray
    labels: np.ndarray
    objective: float
    trace: list
    iterations: int
    converged: bool
    repairs: int


def _alternate(losses_fn, update_fn, B0, points, usable, config: RunConfig) -> _Run:
    B = np.array(B0, dtype=float)
    n = points.shape[0]
    rows = np.arange(n)
    Lmat = losses_fn(B)
    trace: list[float] = []
    converged = False
    repairs = 0
    it = 0
    for it in range(1, config.max_iter + 1):
        labels = np.argmin(Lmat, axis=1)
        labels, B, r = _repair_empty(labels, Lmat, B, points, usable)
        repairs += r
        B = update_fn(labels, B)
        Lmat = losses_fn(B)
        obj = float(np.mean(Lmat[rows, labels]))
        trace.append(obj)
        if len(trace) > 1 and abs(trace[-2] - obj) <= config.tol:
            converged = True
            break
    return _Run(B, labels, trace[-1], trace, it, converged, repairs)


def _canonical_order(B: np.ndarray) -> np.ndarray:
    return np.lexsort(B.T[::-1]) if B.shape[1] else np.arange(B.shape[0])


def _relabel(labels, order):
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return inverse[labels]


def _restart_rngs(seed: int, G: int, n: int):
    ss = np.random.SeedSequence([int(seed), int(G)])
    return [np.random.Generator(np.random.Philox(child)) for child in ss.spawn(n)]


def _check_feasible(data: PanelDataset, G: int):
    if G < 1:
        raise InfeasibleError(f"number of groups must be positive, got {G}")
    if data.n_individuals < G:
        raise InfeasibleError(
            f"cannot form {G} groups from {data.n_individuals} individuals"
        )
    if data.n_covariates < 1:
        raise InfeasibleError("estimation needs at least one covariate")


def _restarts(data, family, G, config, seed, init_centers, losses_fn, update_fn, nodewise):
    points = nodewise.coefficients
    usable = ~nodewise.flagged & np.all(np.isfinite(points), axis=1)
    cand = points[usable] if usable.sum() >= G else points
    if init_centers is not None:
        starts = [np.asarray(init_centers, dtype=float)]
    else:
        starts = [_kmeanspp(cand, G, rng) for rng in _restart_rngs(seed, G, config.n_restarts)]
    best = None
    losses = []
    for B0 in starts:
        run = _alternate(losses_fn, update_fn, B0, points, usable, config)
        losses.append(run.objective)
        if best is None or run.objective < best.objective:
            best = run
    return best, losses


def fit_groups(data: PanelDataset, family: ModelFamily, n_groups: int,
               config: RunConfig | None = None, seed: int | None = None,
               init_centers: np.ndarray | None = None) -> FitResult:
    """Grouped estimation without fixed effects (best of seeded k-means++ restarts).

    Groups are reported in ascending order of their first coefficient.
    """
    config = config or RunConfig()
    if family.fixed_effects:
        return fit_groups_fe(data, family, n_groups, config, seed, init_centers)
    _check_feasible(data, n_groups)
    family.check_response(data.responses)
    seed = config.seed if seed is None else seed
    y, X = data.responses, data.covariates
    nodewise = nodewise_fit(data, family, config)
    if family.is_linear:
        update = _GaussianUpdater(y, X)
    else:
        update = _NewtonUpdater(family, y, X, config)

    def losses(B):
        return _plain_losses(family, y, X, B)

    best, restart_losses = _restarts(data, family, n_groups, config, seed, init_centers,
                                     losses, update, nodewise)
    order = _canonical_order(best.B)
    B = best.B[order]
    labels = _relabel(best.labels, order)
    final = float(np.mean(_plain_losses(family, y, X, B)[np.arange(labels.size), labels]))
    flags = {
        "nodewise_flagged": int(nodewise.flagged.sum()),
        "empty_group_repairs": best.repairs,
        "ridge_updates": update.ridged,
    }
    return FitResult(
        n_groups, B, GroupAssignment(labels, n_groups), None, final, restart_losses,
        best.iterations, best.converged, best.trace, family.tag, flags,
    )


def group_minimize(data: PanelDataset, family: ModelFamily, labels: np.ndarray,
                   B0: np.ndarray, config: RunConfig | None = None) -> np.ndarray:
    """Per-group minimiser of the (profile) loss for fixed memberships."""
    config = config or RunConfig()
    y, X = data.responses, data.covariates
    if family.is_linear:
        if family.fixed_effects:
            y, X = _within(y, X)
        return _GaussianUpdater(y, X)(np.asarray(labels), np.asarray(B0, float))
    return _NewtonUpdater(family, y, X, config)(np.asarray(labels), np.asarray(B0, float))


def profile_alphas(data: PanelDataset, family: ModelFamily, per_individual_beta: np.ndarray,
                   config: RunConfig | None = None):
    """alpha_i(beta_i) for every individual. Returns (alphas, converged)."""
    config = config or RunConfig()
    eta0 = np.einsum("ntp,np->nt", data.covariates, per_individual_beta)
    return _profile_alpha_batch(family, data.responses, eta0, config.alpha_max_iter, config.alpha_tol)


def profile_scores(data: PanelDataset, family: ModelFamily, per_individual_beta: np.ndarray,
                   config: RunConfig | None = None) -> np.ndarray:
    """Profile score of every individual at its own beta with alpha profiled out: (N, p)."""
    B = np.asarray(per_individual_beta, dtype=float)
    a, _ = profile_alphas(data, family, B, config)
    U, _, _ = _profile_score(family, data.responses, data.covariates, B, a, jacobian=False)
    return U


def _stage2(data, family, labels, B1, a1, config):
    """Minimise the V^-2 weighted profile-score criterion group by group."""
    y, X = data.responses, data.covariates
    n, T, p = data.shape
    weights = fe_weights(data, family, B1[labels], a1)
    B = np.array(B1, dtype=float)
    history = []
    fallback = []
    for g in range(B.shape[0]):
        idx = np.flatnonzero((labels == g) & ~weights.singular)
        if idx.size == 0:
            fallback.append(g)
            history.append((float("nan"), float("nan")))
            continue
        Vinv = np.linalg.inv(weights.matrices[idx])
        M = Vinv @ Vinv
        sub = data.individuals(idx)

        def scores(beta):
            return profile_scores(sub, family, np.broadcast_to(beta, (idx.size, p)), config)

        def objective(U):
            return float(np.einsum("np,npq,nq->", U, M, U)) / T

        beta = B1[g].copy()
        U = scores(beta)
        q = objective(U)
        q0 = q
        for _ in range(100):
            direction = -np.einsum("npq,nq->p", Vinv, U) / idx.size
            if np.linalg.norm(direction) <= 1e-8:
                break
            t = 1.0
            accepted = False
            for _ in range(21):
                trial = beta + t * direction
                Ut = scores(trial)
                qt = objective(Ut)
                if np.isfinite(qt) and qt <= q:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break
            improvement = q - qt
            beta, U, q = trial, Ut, qt
            if improvement <= 1e-15 * max(1.0, q):
                break
        B[g] = beta
        history.append((q0, q))
    return B, history, fallback, weights


def fit_groups_fe(data: PanelDataset, family: ModelFamily, n_groups: int,
                  config: RunConfig | None = None, seed: int | None = None,
                  init_centers: np.ndarray | None = None) -> FitResult:
    """Two-stage grouped estimation with individual fixed effects.

    Stage 1 alternates memberships and profile-loss coefficients. Stage 2
    holds memberships fixed, computes V weights at the stage-1 estimates and
    re-estimates each group's coefficients by Gauss-Newton on the weighted
    profile-score criterion (Jacobian approximated by V, step halving).
    """
    config = config or RunConfig()
    if not family.fixed_effects:
        raise ValueError("fit_groups_fe needs a fixed-effects family")
    _check_feasible(data, n_groups)
    family.check_response(data.responses)
    seed = config.seed if seed is None else seed
    y, X = data.responses, data.covariates
    nodewise = nodewise_fit(data, family, config)

    if family.is_linear:
        yd, Xd = _within(y, X)
        update = _GaussianUpdater(yd, Xd)

        def losses(B):
            return _plain_losses(family, yd, Xd, B)
    else:
        update = _NewtonUpdater(family, y, X, config)

        def losses(B):
            return _profiled_losses(family, y, X, B, config)[0]

    best, restart_losses = _restarts(data, family, n_groups, config, seed, init_centers,
                                     losses, update, nodewise)
    order = _canonical_order(best.B)
    B1 = best.B[order]
    labels = _relabel(best.labels, order)
    a1, a1_ok = profile_alphas(data, family, B1[labels], config)

    B2, history, fallback, _ = _stage2(data, family, labels, B1, a1, config)
    flags = {
        "nodewise_flagged": int(nodewise.flagged.sum()),
        "empty_group_repairs": best.repairs,
        "ridge_updates": update.ridged,
        "stage2_fallback_groups": fallback,
    }
    if config.reassign_after_stage2:
        Lmat = _profiled_losses(family, y, X, B2, config)[0]
        relabelled = np.argmin(Lmat, axis=1)
        if np.all(np.bincount(relabelled, minlength=n_groups) > 0):
            labels = relabelled
        else:
            flags["reassign_skipped"] = True
    alphas, a_ok = profile_alphas(data, family, B2[labels], config)
    flags["alpha_nonconverged"] = int((~a_ok).sum())
    eta = np.einsum("ntp,np->nt", X, B2[labels]) + alphas[:, None]
    final = float(family.loss_values(y, eta).mean())
    return FitResult(
        n_groups, B2, GroupAssignment(labels, n_groups), alphas, final, restart_losses,
        best.iterations, best.converged, best.trace, family.tag, flags,
        stage1_coefficients=B1, stage1_alphas=a1, stage2_objective=history,
    )


def fit(data: PanelDataset, family: ModelFamily, n_groups: int,
        config: RunConfig | None = None, seed: int | None = None) -> FitResult:
    """Dispatch to the plain or fixed-effect estimator according to ``family``."""
    if family.fixed_effects:
        return fit_groups_fe(data, family, n_groups, config, seed)
    return fit_groups(data, family, n_groups, config, seed)


def objective(data: PanelDataset, family: ModelFamily, coefficients, labels, alphas=None) -> float:
    """Mean loss over all observations at the given estimates."""
    B = np.asarray(coefficients, dtype=float)[np.asarray(labels)]
    eta = np.einsum("ntp,np->nt", data.covariates, B)
    if alphas is not None:
        eta = eta + np.asarray(alphas, dtype=float)[:, None]
    return float(family.loss_values(data.responses, eta).mean())
