import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import brute_force_two_groups, fd_grad, rel_err
from conftest import grouped_linear
from panelcv.core import PanelDataset, RunConfig
from panelcv.dgp import DgpSpec, simulate
from panelcv.errors import InfeasibleError, SingularProfileError
from panelcv.estimation import (
    fit,
    fit_groups,
    fit_groups_fe,
    nodewise_fit,
    objective,
    profile_alpha,
    u_bar,
    v_matrix,
    weight_matrix,
)
from panelcv.models import ModelFamily

LIN = ModelFamily("linear")
LIN_FE = ModelFamily("linear", True)


def _nonincreasing(trace, rtol=1e-12):
    t = np.asarray(trace)
    return bool(np.all(np.diff(t) <= rtol * np.abs(t[:-1]) + 1e-15))


# node-wise estimates


def test_nodewise_noiseless_linear(rng):
    beta = np.array([0.7, -1.3])
    data, _ = grouped_linear(rng, 5, 12, [beta], noise=0.0)
    np.testing.assert_allclose(nodewise_fit(data, LIN).coefficients, np.tile(beta, (5, 1)), atol=1e-8)


def test_nodewise_matches_lstsq(rng):
    data = PanelDataset(rng.standard_normal((6, 15)), rng.standard_normal((6, 15, 3)))
    nw = nodewise_fit(data, LIN).coefficients
    for i in range(6):
        ref = np.linalg.lstsq(data.covariates[i], data.responses[i], rcond=None)[0]
        np.testing.assert_allclose(nw[i], ref, rtol=1e-10, atol=1e-12)


def test_nodewise_probit_separation_flagged(rng):
    y = np.ones((3, 20))
    y[1:, ::2] = 0.0
    # a positive covariate lets the all-ones series push beta to infinity
    data = PanelDataset(y, 0.1 + np.abs(rng.standard_normal((3, 20, 1))))
    nw = nodewise_fit(data, ModelFamily("probit-dyn"))
    assert nw.flagged[0]
    assert not nw.flagged[1:].any()


# plain alternation


def test_single_group_is_pooled_least_squares(rng):
    data, _ = grouped_linear(rng, 20, 10, [[1.0, 2.0]])
    f = fit_groups(data, LIN, 1)
    X = data.covariates.reshape(-1, 2)
    ref = np.linalg.lstsq(X, data.responses.reshape(-1), rcond=None)[0]
    np.testing.assert_allclose(f.coefficients[0], ref, rtol=1e-10)


def test_two_separated_groups_exact_recovery(rng):
    labels = np.array([0, 1, 0, 1, 1, 0])
    data, _ = grouped_linear(rng, 6, 40, [[-2.0], [2.0]], labels=labels)
    f = fit_groups(data, LIN, 2)
    np.testing.assert_array_equal(f.labels, labels)
    best, _ = brute_force_two_groups(data.responses, data.covariates)
    assert f.final_loss == pytest.approx(best, rel=1e-10)


def test_exhaustive_oracle_small_panels():
    hits = 0
    for seed in range(40):
        r = np.random.default_rng(seed)
        n = int(r.integers(4, 9))
        labels = np.r_[0, 1, r.integers(0, 2, n - 2)]
        data, _ = grouped_linear(r, n, 30, [[-1.0, 0.0], [1.0, 0.0]], labels=labels)
        f = fit_groups(data, LIN, 2, RunConfig(seed=seed))
        best, _ = brute_force_two_groups(data.responses, data.covariates)
        hits += abs(f.final_loss - best) <= 1e-10 * best
    assert hits >= 38


@pytest.mark.parametrize("name", ["linear", "probit-dyn", "poisson"])
def test_descent_trace(name):
    family = ModelFamily(name)
    sim_dgp = {"linear": "1", "probit-dyn": "3", "poisson": "4"}[name]
    for seed in range(5):
        data = simulate(DgpSpec(sim_dgp, 40, 20, seed=seed)).data
        f = fit_groups(data, family, 3, RunConfig(n_restarts=1, seed=seed))
        assert _nonincreasing(f.trace)
        assert f.iterations <= RunConfig().max_iter
        if f.converged:
            assert abs(f.trace[-1] - f.trace[-2]) <= RunConfig().tol


@pytest.mark.parametrize("dgp, family", [("1", LIN), ("4", ModelFamily("poisson")),
                                         ("1FE", LIN_FE), ("2FE", ModelFamily("linear-dyn", True))])
def test_final_loss_matches_objective(dgp, family):
    data = simulate(DgpSpec(dgp, 40, 20, seed=2)).data
    f = fit(data, family, 3)
    assert f.assignment.complete
    assert f.assignment.sizes.sum() == 40
    ref = objective(data, family, f.coefficients, f.labels, f.alphas)
    assert f.final_loss == pytest.approx(ref, rel=1e-10)


def test_canonical_order_and_determinism(rng):
    data, _ = grouped_linear(rng, 30, 20, [[0.0], [3.0], [-3.0]])
    f1 = fit_groups(data, LIN, 3, RunConfig(seed=9))
    f2 = fit_groups(data, LIN, 3, RunConfig(seed=9))
    np.testing.assert_array_equal(f1.coefficients, f2.coefficients)
    assert np.all(np.diff(f1.coefficients[:, 0]) > 0)


def test_permuted_initial_centers_give_identical_output(rng):
    data, _ = grouped_linear(rng, 30, 20, [[0.0, 1.0], [3.0, 0.0], [-3.0, 2.0]])
    centers = np.array([[0.0, 1.0], [3.0, 0.0], [-3.0, 2.0]])
    a = fit_groups(data, LIN, 3, init_centers=centers)
    b = fit_groups(data, LIN, 3, init_centers=centers[[2, 0, 1]])
    np.testing.assert_array_equal(a.coefficients, b.coefficients)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_empty_group_repair(rng):
    data, _ = grouped_linear(rng, 12, 20, [[1.0], [-1.0]])
    f = fit_groups(data, LIN, 3, init_centers=np.array([[1.0], [-1.0], [100.0]]))
    assert f.assignment.complete
    assert f.flags["empty_group_repairs"] >= 1
    assert _nonincreasing(f.trace)


def test_infeasible_group_count(rng):
    data, _ = grouped_linear(rng, 3, 5, [[1.0]])
    with pytest.raises(InfeasibleError):
        fit(data, LIN, 4)


def test_pooled_average_of_sub_blocks():
    rng = np.random.default_rng(5)
    data, _ = grouped_linear(rng, 200, 100, [[1.0, -0.5]])
    blocks = rng.integers(0, 3, 200)
    pooled = fit_groups(data, LIN, 1).coefficients[0]
    avg = np.zeros(2)
    for b in range(3):
        idx = np.flatnonzero(blocks == b)
        avg += idx.size / 200 * fit_groups(data.individuals(idx), LIN, 1).coefficients[0]
    np.testing.assert_allclose(pooled, avg, atol=1e-2)


# fixed effects


def test_profile_alpha_linear_closed_form():
    y = np.array([1.0, 2.0, 1.5, 1.5])
    a, ok = profile_alpha(y, np.ones((4, 1)), LIN_FE, [0.0])
    assert ok and a == pytest.approx(1.5, abs=1e-15)


def test_profile_alpha_probit_stationary_and_grid(rng):
    fam = ModelFamily("probit-dyn", True)
    for _ in range(20):
        x = rng.standard_normal((25, 2))
        y = (rng.standard_normal(25) < 0.3 + x @ [0.5, -0.2]).astype(float)
        y[:2] = (0.0, 1.0)
        beta = rng.uniform(-1, 1, 2)
        a, ok = profile_alpha(y, x, fam, beta)
        assert ok
        eta = x @ beta + a
        score = fam.index_derivatives(y, eta, order=1)[1].mean()
        assert abs(score) <= 1e-9
        grid = np.linspace(a - 0.5, a + 0.5, 10001)
        vals = fam.loss_values(y[None], (x @ beta)[None] + grid[:, None]).mean(axis=1)
        assert abs(grid[np.argmin(vals)] - a) <= 2 * (grid[1] - grid[0])


def test_fe_single_group_matches_within_estimator(rng):
    data, _ = grouped_linear(rng, 30, 20, [[1.0, -1.0]])
    f = fit_groups_fe(data, LIN_FE, 1)
    y = data.responses - data.responses.mean(axis=1, keepdims=True)
    X = data.covariates - data.covariates.mean(axis=1, keepdims=True)
    ref = np.linalg.lstsq(X.reshape(-1, 2), y.reshape(-1), rcond=None)[0]
    np.testing.assert_allclose(f.stage1_coefficients[0], ref, rtol=1e-10)
    # the weighted profile-score criterion is sum_i |beta - gamma_i|^2 for linear models
    gamma = nodewise_fit(data, LIN_FE).coefficients
    np.testing.assert_allclose(f.coefficients[0], gamma.mean(axis=0), atol=1e-8)


def test_fe_stages_agree_with_common_design(rng):
    x = np.broadcast_to(rng.standard_normal((1, 20, 2)), (30, 20, 2))
    y = x @ np.array([1.0, -1.0]) + rng.standard_normal((30, 20))
    f = fit_groups_fe(PanelDataset(y, x), LIN_FE, 1)
    np.testing.assert_allclose(f.coefficients[0], f.stage1_coefficients[0], atol=1e-6)


@pytest.mark.parametrize("dgp, name", [("1FE", "linear"), ("2FE", "linear-dyn")])
def test_fe_stage_descent(dgp, name):
    family = ModelFamily(name, True)
    for seed in range(3):
        data = simulate(DgpSpec(dgp, 40, 30, seed=seed)).data
        f = fit_groups_fe(data, family, 4, RunConfig(n_restarts=2, seed=seed))
        assert _nonincreasing(f.trace)
        for q0, q in f.stage2_objective:
            assert q <= q0


def test_fe_probit_and_poisson_run():
    rng = np.random.default_rng(3)
    n, t = 30, 25
    x = rng.standard_normal((n, t, 1))
    alpha = rng.uniform(-0.5, 0.5, n)
    b = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    eta = x[:, :, 0] * b[:, None] + alpha[:, None]
    for fam, y in [(ModelFamily("poisson", True), rng.poisson(np.exp(eta)).astype(float)),
                   (ModelFamily("probit-dyn", True), (rng.standard_normal((n, t)) < eta).astype(float))]:
        f = fit_groups_fe(PanelDataset(y, x), fam, 2)
        assert f.assignment.complete
        np.testing.assert_allclose(np.sort(f.coefficients[:, 0]), [-1.0, 1.0], atol=0.5)
        for q0, q in f.stage2_objective:
            assert np.isnan(q0) or q <= q0


def test_reassign_flag_keeps_groups_complete(rng):
    data = simulate(DgpSpec("1FE", 40, 30, seed=1)).data
    f = fit_groups_fe(data, LIN_FE, 4, RunConfig(reassign_after_stage2=True))
    assert f.assignment.complete


# weights and profile scores


def test_weight_matrix_linear(rng):
    W, flag = weight_matrix(rng.standard_normal(9), np.ones((9, 1)), LIN, [0.3])
    assert W[0, 0] == 1.0 and not flag
    x = rng.standard_normal((15, 3))
    W, _ = weight_matrix(rng.standard_normal(15), x, LIN, rng.standard_normal(3))
    np.testing.assert_allclose(W, x.T @ x / 15, rtol=1e-12)


def test_weight_matrix_probit_fd(rng):
    fam = ModelFamily("probit-dyn")
    x = rng.standard_normal((30, 2))
    y = (rng.standard_normal(30) < x @ [0.4, 0.2]).astype(float)
    beta = np.array([0.3, -0.1])

    def grad(b):
        l1 = fam.index_derivatives(y, x @ b, order=1)[1]
        return x.T @ l1 / 30

    W, _ = weight_matrix(y, x, fam, beta)
    assert rel_err(W, fd_grad(grad, beta)) <= 1e-4


def test_u_bar_intercept_model_vanishes(rng):
    y = rng.standard_normal(10)
    np.testing.assert_allclose(u_bar(y, np.ones((10, 1)), LIN_FE, [0.4], 0.1), 0.0, atol=1e-15)


def test_u_bar_linear_within_oracle(rng):
    x = rng.standard_normal((20, 2))
    y = rng.standard_normal(20)
    beta = np.array([0.5, -0.3])
    a, _ = profile_alpha(y, x, LIN_FE, beta)
    xt = x - x.mean(axis=0)
    yt = y - y.mean()
    np.testing.assert_allclose(u_bar(y, x, LIN_FE, beta, a), xt.T @ (xt @ beta - yt) / 20, atol=1e-13)


def test_v_matrix_linear_within_covariance(rng):
    x = rng.standard_normal((20, 2))
    y = rng.standard_normal(20)
    V, singular = v_matrix(y, x, LIN_FE, [1.0, 2.0], 0.7)
    m = x.mean(axis=0)
    np.testing.assert_allclose(V, x.T @ x / 20 - np.outer(m, m), atol=1e-13)
    assert not singular
    V2, _ = v_matrix(y + 3.0, x, LIN_FE, [-4.0, 0.0], -1.0)
    np.testing.assert_allclose(V, V2, atol=1e-13)


def test_v_matrix_intercept_only_singular(rng):
    V, singular = v_matrix(rng.standard_normal(10), np.ones((10, 1)), LIN_FE, [0.0], 0.0)
    assert singular
    np.testing.assert_allclose(V, 0.0, atol=1e-15)


def test_singular_profile_error():
    fam = ModelFamily("poisson", True)
    # exp(eta) underflows so the averaged second alpha-derivative is zero
    with pytest.raises(SingularProfileError):
        u_bar(np.zeros(5), np.ones((5, 1)), fam, [0.0], -800.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_assignment_invariants(seed, G):
    rng = np.random.default_rng(seed)
    data, _ = grouped_linear(rng, 12, 8, rng.normal(size=(G, 2)))
    f = fit_groups(data, LIN, G, RunConfig(n_restarts=2, seed=seed))
    assert f.assignment.complete
    assert f.assignment.memberships.min() == 1 and f.assignment.memberships.max() == G
    assert _nonincreasing(f.trace)
