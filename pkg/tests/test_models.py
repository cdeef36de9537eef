import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import derivative_suite
from panelcv.errors import DomainError
from panelcv.models import FAMILY_NAMES, ModelFamily, derivatives, get_family, loss


def test_loss_examples():
    assert loss(ModelFamily("linear"), 1.0, [1.0, 0.0], [1.0, 0.0]) == 0.0
    assert loss(ModelFamily("probit-dyn"), 1.0, [1.0], [0.0]) == pytest.approx(math.log(2.0), abs=1e-15)
    assert loss(ModelFamily("poisson"), 0.0, [1.0], [0.0]) == 1.0


def test_linear_derivative_example():
    d = derivatives(ModelFamily("linear"), 2.0, [1.0], [0.0])
    assert d.score[0] == -2.0
    assert d.hessian[0, 0] == 1.0


def test_domain_errors():
    with pytest.raises(DomainError):
        loss(ModelFamily("probit-dyn"), 0.5, [1.0], [0.0])
    with pytest.raises(DomainError):
        loss(ModelFamily("poisson"), -1.0, [1.0], [0.0])
    with pytest.raises(DomainError):
        loss(ModelFamily("poisson"), 1.5, [1.0], [0.0])


def test_alpha_required_iff_fixed_effects():
    with pytest.raises(ValueError):
        loss(ModelFamily("linear", True), 1.0, [1.0], [0.0])
    with pytest.raises(ValueError):
        loss(ModelFamily("linear"), 1.0, [1.0], [0.0], alpha=0.0)


def test_family_tags():
    assert get_family("poisson+fe") == ModelFamily("poisson", True)
    assert ModelFamily("linear-dyn", True).tag == "linear-dyn+fe"
    with pytest.raises(ValueError):
        ModelFamily("logit")


def test_derivatives_match_finite_differences():
    errors, n = derivative_suite(n_per_family=100, seed=1)
    assert n >= 400
    assert errors["score"] <= 1e-5
    assert errors["u_bar"] <= 1e-4
    for key in ("hessian", "l_alpha", "l_alphaalpha", "l_alphabeta", "u_bar_jacobian", "v_matrix"):
        assert errors[key] <= 1e-4, key


@pytest.mark.parametrize("eta", [-40.0, -8.0, 8.0, 40.0])
def test_probit_tails_are_finite(eta):
    fam = ModelFamily("probit-dyn")
    for y in (0.0, 1.0):
        vals = fam.index_derivatives(np.array([y]), np.array([eta]), order=3)
        assert all(np.isfinite(v).all() for v in vals)
    # far in the wrong tail the loss grows like eta^2 / 2
    L = fam.loss_values(np.array([1.0]), np.array([-40.0]))[0]
    assert L == pytest.approx(800.0 + math.log(40.0) + 0.5 * math.log(2 * math.pi), rel=1e-3)


@settings(max_examples=200, deadline=None)
@given(
    st.sampled_from(FAMILY_NAMES),
    st.booleans(),
    st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    st.lists(st.floats(-1, 1), min_size=2, max_size=2),
    st.floats(-1, 1),
    st.integers(0, 5),
)
def test_hessian_symmetric_psd(name, fe, x, beta, alpha, yint):
    fam = ModelFamily(name, fe)
    y = float(yint % 2) if fam.link == "probit" else float(yint)
    d = derivatives(fam, y, x, beta, alpha if fe else None)
    assert np.all(np.isfinite(d.hessian))
    np.testing.assert_allclose(d.hessian, d.hessian.T, atol=1e-12)
    # convex in (beta, alpha) jointly
    if fe:
        full = np.block([[d.hessian, d.l_alphabeta[:, None]],
                         [d.l_alphabeta[None, :], np.array([[d.l_alphaalpha]])]])
    else:
        full = d.hessian
    assert np.linalg.eigvalsh(full).min() >= -1e-10


def test_linear_hessian_constant():
    fam = ModelFamily("linear", True)
    x = np.array([0.3, -1.2])
    h1 = derivatives(fam, 1.0, x, [0.0, 0.0], 0.0).hessian
    h2 = derivatives(fam, -4.0, x, [5.0, -3.0], 2.0).hessian
    np.testing.assert_array_equal(h1, h2)
