import numpy as np
import pytest

from panelcv.core import PanelDataset

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def grouped_linear(rng, n, t, betas, labels=None, noise=1.0, alphas=None, intercept=False):
    """Static linear panel with given group coefficients; returns (data, labels)."""
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    G, p = betas.shape
    if labels is None:
        labels = np.arange(n) % G
    if intercept:
        x = np.ones((n, t, 1))
    else:
        x = rng.standard_normal((n, t, p))
    y = np.einsum("ntp,np->nt", x, betas[labels]) + noise * rng.standard_normal((n, t))
    if alphas is not None:
        y = y + np.asarray(alphas)[:, None]
    return PanelDataset(y, x), np.asarray(labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
