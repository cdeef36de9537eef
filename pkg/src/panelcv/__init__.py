"""Latent group structure in panel data: k-means-type estimation and selection of the number of groups."""

from .core import PanelDataset, RunConfig, TimeSplit, load_csv, make_lagged, split_time, write_csv
from .dgp import DgpSpec, Simulation, dgp_family, dgp_moments_check, simulate, unlagged
from .errors import (
    DomainError,
    InfeasibleError,
    IngestionError,
    InsufficientHistoryError,
    InvalidSplitError,
    PanelError,
    SelectionError,
    SingularProfileError,
    SpecError,
    UnsupportedMethodError,
)
from .estimation import (
    FitResult,
    GroupAssignment,
    WeightSet,
    fit,
    fit_groups,
    fit_groups_fe,
    nodewise_fit,
    objective,
    profile_alpha,
    u_bar,
    u_bar_jacobian,
    v_matrix,
    weight_matrix,
)
from .harness import ExperimentConfig, McResult, RollingSpec, rolling_mpse, run_monte_carlo
from .models import ModelFamily, derivatives, get_family, loss
from .selection import (
    CvDecomposition,
    SelectionResult,
    cv_decompose,
    cv_select,
    ic_select,
    q_criterion,
    q_criterion_fe,
    select,
)

__version__ = "0.1.0"
