"""Exception hierarchy shared across the package."""


class PanelError(ValueError):
    """Base class for every error raised by panelcv."""


class IngestionError(PanelError):
    """Malformed, unbalanced or non-numeric panel input."""


class InvalidSplitError(PanelError):
    pass


class InsufficientHistoryError(PanelError):
    pass


class DomainError(PanelError):
    """Response values outside the support of the loss family."""


class InfeasibleError(PanelError):
    """Requested group count cannot be fitted (e.g. more groups than individuals)."""


class SingularProfileError(PanelError):
    """The time-averaged second alpha-derivative is numerically zero."""


class SelectionError(PanelError):
    pass


class UnsupportedMethodError(PanelError):
    pass


class SpecError(PanelError):
    """Invalid simulation or rolling-window specification."""
