"""Exception hierarchy shared across the package."""


class FlowcastError(Exception):
    """Base class for all package-specific errors."""

    category = "internal"


class ShapeError(FlowcastError, ValueError):
    """Operand shapes are incompatible with the requested operation."""

    category = "shape"


class DomainError(FlowcastError, ValueError):
    """Input values fall outside an operation's numeric domain."""

    category = "domain"


class SingularMatrixError(FlowcastError, ValueError):
    """A mixing matrix became numerically singular (|det| <= 1e-12)."""

    category = "singular"


class DivergenceError(FlowcastError, RuntimeError):
    """Training or backward pass produced NaN/Inf values."""

    category = "divergence"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class GeometryError(FlowcastError, ValueError):
    """Requested dataset geometry cannot keep shapes inside the frame."""

    category = "geometry"


class NoForegroundError(FlowcastError, ValueError):
    """A video has no trackable foreground or zero displacement."""

    category = "no-foreground"


class FormatError(FlowcastError, ValueError):
    """A binary container is malformed, truncated, or version-mismatched."""

    category = "format"
