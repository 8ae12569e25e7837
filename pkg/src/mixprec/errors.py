"""Exception hierarchy shared across the package."""


class MixprecError(Exception):
    """Base class for all package errors."""


class ShapeError(MixprecError):
    """Tensor shapes are inconsistent for the requested operation."""


class PrecisionError(MixprecError):
    """A bit-width outside the supported [2, 8] range was requested."""


class GraphError(MixprecError):
    """Misuse of the autodiff graph (e.g. backward before forward)."""


class ConfigError(MixprecError):
    """Invalid experiment configuration or data file."""


class DivergenceError(MixprecError):
    """Training produced a non-finite loss."""


class EquivalenceError(MixprecError):
    """A lowered model does not reproduce the original outputs."""
