"""Exception types shared across the package."""


class MetagradError(Exception):
    """Base class for package errors."""


class ConfigurationError(MetagradError):
    """Invalid configuration, unbound parameter, or malformed input."""


class ShapeError(MetagradError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(MetagradError):
    """An operation was called outside its documented contract."""


class UnsupportedOpError(MetagradError):
    """No differentiation rule is registered for an op."""


class NumericalError(MetagradError):
    """A computation produced a non-finite value."""


class DivergenceError(MetagradError):
    """Adaptation or meta-training diverged.

    Carries the step index at which the divergence was detected.
    """

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
