"""Exception types raised across the package."""


class OptikonvError(Exception):
    """Base class for all package errors."""


class ShapeError(OptikonvError, ValueError):
    """Operand extents are incompatible."""


class NonFiniteError(OptikonvError, FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class ContractError(OptikonvError, ValueError):
    """An input violates a documented precondition (e.g. unnormalized PSF)."""


class GeometryError(OptikonvError, ValueError):
    """Sensor plane and DAD layout do not agree."""


class DegenerateError(OptikonvError, ValueError):
    """Zero aperture, zero kernels or another input with no usable energy."""


class SamplingError(OptikonvError, ValueError):
    """Propagation geometry violates the angular-spectrum sampling limit."""


class ParameterError(OptikonvError, ValueError):
    """A scalar parameter is outside its allowed range."""


class ConfigError(OptikonvError, ValueError):
    """Inconsistent model, training or experiment configuration."""


class FormatError(OptikonvError, ValueError):
    """A file does not follow the expected binary layout."""


class UnsupportedOpError(OptikonvError, TypeError):
    """MAC counting met layer types it has no rule for."""


class DivergenceError(OptikonvError, RuntimeError):
    """An iterative solver blew up; ``history`` holds what was recorded."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class ConsistencyError(ContractError):
    """A compiled artifact no longer matches the parameters it came from."""
