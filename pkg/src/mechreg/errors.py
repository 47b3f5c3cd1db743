"""Structured exception types shared across the library."""


class DimensionMismatch(ValueError):
    """Inputs whose shapes cannot be combined."""


class NonFiniteInput(ValueError):
    """An input array contains NaN or infinity."""


class UnsupportedKernel(ValueError):
    """Operation not defined for this kernel family or activation."""


class SingularSystem(RuntimeError):
    """Linear solve failed even after the jitter retry."""


class Divergence(RuntimeError):
    """Optimizer produced a non-finite or exploding objective."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class ConfigError(ValueError):
    """Bad experiment configuration; carries a line number when parsing."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
