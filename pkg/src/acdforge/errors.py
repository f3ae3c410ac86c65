"""Structured error types shared across the toolchain.

Every failure mode that callers are expected to branch on gets its own
class; the CLI maps each class to a distinct exit code.
"""


class ForgeError(Exception):
    """Base class for all toolchain errors."""


class ShapeError(ForgeError):
    """Tensor or layer shapes are inconsistent.

    Carries the offending layer/op name so the message points at the
    exact place in the network instead of a bare dimension mismatch.
    """

    def __init__(self, where, message):
        self.where = where
        super().__init__(f"{where}: {message}")


class FiniteError(ForgeError):
    """A kernel produced NaN or Inf."""

    def __init__(self, where):
        self.where = where
        super().__init__(f"{where}: non-finite values in output")


class GraphError(ForgeError):
    """Autodiff graph misuse (e.g. backward from a non-scalar)."""


class SpecError(ForgeError):
    """A network description is malformed or cannot be realized."""


class AudioFormatError(ForgeError):
    """A WAV file is unreadable or uses an unsupported encoding."""


class DataError(ForgeError):
    """Dataset construction or metadata parsing failed."""


class ConfigError(ForgeError):
    """Pipeline configuration text is malformed or has unknown keys."""


class ContainerError(ForgeError):
    """Model container bytes are malformed."""


class BadMagic(ContainerError):
    pass


class VersionMismatch(ContainerError):
    pass


class TruncatedContainer(ContainerError):
    pass


class DivergenceError(ForgeError):
    """Training produced a non-finite loss and no finite state exists."""


class QuantError(ForgeError):
    """Quantization or integer-inference failure."""


class PlanError(ForgeError):
    """Memory planning failure (e.g. fusion requested on unsupported layers)."""
