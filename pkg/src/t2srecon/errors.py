"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI: ConfigError and ContractViolation (and
subclasses) exit with 2, everything else derived from ToolkitError with 1.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(ToolkitError):
    """Invalid configuration or unusable parameter combination."""

    exit_code = 2


class ContractViolation(ToolkitError):
    """Caller broke an operation's precondition."""

    exit_code = 2


class GeometryError(ContractViolation):
    """Degenerate or non-invertible image geometry."""


class ParseError(ToolkitError):
    """Malformed input file. Carries the byte offset of the problem."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class IntegrityError(ToolkitError):
    """File content inconsistent with its own header or with the dataset."""


class RegressionError(ToolkitError):
    """Regression input is degenerate (e.g. no spread in the regressor)."""


class ReconstructionError(ToolkitError):
    """Reconstruction could not produce a usable volume."""
