"""Exception hierarchy shared across the pipeline.

Every error carries the process exit code the CLI maps it to:
1 usage/config, 2 I/O, 3 contract/shape, 4 numerical failure.
"""


class WaterflowError(Exception):
    exit_code = 1


class ConfigError(WaterflowError):
    """Invalid configuration or CLI usage."""

    exit_code = 1


class PipelineIOError(WaterflowError):
    """Unreadable or unwritable artifact on disk."""

    exit_code = 2


class ShapeError(WaterflowError):
    """Operand dimensions are incompatible."""

    exit_code = 3


class ContractError(WaterflowError):
    """A documented precondition was violated."""

    exit_code = 3


class DomainError(ContractError):
    """A value lies outside its mathematical domain."""

    exit_code = 3


class NumericalError(WaterflowError):
    """Non-finite values or a degenerate estimation problem."""

    exit_code = 4


class EstimationError(NumericalError):
    """A regression or statistical fit has no solution."""

    exit_code = 4
