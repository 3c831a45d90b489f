"""Exception types shared across the package.

Contract violations (bad arguments, broken preconditions) are distinguished
from numeric failures (non-finite values, empty-domain math) so tests can
assert the failure mode, not just "something raised".
"""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """An operation produced or would produce non-finite / undefined values."""


class DegenerateBatchError(ContractError):
    """A loss was asked to score a batch with no usable anchor/positive pairs."""


class MixtureDegeneracyError(ContractError):
    """Mixture fitting cannot proceed (e.g. all observations identical)."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, truncated, or inconsistent with config."""
