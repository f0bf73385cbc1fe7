"""Exception types raised across the package.

Each carries enough context to be turned into a machine-readable CLI error.
"""


class CantorPruferError(Exception):
    """Base class for all package errors."""

    #: CLI exit code used when the error escapes to the command line.
    exit_code = 3


class ConstraintViolation(CantorPruferError):
    """A stage parameter set violates one of the construction inequalities."""

    exit_code = 2

    def __init__(self, message, constraint=None, margin=None):
        super().__init__(message)
        self.constraint = constraint
        self.margin = margin


class StepSizeUnderflow(CantorPruferError):
    def __init__(self, x, h):
        super().__init__(f"adaptive step fell to {h:.3e} at x={x:.6g}")
        self.x = x
        self.h = h


class EventNotBracketed(CantorPruferError):
    def __init__(self, message, pair_index=None, x=None):
        super().__init__(message)
        self.pair_index = pair_index
        self.x = x


class ProbeOutOfRange(CantorPruferError):
    pass


class TargetUnreachable(CantorPruferError):
    pass


class TailNotConverged(CantorPruferError):
    pass


class DivergentTailEstimate(CantorPruferError):
    exit_code = 2


class EnvelopeViolation(ConstraintViolation):
    def __init__(self, ratio, x):
        super().__init__(
            f"|V(x)|(1+x)/h(x) = {ratio:.4g} > 1 at x={x:.6g}",
            constraint="envelope",
            margin=1.0 - ratio,
        )
        self.ratio = ratio
        self.x = x


class StageTooShort(CantorPruferError):
    pass


class NoFeasibleSplitPoint(ConstraintViolation):
    pass


class DigestMismatch(CantorPruferError):
    exit_code = 65


class ConfigError(CantorPruferError):
    exit_code = 64
