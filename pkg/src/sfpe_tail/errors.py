"""Exception hierarchy.

Each error carries the CLI exit code it maps to, so the front end can
translate failures without a lookup table.
"""


class SFPEError(Exception):
    exit_code = 3


class InvalidParams(SFPEError, ValueError):
    pass


class DriftNotNegative(SFPEError, ValueError):
    pass


class OutOfDomain(SFPEError, ValueError):
    pass


class NoRoot(SFPEError):
    exit_code = 2


class DomainBoundary(SFPEError):
    exit_code = 2


class RejectionInefficiency(SFPEError, RuntimeError):
    pass


class NonFiniteState(SFPEError, FloatingPointError):
    pass


class UnsupportedKind(SFPEError, NotImplementedError):
    pass


class TruncationNotConverged(SFPEError, RuntimeError):
    pass


class DegenerateMinorization(SFPEError, RuntimeError):
    pass


class CycleOverrun(SFPEError, RuntimeError):
    pass


class WalkOverrun(SFPEError, RuntimeError):
    pass


class EmptyInput(SFPEError, ValueError):
    pass


class InsufficientEscapes(SFPEError, RuntimeError):
    pass


class InsufficientHits(SFPEError, RuntimeError):
    pass


class DriftParamsFailed(SFPEError, RuntimeError):
    pass


class NonPositiveDriftForU(SFPEError, ValueError):
    pass


class ConfigError(SFPEError, ValueError):
    exit_code = 3


class OutputError(SFPEError, OSError):
    exit_code = 4


class ValidationFailed(SFPEError):
    exit_code = 5
