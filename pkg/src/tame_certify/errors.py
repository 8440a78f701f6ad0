"""
Exception hierarchy shared by the certification pipeline.

Input errors also derive from ValueError so callers that only know the
standard library still catch them.
"""


class CertifyError(RuntimeError):
    """Base class for every error raised by tame_certify."""


class PatternError(CertifyError, ValueError):
    """A Sergeev pattern or its integer index is malformed."""


class ParamsError(CertifyError, ValueError):
    """A tame parameter set violates its invariants."""


class MemoryBudgetError(CertifyError):
    """A requested object exceeds the configured memory budget."""


class DepthBudgetError(CertifyError):
    """An unfolding was requested beyond the configured depth budget."""


class TiltAmbiguityError(CertifyError):
    """A tilt lies within tolerance of a half-integer, so rounding is ambiguous."""


class DeadStateError(CertifyError):
    """A matrix product collapsed to zero norm."""


class LyapunovOverflowError(CertifyError):
    """Running log-norm accumulation produced a non-finite value."""


class MarginalError(CertifyError, ValueError):
    """A marginal specification is not admissible for the convex program."""


class SolverFailure(CertifyError):
    """The conic solver failed or returned an unusable status."""


class CertificationRefused(CertifyError):
    """The duality gap stayed above the threshold after every retry."""


class EnvelopeDomainError(CertifyError, ValueError):
    """An envelope was evaluated outside its lattice."""


class LipschitzViolation(CertifyError, ValueError):
    """Adjacent envelope values violate the ramp Lipschitz condition."""


class CoverageError(CertifyError, ValueError):
    """A lattice does not cover the interval it is required to cover."""


class GapViolation(CertifyError, ValueError):
    """A recorded duality gap exceeds the aggregation threshold."""


class LatticeError(CertifyError, ValueError):
    """A lattice specification is unsorted, overlapping or malformed."""


class DomainViolation(CertifyError, ValueError):
    """A circuit model was evaluated outside its domain."""


class CheckpointMismatch(CertifyError):
    """A checkpoint file was written for a different family or gap threshold."""
