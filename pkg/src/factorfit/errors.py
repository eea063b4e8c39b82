"""Exception hierarchy shared across the package."""


class FactorFitError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(FactorFitError):
    """Input data violates a basic contract (non-finite entries, duplicates, ...)."""


class ShapeError(FactorFitError):
    """Array dimensions do not conform to the operation."""


class DefinitenessError(FactorFitError):
    """A matrix required to be positive definite is not.

    ``pivot`` is the 0-based index of the Cholesky pivot that failed,
    when known.
    """

    def __init__(self, message, pivot=None):
        if pivot is not None:
            message = f"{message} (failing pivot index {pivot})"
        super().__init__(message)
        self.pivot = pivot


class RankError(FactorFitError):
    """A matrix required to have full column rank is rank deficient."""


class DomainError(FactorFitError):
    """A scalar parameter is outside its mathematical domain."""


class ConfigError(FactorFitError):
    """A configuration object violates its invariants."""


class EvaluationError(FactorFitError):
    """A user-supplied callback returned non-finite values.

    ``x`` holds the offending evaluation point.
    """

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class CollectiveContractError(FactorFitError):
    """Ranks called collectives inconsistently (mismatched op, sequence, or shape)."""


class TransportError(FactorFitError):
    """A communication backend failed (timeout, disconnect).

    ``rank`` identifies the lost or unresponsive peer when known.
    """

    def __init__(self, message, rank=None):
        if rank is not None:
            message = f"{message} (rank {rank})"
        super().__init__(message)
        self.rank = rank


class FormatError(FactorFitError):
    """A binary container file is malformed.

    ``offset`` and ``field`` locate the first check that failed.
    """

    def __init__(self, message, offset=None, field=None):
        if field is not None:
            message = f"{message} [field={field}, offset={offset}]"
        super().__init__(message)
        self.offset = offset
        self.field = field


class DatasetConsistencyError(FactorFitError):
    """A dataset manifest references inconsistent subject files.

    ``offenders`` lists the subject ids that violate the constraint.
    """

    def __init__(self, message, offenders=()):
        offenders = list(offenders)
        if offenders:
            message = f"{message}: {', '.join(offenders)}"
        super().__init__(message)
        self.offenders = offenders


class UsageError(FactorFitError):
    """Command-line arguments are invalid (maps to exit code 2)."""
