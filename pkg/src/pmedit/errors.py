"""Exception taxonomy shared across the package.

Subclasses of :class:`NumericalError` signal failures of the numerical core
and map to CLI exit code 2; every other error is treated as a usage or
configuration problem (exit code 1).
"""


class PmeditError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(PmeditError):
    """Operand shapes are inconsistent with each other or with the model."""


class InvalidConfig(PmeditError):
    """A configuration value violates its documented constraints."""


class UnknownFactId(PmeditError):
    """A fact id was referenced that does not exist in the fact set."""


class SchemaMismatch(PmeditError):
    """A metrics CSV does not match the expected schema."""


class NumericalError(PmeditError):
    """Base class for numerical failures (CLI exit code 2)."""


class NotSPD(NumericalError):
    """Cholesky factorization hit a non-positive pivot.

    Callers typically respond by raising their ridge term.
    """


class Singular(NumericalError):
    """LU factorization produced a pivot below the singularity threshold."""


class DegenerateKey(NumericalError):
    """An edit key has numerically zero energy under the preservation metric."""


class SingularGram(NumericalError):
    """The Gram matrix of a key batch is not invertible.

    Raise the ridge or drop near-parallel keys to recover.
    """


class DuplicateKeys(SingularGram):
    """Two edit keys in one batch are near-parallel; the equality
    constraints they induce would be inconsistent."""


class Diverged(NumericalError):
    """An iterative solve produced a non-finite loss; reduce the step size."""
