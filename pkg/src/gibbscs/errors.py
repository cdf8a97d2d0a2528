"""Exception types shared across the package.

The CLI maps these onto process exit codes: invalid input -> 2,
I/O problems -> 3, numerical/solver failures -> 4.
"""


class GibbsCSError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(GibbsCSError, ValueError):
    """An argument violates a documented precondition."""


class NumericalError(GibbsCSError, ArithmeticError):
    """A numerical routine produced an unusable result."""


class SolverError(NumericalError):
    """A linear solver failed to converge or factorize.

    Parameters
    ----------
    message : str
        Human-readable description.
    residual : float, optional
        Relative residual at the point of failure, when known.
    """

    def __init__(self, message, residual=None):
        if residual is not None:
            message = f"{message} (relative residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class NotPositiveDefiniteError(SolverError):
    """Cholesky factorization hit a non-positive-definite matrix."""


class DataFileError(GibbsCSError):
    """An image or dataset artifact could not be read or written."""


class ModelFileError(GibbsCSError):
    """Base class for model (de)serialization failures."""


class ModelVersionError(ModelFileError):
    """The model file declares an unsupported format version."""


class MalformedModelError(ModelFileError):
    """The model file is syntactically or structurally invalid."""
