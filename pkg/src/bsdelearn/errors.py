"""Exception types shared across the package."""


class BsdeLearnError(Exception):
    """Base class for package errors."""


class ShapeError(BsdeLearnError, ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(BsdeLearnError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class SingularDiffusionError(BsdeLearnError, ArithmeticError):
    """The diffusion matrix is singular and its inverse is required."""


class TrainingDiverged(BsdeLearnError, RuntimeError):
    """An optimization step produced non-finite values after all retries."""


class NotFittedError(BsdeLearnError, RuntimeError):
    """Solver method requires fit() to have been called first."""
