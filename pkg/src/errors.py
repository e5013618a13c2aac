"""
Exception types shared by the library and the CLI.

Library code raises these; only the CLI entry point turns them into exit codes.
"""


class LpbError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(LpbError, ValueError):
    """Bad arguments: unknown setting id, unknown method, level out of range."""

    exit_code = 1


class DataError(LpbError, ValueError):
    """Input data violates the dataset contract or is too small for the operation."""

    exit_code = 2


class NumericalError(LpbError, ArithmeticError):
    """A numerical routine produced non-finite values or a singular system."""

    exit_code = 3


class ConvergenceWarning(UserWarning):
    """Newton iterations stopped at max_iter before the gradient tolerance was met."""
