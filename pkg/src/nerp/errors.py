"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input file, bundle or configuration violates its contract.

    The CLI maps this (and file-system errors) to exit code 1; any other
    exception is a runtime error and maps to exit code 2.
    """
