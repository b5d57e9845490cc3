"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration/usage problems
exit 1, data and file-format problems exit 2, numerical failures exit 3.
"""


class ConfigurationError(ValueError):
    """Invalid configuration value or combination (caller error, exit 1)."""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its contract."""


class DataError(ValueError):
    """Malformed input data: bad file format, unknown categorical level,
    incomplete coverage (exit 2)."""


class NumericalError(RuntimeError):
    """Numerical failure: NaN/Inf loss, degenerate schedule (exit 3)."""
