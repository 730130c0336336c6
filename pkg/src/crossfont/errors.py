"""Error types shared across the package.

The CLI maps ConfigError/ManifestError to exit code 1 (bad input) and
everything else to exit code 2 (runtime failure).
"""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ManifestError(ValueError):
    """Malformed or inconsistent dataset manifest."""


class ContractViolation(ValueError):
    """Caller broke an interface precondition (shape, vocabulary, dimension)."""


class NumericError(RuntimeError):
    """Non-finite values surfaced during compute; message names the source."""
