"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data
errors exit 2, numeric failures exit 3.
"""


class UsageError(Exception):
    """Bad flags, config keys, or argument combinations."""


class DataError(Exception):
    """Unreadable or malformed input data (images, manifests, checkpoints)."""


class NumericError(Exception):
    """Non-finite values where finite ones are required (NaN grads, failed checks)."""
