"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value or incompatible shapes/settings."""


class UsageError(RuntimeError):
    """An API was called in a state where the call is not allowed."""


class NonFiniteError(FloatingPointError):
    """A loss or intermediate value became NaN or infinite."""

    def __init__(self, what, value=None):
        self.what = what
        self.value = value
        msg = f"non-finite value in {what}"
        if value is not None:
            msg += f": {value!r}"
        super().__init__(msg)


def check_finite(what, value):
    """Raise NonFiniteError unless ``value`` (scalar or array) is all finite."""
    import numpy as np

    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(what, float(arr.ravel()[0]) if arr.size == 1 else None)
    return value
