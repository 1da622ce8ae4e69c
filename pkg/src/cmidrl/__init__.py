"""Conditional-mutual-information regularised SAC on a two-variant point-mass task."""

from .errors import ConfigurationError, NonFiniteError, UsageError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "NonFiniteError", "UsageError", "__version__"]
