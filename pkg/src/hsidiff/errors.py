"""Exception hierarchy shared by every module in the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies rather than bare ValueError.
"""

from __future__ import annotations


class HsidiffError(Exception):
    """Base class for all package-specific errors."""


class ArgumentError(HsidiffError, ValueError):
    """A caller passed an argument outside the documented domain."""


class ValidationError(HsidiffError, ValueError):
    """Data is structurally well-formed but semantically inconsistent."""


class FormatError(HsidiffError, RuntimeError):
    """An on-disk container has a bad magic, header, or truncated payload."""


class NumericDomainError(HsidiffError, ArithmeticError):
    """A numeric operation left its valid domain (negative radicand, zero vector, ...)."""


class TrainingDivergedError(HsidiffError, RuntimeError):
    """A training loop produced NaN/Inf losses or parameters."""


class StateError(HsidiffError, RuntimeError):
    """An operation was invoked on an object in the wrong lifecycle state."""
