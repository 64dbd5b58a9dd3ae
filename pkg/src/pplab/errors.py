"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, I/O and data
errors (``ParseError``, ``ValidationError``, ``OSError``) -> 3, check
failures (``CheckFailure``) -> 1.
"""

from __future__ import annotations

from dataclasses import dataclass


class PplabError(Exception):
    """Base class for all package errors."""


class ConfigError(PplabError):
    """Invalid configuration value; message names the offending field."""


class ParseError(PplabError):
    """A file did not parse as the expected JSON schema."""


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validation, as data."""

    code: str
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.code} at {self.path}: {self.message}"


class ValidationError(PplabError):
    """Scene or label data violates a schema invariant."""

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class FeatureDimMismatch(ValidationError):
    """Feature vector length differs from the corpus feature dimension."""


class ShapeMismatch(PplabError):
    """Two masks or arrays have incompatible extents."""


class EmptyMask(PplabError):
    """Operation requires at least one foreground pixel."""


class EmptyBag(PplabError):
    """Operation requires a bag with at least one proposal."""


class NoMaskAvailable(PplabError):
    """No proposal in the bag carries a mask."""


class MissingGT(PplabError):
    """Ground truth required but absent."""


class ZeroAreaBox(PplabError):
    """Box area is zero where a ratio needs it positive."""


class NonFiniteGradient(PplabError):
    """A computed gradient contains NaN or Inf."""


class NonFiniteLoss(PplabError):
    """Training loss became NaN or Inf; message carries the epoch index."""


class CheckFailure(PplabError):
    """A verification run (e.g. the gradient check) did not pass."""
