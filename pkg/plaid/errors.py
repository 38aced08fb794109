"""Exception hierarchy shared by the library and the CLI.

The CLI maps ConfigError to exit status 2 and every other PlaidError to 1.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class PlaidError(Exception):
    """Base class for every error raised on purpose by this package."""


class DomainError(PlaidError, ValueError):
    """An argument lies outside the domain of the operation (t, tau, C ...)."""


class OrderingError(PlaidError, ValueError):
    """Two diffusion times were passed in the wrong order (needs s < t)."""


class ShapeError(PlaidError, ValueError):
    """Tensor shapes disagree."""


class SizeError(PlaidError, ValueError):
    """A batch or sample collection is too small for the operation."""


class TokenIndexError(PlaidError, IndexError):
    """A token id is outside [0, V)."""


class InsufficientDataError(PlaidError, ValueError):
    """Not enough distinct points to fit a curve."""


class NoMinimumError(PlaidError, ValueError):
    """A fitted quadratic has no interior minimum (curvature <= 0)."""


class SpecError(PlaidError, ValueError):
    """A guidance spec does not fit the sequence length or vocabulary."""


class GuidanceError(PlaidError, RuntimeError):
    """The guidance gradient came out non-finite."""


class ConfigError(PlaidError, ValueError):
    """Configuration failed schema validation."""

    def __init__(self, message: str, diagnostics: Optional[list] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class InputError(PlaidError, ValueError):
    """Input data is empty or too short."""


class CheckpointError(PlaidError, ValueError):
    """A checkpoint container is malformed or has an unsupported version."""


class TrainingError(PlaidError, RuntimeError):
    """A training step produced a non-finite loss."""

    def __init__(self, message: str, step: int, terms: Dict[str, Any]):
        super().__init__(f"{message} (step={step}, terms={terms})")
        self.step = step
        self.terms = terms


class ArgumentError(PlaidError, ValueError):
    """A required argument is missing or an option value is not recognised."""
