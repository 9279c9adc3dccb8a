"""Exception types shared across the package."""


class KiclError(Exception):
    """Base class for all package errors."""


class WarmupError(KiclError, ValueError):
    """Not enough history for a rolling window."""


class CalendarRangeError(KiclError, ValueError):
    """A timestamp or day falls outside the trading calendar."""


class InputError(KiclError, ValueError):
    """Malformed or out-of-domain input values."""


class BankruptcyError(KiclError, ValueError):
    """A daily return at or below -100%."""


class ShapeError(KiclError, ValueError):
    """Array shapes do not chain or are not congruent."""


class StaleCacheError(KiclError, RuntimeError):
    """A forward cache was produced by different parameters."""


class SplitError(KiclError, ValueError):
    """A chronological split cannot be formed."""


class ConfigError(KiclError, ValueError):
    """Configuration failed schema validation."""


class TrainingDivergence(KiclError, RuntimeError):
    """Non-finite loss or gradient during training.

    ``diagnostics`` holds the step and the offending quantities; ``checkpoint``
    holds the last finite model state when the trainer had one.
    """

    def __init__(self, message, diagnostics=None, checkpoint=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.checkpoint = checkpoint


class StageError(KiclError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
