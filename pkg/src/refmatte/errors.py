"""Exception types raised across the package."""


class RefMatteError(Exception):
    """Base class for all package errors."""


class ConfigError(RefMatteError, ValueError):
    """Invalid configuration or parameter values."""


class ShapeError(RefMatteError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class PlacementError(RefMatteError):
    """A transformed instance does not intersect the canvas."""


class IngestionError(RefMatteError):
    """Source data is missing or malformed."""


class StepError(RefMatteError, ValueError):
    """A diffusion step index is out of range or produced non-finite values."""


class StateError(RefMatteError):
    """An object is used in a state that does not support the request."""


class RegistrationError(RefMatteError):
    """A text encoder name is already registered or unknown."""


class DivergenceError(RefMatteError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class DegenerateInputError(RefMatteError, ValueError):
    """An input makes the quantity undefined (e.g. a zero vector)."""
