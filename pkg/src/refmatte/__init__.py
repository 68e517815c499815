"""Text-referred video matting with latent diffusion at desk scale."""
from .errors import (
    ConfigError,
    DegenerateInputError,
    DivergenceError,
    IngestionError,
    PlacementError,
    RefMatteError,
    RegistrationError,
    ShapeError,
    StateError,
    StepError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "DivergenceError",
    "IngestionError",
    "PlacementError",
    "RefMatteError",
    "RegistrationError",
    "ShapeError",
    "StateError",
    "StepError",
    "__version__",
]
