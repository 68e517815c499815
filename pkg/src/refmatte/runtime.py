"""Compute device selection from the environment."""
from __future__ import annotations

import os

import torch

from .errors import ConfigError

DEVICE_ENV = "REFMATTE_DEVICE"


def device() -> torch.device:
    """Device named by ``REFMATTE_DEVICE`` (default ``cpu``)."""
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"bad {DEVICE_ENV}={name!r}: {exc}") from exc
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"{DEVICE_ENV}={name!r} but CUDA is not available")
    return dev
