"""Versioned checkpoint container.

A checkpoint is a single file written with ``torch.save`` holding a plain
dict (loaded back with ``weights_only=True``)::

    format        "refmatte-ckpt"
    version       container version (int)
    kind          "codec" or "diffusion"
    step          training steps completed
    config        run config as a dict
    config_digest sha256 prefix of the canonical JSON config
    codec         {"config": CodecConfig dict, "state": state_dict}
    denoiser      {"config": DenoiserConfig dict, "state": state_dict}  (diffusion only)
    optimizer     optimizer state_dict or None
    rng           {"numpy": bit generator state as JSON text, "torch": RNG byte tensor}
    metrics       flat dict of floats
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Any

import torch

from .codec import Codec, CodecConfig, VideoVAE
from .diffusion import DenoiserConfig, LatentDenoiser
from .errors import IngestionError

FORMAT = "refmatte-ckpt"
VERSION = 1


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    kind: str,
    codec: Codec,
    step: int,
    config: dict,
    denoiser: LatentDenoiser | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    rng: dict | None = None,
    metrics: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob: dict[str, Any] = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "step": int(step),
        "config": config,
        "config_digest": config_digest(config),
        "codec": {"config": asdict(codec.cfg), "state": codec.model.state_dict(), "step": codec.step},
        "denoiser": None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": rng,
        "metrics": metrics or {},
    }
    if denoiser is not None:
        blob["denoiser"] = {"config": asdict(denoiser.cfg), "state": denoiser.state_dict()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise IngestionError(f"{path} is not a refmatte checkpoint")
    if blob["version"] > VERSION:
        raise IngestionError(f"{path} has container version {blob['version']} > {VERSION}")
    return blob


def codec_from_blob(blob: dict) -> Codec:
    cfg = CodecConfig(**blob["codec"]["config"])
    model = VideoVAE(cfg)
    model.load_state_dict(blob["codec"]["state"])
    return Codec(model, trained=True, step=blob["codec"].get("step", blob["step"]))


def denoiser_from_blob(blob: dict) -> LatentDenoiser:
    if blob.get("denoiser") is None:
        raise IngestionError("checkpoint holds no denoiser (is it a codec checkpoint?)")
    model = LatentDenoiser(DenoiserConfig(**blob["denoiser"]["config"]))
    model.load_state_dict(blob["denoiser"]["state"])
    return model.eval()
