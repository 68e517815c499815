"""Frame-sequence PNG I/O and line-delimited JSON helpers.

Visual arrays follow one convention throughout the package: frames are
``(T, H, W, 3)`` float arrays and mattes are ``(T, H, W, 1)`` float arrays,
both with values in ``[0, 1]``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from PIL import Image

from .errors import IngestionError, ShapeError

FRAME_PATTERN = "{:06d}.png"


def check_frames(x: np.ndarray, name: str = "frames") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"{name} must be (T, H, W, 3), got {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 8 or x.shape[2] < 8:
        raise ShapeError(f"{name} needs T >= 1 and H, W >= 8, got {x.shape}")
    return x


def check_alpha(x: np.ndarray, name: str = "alpha") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[-1] != 1:
        raise ShapeError(f"{name} must be (T, H, W, 1), got {x.shape}")
    return x


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_frames(directory: str | Path, frames: np.ndarray) -> None:
    """Write a ``(T, H, W, C)`` sequence as 8-bit PNGs (RGB for C=3, L for C=1)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = to_uint8(frames)
    for i, frame in enumerate(data):
        if frame.shape[-1] == 1:
            img = Image.fromarray(frame[..., 0], mode="L")
        else:
            img = Image.fromarray(frame, mode="RGB")
        img.save(directory / FRAME_PATTERN.format(i), optimize=False)


def read_frames(directory: str | Path, gray: bool = False) -> np.ndarray:
    """Read a PNG sequence into a float array in [0, 1].

    ``gray=True`` returns ``(T, H, W, 1)``, otherwise ``(T, H, W, 3)``.
    """
    directory = Path(directory)
    files = sorted(directory.glob("*.png"))
    if not files:
        raise IngestionError(f"no PNG frames in {directory}")
    out = []
    for f in files:
        try:
            with Image.open(f) as img:
                arr = np.asarray(img.convert("L" if gray else "RGB"), dtype=np.float32)
        except OSError as exc:
            raise IngestionError(f"cannot read frame {f}: {exc}") from exc
        out.append(arr[..., None] if gray else arr)
    shapes = {a.shape for a in out}
    if len(shapes) != 1:
        raise IngestionError(f"inconsistent frame sizes in {directory}: {sorted(shapes)}")
    return np.stack(out) / 255.0


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def append_jsonl(path: str | Path, record: dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
