"""Readers for synthesized sample directories."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError
from .io import read_frames, read_jsonl


@dataclass
class LoadedSample:
    sample_id: str
    composite: np.ndarray  # (T, H, W, 3)
    mattes: dict[int, np.ndarray]  # instance id -> (T, H, W, 1)
    captions: dict[int, str]


def read_captions(path: str | Path) -> dict[int, str]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing captions file {path}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        iid, _, caption = line.partition("\t")
        out[int(iid)] = caption.strip()
    return out


def load_manifest(root: str | Path, split: str | None = None) -> list[dict]:
    path = Path(root) / "manifest.jsonl"
    if not path.is_file():
        raise IngestionError(f"no manifest at {path}")
    return [r for r in read_jsonl(path) if split is None or r["split"] == split]


def read_mattes(sample_dir: str | Path) -> dict[int, np.ndarray]:
    sample_dir = Path(sample_dir)
    dirs = sorted(sample_dir.glob("matte_*"), key=lambda p: int(p.name.split("_", 1)[1]))
    return {int(d.name.split("_", 1)[1]): read_frames(d, gray=True) for d in dirs}


def load_sample(root: str | Path, sample_id: str) -> LoadedSample:
    d = Path(root) / sample_id
    if not d.is_dir():
        raise IngestionError(f"missing sample directory {d}")
    return LoadedSample(
        sample_id=sample_id,
        composite=read_frames(d / "composite"),
        mattes=read_mattes(d),
        captions=read_captions(d / "captions.txt"),
    )


def load_split(root: str | Path, split: str) -> list[LoadedSample]:
    return [load_sample(root, r["sample_id"]) for r in load_manifest(root, split)]


def codec_clips(samples: list[LoadedSample]) -> list[np.ndarray]:
    """Composite videos plus every instance matte, as codec training clips."""
    clips = []
    for s in samples:
        clips.append(s.composite.astype(np.float32))
        clips.extend(m.astype(np.float32) for m in s.mattes.values())
    return clips
