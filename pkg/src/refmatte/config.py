"""Run configuration: nested YAML sections with named presets."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .codec import CodecConfig
from .diffusion import DenoiserConfig
from .errors import ConfigError
from .synth import SynthConfig
from .text import TextConfig



@dataclass
class SourcesConfig:
    background_dir: str | None = None
    foreground_dir: str | None = None
    caption_dir: str | None = None
    # Generate procedural sources under <run_dir>/sources when dirs are unset.
    toy: bool = True
    toy_backgrounds: int = 8
    toy_seed: int = 0


@dataclass
class ScheduleConfig:
    T_diff: int = 1000
    kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    sample_steps: int = 50


@dataclass
class LossConfig:
    lambda1: float = 0.9
    tau: float = 0.1


@dataclass
class TrainConfig:
    lr: float = 1e-5
    steps: int = 10000
    batch_size: int = 1
    checkpoint_every: int = 500
    grad_clip: float = 1.0
    lr_final_ratio: float = 1.0  # cosine decay to lr * ratio; 1 keeps lr constant

    def __post_init__(self):
        if not 0.0 < self.lr_final_ratio <= 1.0:
            raise ConfigError(f"lr_final_ratio must be in (0, 1], got {self.lr_final_ratio}")


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    data_root: str | None = None  # defaults to <run_dir>/data
    sources: SourcesConfig = field(default_factory=SourcesConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    text: TextConfig = field(default_factory=TextConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def data_path(self) -> Path:
        return Path(self.data_root) if self.data_root else Path(self.run_dir) / "data"

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.run_dir) / "checkpoints"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"]["scale_range"] = list(self.synth.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        sections = {f.name: f.type for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        typed = {
            "sources": SourcesConfig, "synth": SynthConfig, "codec": CodecConfig,
            "denoiser": DenoiserConfig, "text": TextConfig, "schedule": ScheduleConfig,
            "loss": LossConfig, "train": TrainConfig,
        }
        for key, value in d.items():
            if key not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            if key in typed:
                kwargs[key] = _build(typed[key], value or {}, key)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {section!r} section: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


PRESETS: dict[str, dict] = {
    # Desk-scale dataset: 32 train / 8 val clips of 16x64x64.
    "toy": {
        "synth": {"n_train": 32, "n_val": 8},
        "codec": {"steps": 3000},
        "train": {"lr": 1e-3, "steps": 2000, "checkpoint_every": 500, "lr_final_ratio": 0.05},
    },
    # Four training samples for the end-to-end overfit check.
    "overfit": {
        "synth": {"n_train": 4, "n_val": 0},
        "codec": {"steps": 1200},
        "train": {"lr": 1e-3, "steps": 2000, "batch_size": 16, "checkpoint_every": 1000,
                  "lr_final_ratio": 0.05},
    },
    # Published scale; needs real sources.
    "full": {
        "sources": {"toy": False},
        "synth": {"n_train": 9000, "n_val": 1000, "n_frames": 120, "height": 480, "width": 720},
        "train": {"lr": 1e-5, "steps": 10000},
    },
}


def load_config(path: str | Path | None = None, preset: str | None = None, **overrides) -> RunConfig:
    """Build a RunConfig from a preset, a YAML file, then keyword overrides.

    A ``preset:`` key inside the YAML file is honored when ``preset`` is None.
    Relative paths in the file are resolved against the file's directory.
    """
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a mapping")
        base = path.parent
        for key in ("run_dir", "data_root"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str(base / data[key])
        src = data.get("sources") or {}
        for key in ("background_dir", "foreground_dir", "caption_dir"):
            if src.get(key) and not Path(src[key]).is_absolute():
                src[key] = str(base / src[key])
    preset = preset or data.pop("preset", None)
    data.pop("preset", None)
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged = copy.deepcopy(PRESETS[preset])
    merged = _merge(merged, data)
    merged = _merge(merged, overrides)
    cfg = RunConfig.from_dict(merged)
    # Codec and synth seeds follow the master seed unless set explicitly.
    if "seed" not in (merged.get("codec") or {}):
        cfg.codec.seed = cfg.seed
    if "seed" not in (merged.get("synth") or {}):
        cfg.synth.seed = cfg.seed
    return cfg


def save_config(cfg: RunConfig, path: str | Path) -> None:
    """Write ``cfg`` as YAML with absolute run paths, so it reloads from anywhere."""
    d = cfg.to_dict()
    for key in ("run_dir", "data_root"):
        if d[key]:
            d[key] = str(Path(d[key]).resolve())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(d, sort_keys=True))
