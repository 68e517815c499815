"""Captioned multi-instance matting video synthesis.

Foreground clips with mattes are resized, repositioned and alpha-composited
back-to-front onto background clips.  Every sample is a pure function of
``(config, sources, sample seed)``, so samples can be rebuilt bit-exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from scipy.stats import norm

from .errors import ConfigError, IngestionError, PlacementError, ShapeError
from .io import check_alpha, check_frames, read_frames, write_frames, write_jsonl

log = logging.getLogger(__name__)

# Rounded-clamped normal parameters whose moments on {1..5} are mean 2.5581,
# std 1.1926 (the published training-set statistics).  See calibrate_count_params.
COUNT_MEAN = 2.4889
COUNT_STD = 1.3382

BBOX_THRESHOLD = 0.05


@dataclass(frozen=True)
class Transform:
    scale: float
    offset_x: int
    offset_y: int


@dataclass
class InstanceSpec:
    """One foreground instance, already placed on the canvas."""

    instance_id: int
    foreground: np.ndarray  # (T, H, W, 3)
    matte: np.ndarray  # (T, H, W, 1), pre-occlusion
    caption: str
    transform: Transform
    source_clip: str = ""

    def __post_init__(self):
        if not self.caption.strip():
            raise IngestionError(f"instance {self.instance_id} has an empty caption")
        if self.foreground.shape[:3] != self.matte.shape[:3]:
            raise ShapeError(
                f"foreground {self.foreground.shape} and matte {self.matte.shape} disagree"
            )


@dataclass
class CompositeSample:
    sample_id: str
    background: np.ndarray
    instances: list[InstanceSpec]
    composite: np.ndarray
    seed: int
    split: str = "train"
    background_clip: str = ""

    def manifest_record(self) -> dict:
        t, h, w, _ = self.composite.shape
        return {
            "sample_id": self.sample_id,
            "seed": int(self.seed),
            "n_instances": len(self.instances),
            "instance_ids": [inst.instance_id for inst in self.instances],
            "width": int(w),
            "height": int(h),
            "n_frames": int(t),
            "split": self.split,
            "background_clip": self.background_clip,
            "foreground_clips": [inst.source_clip for inst in self.instances],
        }


@dataclass
class SynthConfig:
    n_train: int = 32
    n_val: int = 8
    n_frames: int = 16
    height: int = 64
    width: int = 64
    max_instances: int = 5
    count_mean: float = COUNT_MEAN
    count_std: float = COUNT_STD
    max_area_ratio: float = 4.0
    scale_range: tuple[float, float] = (0.5, 1.0)
    seed: int = 0
    max_tries: int = 100
    # Fraction of source clips reserved for the validation split.
    val_source_fraction: float = 0.3

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        if self.max_instances < 1:
            raise ConfigError("max_instances must be >= 1")
        if self.count_std < 0:
            raise ConfigError("count_std must be >= 0")
        if self.max_area_ratio < 1:
            raise ConfigError("max_area_ratio must be >= 1")
        if self.n_train < 0 or self.n_val < 0 or self.n_train + self.n_val < 1:
            raise ConfigError("split sizes must be non-negative and not both zero")
        if self.n_frames < 1 or self.height < 8 or self.width < 8:
            raise ConfigError("need n_frames >= 1 and height, width >= 8")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad scale_range {self.scale_range}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


# ---------------------------------------------------------------------------
# Instance count distribution


def instance_count_pmf(mean: float, std: float, max_n: int) -> np.ndarray:
    """Probabilities of 1..max_n under a normal rounded to nearest and clamped."""
    if max_n < 1 or std < 0:
        raise ConfigError("need max_n >= 1 and std >= 0")
    k = np.arange(1, max_n + 1, dtype=np.float64)
    if std == 0:
        n = int(min(max(math.floor(mean + 0.5), 1), max_n))
        return (k == n).astype(np.float64)
    upper = np.where(k == max_n, np.inf, k + 0.5)
    lower = np.where(k == 1, -np.inf, k - 0.5)
    return norm.cdf((upper - mean) / std) - norm.cdf((lower - mean) / std)


def count_moments(mean: float, std: float, max_n: int) -> tuple[float, float]:
    p = instance_count_pmf(mean, std, max_n)
    k = np.arange(1, max_n + 1)
    m = float(p @ k)
    return m, float(np.sqrt(p @ (k - m) ** 2))


def _grid_moments(means: np.ndarray, stds: np.ndarray, max_n: int) -> tuple[np.ndarray, np.ndarray]:
    """Moments of the rounded-clamped normal on a (means x stds) grid."""
    m, s = means[:, None, None], stds[None, :, None]
    k = np.arange(1, max_n + 1, dtype=np.float64)
    upper = np.where(k == max_n, np.inf, k + 0.5)
    lower = np.where(k == 1, -np.inf, k - 0.5)
    p = norm.cdf((upper - m) / s) - norm.cdf((lower - m) / s)
    mean = p @ k
    var = np.einsum("ijk,ijk->ij", p, (k - mean[..., None]) ** 2)
    return mean, np.sqrt(var)


def calibrate_count_params(
    target_mean: float, target_std: float, max_n: int = 5
) -> tuple[float, float]:
    """Grid-search (mean, std) so the clamped distribution hits the target moments.

    A coarse 0.01 grid is followed by a 1e-4 grid around the best cell.
    """
    def search(means, stds):
        cm, cs = _grid_moments(means, stds, max_n)
        err = (cm - target_mean) ** 2 + (cs - target_std) ** 2
        i, j = np.unravel_index(np.argmin(err), err.shape)
        return float(err[i, j]), float(means[i]), float(stds[j])

    e0, mc, sc = search(np.arange(0.5, max_n + 0.5, 0.01), np.arange(0.05, 3.0 * max_n, 0.01))
    e1, mf, sf = search(
        np.arange(mc - 0.01, mc + 0.01, 1e-4), np.arange(max(sc - 0.01, 1e-4), sc + 0.01, 1e-4)
    )
    best = (e1, mf, sf) if e1 <= e0 else (e0, mc, sc)
    return round(best[1], 4), round(best[2], 4)


def sample_instance_count(rng_seed: int, mean: float, std: float, max_n: int) -> int:
    if max_n < 1:
        raise ConfigError("max_n must be >= 1")
    if std < 0:
        raise ConfigError("std must be >= 0")
    x = np.random.default_rng(rng_seed).normal(mean, std)
    return int(min(max(math.floor(x + 0.5), 1), max_n))


# ---------------------------------------------------------------------------
# Geometry and compositing


def _resize(seq: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    out = np.empty((seq.shape[0], out_h, out_w, seq.shape[-1]), dtype=np.float32)
    for i, frame in enumerate(seq.astype(np.float32, copy=False)):
        r = cv2.resize(frame, (out_w, out_h), interpolation=cv2.INTER_LINEAR)
        out[i] = r.reshape(out_h, out_w, seq.shape[-1])
    return out


def apply_transform(
    fg: np.ndarray,
    matte: np.ndarray,
    transform: Transform,
    canvas_hw: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Resize ``fg`` and ``matte`` by the same scale and paste at the same offset.

    Offsets are the canvas position of the resized instance's top-left
    corner and may be negative.  Everything outside the pasted region is 0.
    """
    fg = check_frames(fg, "foreground")
    matte = check_alpha(matte, "matte")
    if fg.shape[:3] != matte.shape[:3]:
        raise ShapeError(f"foreground {fg.shape} and matte {matte.shape} disagree")
    if transform.scale <= 0:
        raise ConfigError("transform scale must be positive")
    t, h, w, _ = fg.shape
    ch, cw = canvas_hw
    nh = max(1, int(round(h * transform.scale)))
    nw = max(1, int(round(w * transform.scale)))

    y0, x0 = transform.offset_y, transform.offset_x
    cy0, cy1 = max(y0, 0), min(y0 + nh, ch)
    cx0, cx1 = max(x0, 0), min(x0 + nw, cw)
    if cy0 >= cy1 or cx0 >= cx1:
        raise PlacementError(f"instance at {transform} misses the {ch}x{cw} canvas")

    if (nh, nw) == (h, w):
        rfg, rmatte = fg.astype(np.float32), matte.astype(np.float32)
    else:
        rfg, rmatte = _resize(fg, nh, nw), _resize(matte, nh, nw)
    out_fg = np.zeros((t, ch, cw, 3), dtype=np.float32)
    out_matte = np.zeros((t, ch, cw, 1), dtype=np.float32)
    src = (slice(None), slice(cy0 - y0, cy1 - y0), slice(cx0 - x0, cx1 - x0))
    dst = (slice(None), slice(cy0, cy1), slice(cx0, cx1))
    out_fg[dst] = rfg[src]
    out_matte[dst] = rmatte[src]
    return np.clip(out_fg, 0, 1), np.clip(out_matte, 0, 1)


def composite(background: np.ndarray, instances: Sequence[InstanceSpec]) -> np.ndarray:
    """Blend instances over the background in list order (first = back-most)."""
    background = check_frames(background, "background")
    out = np.array(background, dtype=np.float64)
    for inst in instances:
        if inst.foreground.shape != out.shape or inst.matte.shape != out.shape[:3] + (1,):
            raise ShapeError(
                f"instance {inst.instance_id} shapes {inst.foreground.shape}/"
                f"{inst.matte.shape} do not match background {out.shape}"
            )
        a = inst.matte.astype(np.float64)
        out = a * inst.foreground + (1.0 - a) * out
    return np.clip(out, 0.0, 1.0)


def bbox_area(matte: np.ndarray, threshold: float = BBOX_THRESHOLD) -> int:
    """Area of the bounding box of ``matte > threshold`` over all frames."""
    mask = np.asarray(matte)[..., 0].max(axis=0) > threshold
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return 0
    return int((rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1))


def enforce_size_balance(instances: Sequence[InstanceSpec], max_ratio: float = 4.0) -> bool:
    if len(instances) == 0:
        raise ConfigError("enforce_size_balance needs at least one instance")
    if len(instances) == 1:
        return True
    areas = [bbox_area(inst.matte) for inst in instances]
    if min(areas) == 0:
        return False
    return max(areas) / min(areas) <= max_ratio


# ---------------------------------------------------------------------------
# Sources


@dataclass
class ForegroundClip:
    clip_id: str
    foreground: np.ndarray
    matte: np.ndarray
    caption: str


@dataclass
class SourcePool:
    """In-memory background and foreground clips for one split."""

    backgrounds: dict[str, np.ndarray] = field(default_factory=dict)
    foregrounds: dict[str, ForegroundClip] = field(default_factory=dict)


def _clip_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise IngestionError(f"source directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise IngestionError(f"source directory {root} is empty")
    return dirs


def _read_caption(clip: Path, caption_source: Path | None) -> str:
    path = caption_source / f"{clip.name}.txt" if caption_source else clip / "caption.txt"
    if not path.is_file():
        raise IngestionError(f"missing caption for foreground {clip.name}: {path}")
    text = " ".join(path.read_text(encoding="utf-8").split())
    if not text:
        raise IngestionError(f"empty caption for foreground {clip.name}: {path}")
    return text


def load_sources(
    config: SynthConfig,
    background_source: str | Path,
    foreground_source: str | Path,
    caption_source: str | Path | None = None,
) -> dict[str, SourcePool]:
    """Load source clips and partition them into disjoint train/val pools by clip."""
    bg_dirs = _clip_dirs(Path(background_source))
    fg_dirs = _clip_dirs(Path(foreground_source))
    cap_root = Path(caption_source) if caption_source else None

    rng = np.random.default_rng([config.seed, 7])
    splits = {"train": SourcePool(), "val": SourcePool()}

    def partition(items):
        order = rng.permutation(len(items))
        n_val = 0
        if config.n_val > 0:
            n_val = max(1, int(round(len(items) * config.val_source_fraction)))
            if config.n_train > 0 and n_val >= len(items):
                raise IngestionError("not enough source clips for disjoint train/val splits")
        val = {items[i] for i in order[:n_val]}
        return [(p, "val" if p in val else "train") for p in items]

    for path, split in partition(bg_dirs):
        splits[split].backgrounds[path.name] = read_frames(path)
    for path, split in partition(fg_dirs):
        caption = _read_caption(path, cap_root)
        fg = read_frames(path / "fg")
        matte = read_frames(path / "matte", gray=True)
        if fg.shape[:3] != matte.shape[:3]:
            raise IngestionError(f"foreground/matte shape mismatch in {path}")
        splits[split].foregrounds[path.name] = ForegroundClip(path.name, fg, matte, caption)

    for name, pool in splits.items():
        n = config.n_train if name == "train" else config.n_val
        if n == 0:
            continue
        if not pool.backgrounds or not pool.foregrounds:
            raise IngestionError(f"{name} split has no background or foreground clips")
        if len(pool.foregrounds) < config.max_instances:
            raise ConfigError(
                f"{name} split has {len(pool.foregrounds)} foreground clips, "
                f"fewer than max_instances={config.max_instances}"
            )
    return splits


# ---------------------------------------------------------------------------
# Sample construction


def derive_seed(master_seed: int, index: int, split: str) -> int:
    """64-bit per-sample seed, independent of build order."""
    tag = 0 if split == "train" else 1
    state = np.random.SeedSequence(master_seed, spawn_key=(tag, index)).generate_state(
        2, np.uint32
    )
    return int(state[0]) << 32 | int(state[1])


def _fit_clip(clip: np.ndarray, start: int, n_frames: int, hw: tuple[int, int]) -> np.ndarray:
    idx = np.minimum(np.arange(start, start + n_frames), clip.shape[0] - 1)
    out = clip[idx]
    if out.shape[1:3] != hw:
        out = _resize(out, *hw)
    return out.astype(np.float32)


def _draw_transform(rng, fg_hw, canvas_hw, scale_range) -> Transform:
    scale = float(rng.uniform(*scale_range))
    nh = max(1, int(round(fg_hw[0] * scale)))
    nw = max(1, int(round(fg_hw[1] * scale)))
    # Keep at least three quarters of the instance box on the canvas.
    oy = int(rng.integers(-(nh // 4), max(canvas_hw[0] - 3 * nh // 4, -(nh // 4)) + 1))
    ox = int(rng.integers(-(nw // 4), max(canvas_hw[1] - 3 * nw // 4, -(nw // 4)) + 1))
    return Transform(scale, ox, oy)


def make_sample(
    sample_id: str,
    seed: int,
    pool: SourcePool,
    config: SynthConfig,
    split: str = "train",
) -> CompositeSample:
    n = sample_instance_count(seed, config.count_mean, config.count_std, config.max_instances)
    rng = np.random.default_rng([seed, 1])
    canvas = (config.height, config.width)

    bg_ids = sorted(pool.backgrounds)
    bg_id = bg_ids[int(rng.integers(len(bg_ids)))]
    bg_clip = pool.backgrounds[bg_id]
    start = int(rng.integers(max(bg_clip.shape[0] - config.n_frames, 0) + 1))
    background = _fit_clip(bg_clip, start, config.n_frames, canvas)

    fg_ids = sorted(pool.foregrounds)
    chosen = [fg_ids[i] for i in rng.choice(len(fg_ids), size=n, replace=False)]
    clips = []
    for cid in chosen:
        clip = pool.foregrounds[cid]
        s = int(rng.integers(max(clip.foreground.shape[0] - config.n_frames, 0) + 1))
        clips.append(
            (
                clip,
                _fit_clip(clip.foreground, s, config.n_frames, clip.foreground.shape[1:3]),
                _fit_clip(clip.matte, s, config.n_frames, clip.matte.shape[1:3]),
            )
        )

    for _ in range(config.max_tries):
        instances = []
        for iid, (clip, fg, matte) in enumerate(clips):
            for _ in range(config.max_tries):
                tr = _draw_transform(rng, fg.shape[1:3], canvas, config.scale_range)
                try:
                    pfg, pmatte = apply_transform(fg, matte, tr, canvas)
                    break
                except PlacementError:
                    continue
            else:
                raise PlacementError(f"could not place {clip.clip_id} in {sample_id}")
            instances.append(InstanceSpec(iid, pfg, pmatte, clip.caption, tr, clip.clip_id))
        if enforce_size_balance(instances, config.max_area_ratio):
            break
    else:
        raise PlacementError(f"no size-balanced layout for {sample_id} in {config.max_tries} tries")

    return CompositeSample(
        sample_id=sample_id,
        background=background,
        instances=instances,
        composite=composite(background, instances).astype(np.float32),
        seed=seed,
        split=split,
        background_clip=bg_id,
    )


def plan_dataset(config: SynthConfig) -> list[dict]:
    """Sample ids, seeds and instance counts, before any pixels are touched."""
    plan = []
    for split, n in (("train", config.n_train), ("val", config.n_val)):
        for i in range(n):
            seed = derive_seed(config.seed, i, split)
            plan.append(
                {
                    "sample_id": f"{split}_{i:05d}",
                    "split": split,
                    "seed": seed,
                    "n_instances": sample_instance_count(
                        seed, config.count_mean, config.count_std, config.max_instances
                    ),
                }
            )
    return plan


def write_sample(root: str | Path, sample: CompositeSample) -> Path:
    out = Path(root) / sample.sample_id
    write_frames(out / "composite", sample.composite)
    for inst in sample.instances:
        write_frames(out / f"matte_{inst.instance_id}", inst.matte)
    lines = [f"{inst.instance_id}\t{inst.caption}" for inst in sample.instances]
    (out / "captions.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def build_dataset(
    config: SynthConfig,
    background_source: str | Path,
    foreground_source: str | Path,
    caption_source: str | Path | None,
    out_root: str | Path,
) -> Path:
    """Synthesize every planned sample under ``out_root``; return the manifest path."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    pools = load_sources(config, background_source, foreground_source, caption_source)
    records = []
    for entry in plan_dataset(config):
        sample = make_sample(entry["sample_id"], entry["seed"], pools[entry["split"]], config, entry["split"])
        try:
            write_sample(out_root, sample)
        except OSError as exc:
            raise IngestionError(f"failed writing {out_root / sample.sample_id}: {exc}") from exc
        records.append(sample.manifest_record())
        log.debug("wrote %s (%d instances)", sample.sample_id, len(sample.instances))
    manifest = out_root / "manifest.jsonl"
    write_jsonl(manifest, records)
    return manifest
