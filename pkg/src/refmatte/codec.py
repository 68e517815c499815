"""Small 3D convolutional VAE mapping clips to latent blocks.

Default compression is 4x temporally and 8x spatially into 16 channels, so a
``(16, 64, 64, 3)`` clip becomes a ``(4, 8, 8, 16)`` latent block.  Mattes are
replicated to three channels and go through the same codec as videos.

Tensors inside the network are channel-first ``(B, C, T, H, W)``; the public
``encode``/``decode`` helpers take and return channel-last numpy clips.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DivergenceError, ShapeError, StateError
from .io import append_jsonl

log = logging.getLogger(__name__)


@dataclass
class CodecConfig:
    latent_channels: int = 16
    width: int = 32
    temporal_factor: int = 4
    spatial_factor: int = 8
    in_channels: int = 3
    # Training
    steps: int = 1200
    batch_size: int = 4
    # Probability that a batch slot is drawn from the single-channel (matte)
    # clips rather than uniformly from all clips.
    matte_fraction: float = 0.5
    lr: float = 2e-3
    kl_weight: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        for name in ("temporal_factor", "spatial_factor"):
            f = getattr(self, name)
            if f < 1 or f & (f - 1):
                raise ConfigError(f"{name} must be a power of two, got {f}")
        if self.latent_channels < 1 or self.width < 1:
            raise ConfigError("latent_channels and width must be positive")
        if not 0.0 <= self.matte_fraction <= 1.0:
            raise ConfigError("matte_fraction must be in [0, 1]")

    @property
    def factors(self) -> tuple[int, int, int]:
        return (self.temporal_factor, self.spatial_factor, self.spatial_factor)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class LatentBlock:
    """Latent tensor ``(C, T', H', W')`` plus the clip length it came from."""

    data: torch.Tensor
    n_frames: int

    @property
    def shape(self) -> tuple[int, ...]:
        """Channel-last shape ``(T', H', W', C)``."""
        c, t, h, w = self.data.shape
        return (t, h, w, c)

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().permute(1, 2, 3, 0).numpy()


def latent_shape(clip_shape: Sequence[int], cfg: CodecConfig) -> tuple[int, int, int, int]:
    t, h, w = clip_shape[:3]
    ft, fs, _ = cfg.factors
    if h % fs or w % fs:
        raise ShapeError(f"H, W = {h}, {w} must be divisible by {fs}")
    return (math.ceil(t / ft), h // fs, w // fs, cfg.latent_channels)


def _stage_strides(cfg: CodecConfig) -> list[tuple[int, int, int]]:
    nt = int(math.log2(cfg.temporal_factor))
    ns = int(math.log2(cfg.spatial_factor))
    n = max(nt, ns)
    return [(2 if i < nt else 1, 2 if i < ns else 1, 2 if i < ns else 1) for i in range(n)]


def _upsample(c_in: int, c_out: int, stride: tuple[int, int, int]) -> nn.ConvTranspose3d:
    # Overlapping kernels (4 for stride 2, 3 for stride 1) avoid patch seams.
    kernel = tuple(4 if s == 2 else 3 for s in stride)
    return nn.ConvTranspose3d(c_in, c_out, kernel, stride=stride, padding=1)


class VideoVAE(nn.Module):
    """Strided conv encoder and transposed-conv decoder with a diagonal Gaussian latent."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        strides = _stage_strides(cfg)
        if not strides:
            raise ConfigError("VideoVAE needs some compression; use IdentityCodec for 1x1x1")
        w, c = cfg.width, cfg.latent_channels

        enc: list[nn.Module] = []
        ch = cfg.in_channels
        for s in strides:
            enc += [nn.Conv3d(ch, w, 3, stride=s, padding=1), nn.SiLU()]
            ch = w
        enc += [nn.Conv3d(w, w, 3, padding=1), nn.SiLU(), nn.Conv3d(w, 2 * c, 1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv3d(c, w, 3, padding=1), nn.SiLU()]
        rev = strides[::-1]
        for s in rev[:-1]:
            dec += [_upsample(w, w, s), nn.SiLU(), nn.Conv3d(w, w, 3, padding=1), nn.SiLU()]
        dec += [_upsample(w, cfg.in_channels, rev[-1])]
        self.decoder = nn.Sequential(*dec)

    def moments(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encoder(x)
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def forward(self, x: torch.Tensor, sample: bool = False, generator=None):
        mean, logvar = self.moments(x)
        z = mean
        if sample:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
            z = mean + torch.exp(0.5 * logvar) * noise
        return self.decoder(z), mean, logvar


def pad_time(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Replicate the last frame of ``(B, C, T, H, W)`` until T divides ``factor``."""
    t = x.shape[2]
    extra = (-t) % factor
    if extra == 0:
        return x
    return torch.cat([x, x[:, :, -1:].expand(-1, -1, extra, -1, -1)], dim=2)


def to_tensor(clip: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Channel-last clip ``(T, H, W, C)`` to ``(1, 3, T, H, W)``; C=1 is replicated."""
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.shape[-1] not in (1, 3):
        raise ShapeError(f"expected (T, H, W, 1|3) clip, got {clip.shape}")
    if clip.shape[-1] == 1:
        clip = np.repeat(clip, 3, axis=-1)
    return torch.from_numpy(np.ascontiguousarray(clip)).to(dtype).permute(3, 0, 1, 2).unsqueeze(0)


def from_tensor(x: torch.Tensor) -> np.ndarray:
    return x[0].detach().cpu().permute(1, 2, 3, 0).numpy()


class Codec:
    """Inference wrapper around a :class:`VideoVAE` (deterministic mean encoding)."""

    trained: bool

    def __init__(self, model: VideoVAE, trained: bool = False, step: int = 0):
        self.model = model.eval()
        self.cfg = model.cfg
        self.trained = trained
        self.step = step

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    @property
    def device(self):
        return next(self.model.parameters()).device

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """Mean latent of a batch ``(B, 3, T, H, W)``; T is replicate-padded."""
        fs = self.cfg.spatial_factor
        if x.shape[-1] % fs or x.shape[-2] % fs:
            raise ShapeError(f"H, W = {tuple(x.shape[-2:])} must be divisible by {fs}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        with torch.no_grad():
            return self.model.moments(pad_time(x, self.cfg.temporal_factor))[0]

    def decode_tensor(self, z: torch.Tensor, n_frames: int | None = None) -> torch.Tensor:
        if z.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"latent has {z.shape[1]} channels, codec expects {self.cfg.latent_channels}")
        with torch.no_grad():
            out = self.model.decoder(z).clamp(0.0, 1.0)
        return out if n_frames is None else out[:, :, :n_frames]

    def encode(self, clip: np.ndarray) -> LatentBlock:
        x = to_tensor(clip, self.dtype).to(self.device)
        return LatentBlock(self.encode_tensor(x)[0], n_frames=x.shape[2])

    def decode(self, z: LatentBlock) -> np.ndarray:
        return from_tensor(self.decode_tensor(z.data.unsqueeze(0), z.n_frames))


class IdentityCodec:
    """Pass-through codec with 1x1x1 compression; a reference point for probes."""

    trained = True

    def encode(self, clip: np.ndarray) -> LatentBlock:
        x = to_tensor(clip, torch.float64)
        return LatentBlock(x[0], n_frames=x.shape[2])

    def decode(self, z: LatentBlock) -> np.ndarray:
        return from_tensor(z.data.unsqueeze(0).clamp(0.0, 1.0))


# ---------------------------------------------------------------------------
# Training


def vae_loss(model: VideoVAE, x: torch.Tensor, kl_weight: float, generator=None):
    """Reconstruction MSE plus ``kl_weight`` times the mean per-element KL to N(0, I)."""
    recon, mean, logvar = model(x, sample=True, generator=generator)
    rec = torch.mean((recon - x) ** 2)
    kl = 0.5 * torch.mean(mean**2 + torch.exp(logvar) - 1.0 - logvar)
    return rec + kl_weight * kl, rec, kl


def reconstruction_loss(model: VideoVAE, x: torch.Tensor) -> torch.Tensor:
    """Deterministic (mean-latent) reconstruction MSE."""
    mean, _ = model.moments(x)
    return torch.mean((model.decoder(mean) - x) ** 2)


def weights_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_codec(
    clips: Sequence[np.ndarray],
    cfg: CodecConfig,
    log_path: str | Path | None = None,
    callback: Callable[[int, float], None] | None = None,
    device: torch.device | str = "cpu",
) -> Codec:
    """Fit a :class:`VideoVAE` to channel-last clips.

    Batches are drawn with replacement, with matte clips oversampled by
    ``cfg.matte_fraction``, and randomly mirrored left-right.  The per-step
    loss curve is appended to ``log_path`` as JSON lines.
    """
    if len(clips) == 0:
        raise ConfigError("train_codec needs at least one clip")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator(device=device).manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    data = torch.cat([pad_time(to_tensor(c), cfg.temporal_factor) for c in clips]).to(device)
    matte_idx = np.flatnonzero([np.shape(c)[-1] == 1 for c in clips])
    model = VideoVAE(cfg).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1), eta_min=cfg.lr * 0.05)
    model.train()
    for step in range(cfg.steps):
        idx = rng.integers(0, data.shape[0], size=cfg.batch_size)
        if len(matte_idx) and cfg.matte_fraction > 0:
            pick = rng.random(cfg.batch_size) < cfg.matte_fraction
            idx = np.where(pick, matte_idx[rng.integers(0, len(matte_idx), size=cfg.batch_size)], idx)
        x = data[torch.from_numpy(idx).to(device)]
        flip = torch.from_numpy(rng.random(cfg.batch_size) < 0.5).to(device)
        x = torch.where(flip[:, None, None, None, None], x.flip(-1), x)
        loss, rec, kl = vae_loss(model, x, cfg.kl_weight, gen)
        if not torch.isfinite(loss):
            raise DivergenceError(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log_path is not None:
            append_jsonl(log_path, {"step": step, "loss": loss.item(), "rec": rec.item(), "kl": kl.item()})
        if callback is not None:
            callback(step, loss.item())
        if step % 100 == 0:
            log.info("codec step %d loss %.5f", step, loss.item())
    return Codec(model, trained=True, step=cfg.steps)


# ---------------------------------------------------------------------------
# Diagnostics


def roundtrip_alpha(codec, matte: np.ndarray) -> np.ndarray:
    """Decode(encode(matte)) collapsed back to one channel by channel mean."""
    return codec.decode(codec.encode(matte)).mean(axis=-1, keepdims=True)


def noise_attenuation_probe(
    matte: np.ndarray,
    noise_scale: float,
    codec,
    trials: int = 16,
    seed: int = 0,
) -> float:
    """Mean ratio of round-trip error to injected noise energy.

    Noise is Gaussian with std ``noise_scale``; the noisy matte is clipped to
    [0, 1] and the clipped perturbation is what the ratio divides by.
    """
    if not getattr(codec, "trained", False):
        raise StateError("noise_attenuation_probe needs a trained codec")
    if noise_scale <= 0:
        raise ConfigError("noise_scale must be positive")
    matte = np.asarray(matte, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(trials):
        noisy = np.clip(matte + rng.normal(0.0, noise_scale, matte.shape), 0.0, 1.0)
        eps = noisy - matte
        energy = float(np.sum(eps**2))
        if energy == 0.0:
            continue
        rec = roundtrip_alpha(codec, noisy).astype(np.float64)
        ratios.append(float(np.sum((rec - matte) ** 2)) / energy)
    if not ratios:
        raise ConfigError("noise vanished after clipping in every trial")
    return float(np.mean(ratios))
