"""Video-conditioned latent diffusion: schedules, denoiser and sampling.

Step indices are 1-based throughout: ``t = 1`` is the least noisy step and
``t = T_diff`` the noisiest.  Schedule arrays are indexed with ``t - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError, StepError
from .text import TextConfig, TextEmbedding, encode_text


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    # Original step index fed to the denoiser for each entry (respaced schedules).
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise StepError(f"step {t} outside [1, {self.T}]")
        return t - 1

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def _from_betas(betas: np.ndarray, timesteps: np.ndarray | None = None) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = betas * (1.0 - prev) / (1.0 - alpha_bar)
    if timesteps is None:
        timesteps = np.arange(1, len(betas) + 1)
    return NoiseSchedule(betas, alpha_bar, posterior_var, np.asarray(timesteps, dtype=np.int64))


def make_schedule(
    T_diff: int = 1000,
    kind: str = "linear",
    beta_min: float = 1e-4,
    beta_max: float = 2e-2,
) -> NoiseSchedule:
    """Linear or cosine beta schedule with the standard posterior variance.

    The cosine variant derives betas from a squared-cosine signal curve and
    clips them into ``[beta_min, beta_max]``.
    """
    if T_diff < 1:
        raise ConfigError("T_diff must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T_diff, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        x = np.arange(T_diff + 1, dtype=np.float64) / T_diff
        f = np.cos((x + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return _from_betas(betas)


def respace(schedule: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Evenly strided sub-schedule with ``steps`` entries ending at ``T_diff``.

    The retained cumulative products are kept exactly; per-step betas are
    re-derived from their ratios.
    """
    if not 1 <= steps <= schedule.T:
        raise ConfigError(f"steps must be in [1, {schedule.T}]")
    ts = np.unique(np.round(np.linspace(1, schedule.T, steps)).astype(np.int64))
    ab = schedule.alpha_bar[ts - 1]
    prev = np.concatenate([[1.0], ab[:-1]])
    return _from_betas(1.0 - ab / prev, schedule.timesteps[ts - 1])


def forward_sample(x0, t: int, eps, s: NoiseSchedule):
    """Draw from q(x_t | x_0) given the standard-normal draw ``eps``."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    ab = float(s.alpha_bar[s.check(t)])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t: int, eps_hat, s: NoiseSchedule):
    ab = float(s.alpha_bar[s.check(t)])
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def posterior_mean(x_t, t: int, eps_hat, s: NoiseSchedule):
    i = s.check(t)
    beta, ab = float(s.betas[i]), float(s.alpha_bar[i])
    return (x_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)


def reverse_step(x_t, t: int, eps_hat, s: NoiseSchedule, rng=None):
    """One ancestral step x_t -> x_{t-1}; no noise is added at t = 1.

    ``rng`` is a ``torch.Generator`` for tensors or a numpy ``Generator``
    for arrays.
    """
    s.check(t)
    finite = torch.isfinite(eps_hat).all() if torch.is_tensor(eps_hat) else np.isfinite(eps_hat).all()
    if not finite:
        raise StepError(f"non-finite noise prediction at step {t}")
    mean = posterior_mean(x_t, t, eps_hat, s)
    if t == 1:
        return mean
    sigma = math.sqrt(float(s.posterior_var[t - 1]))
    if torch.is_tensor(x_t):
        xi = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype, device=x_t.device)
    else:
        xi = (rng or np.random.default_rng()).standard_normal(np.shape(x_t))
    return mean + sigma * xi


# ---------------------------------------------------------------------------
# Denoiser


@dataclass
class DenoiserConfig:
    latent_channels: int = 16
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    text_dim: int = 64
    max_text: int = 32
    version: str = "1"


def sinusoidal(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of ``pos`` (any shape) with ``dim`` channels."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = pos.to(torch.float64)[..., None] * freqs
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        out = torch.cat([out, torch.zeros_like(out[..., :1])], dim=-1)
    return out


def positional_3d(t: int, h: int, w: int, dim: int) -> torch.Tensor:
    """(t*h*w, dim) factorized sinusoidal positions, split across the three axes."""
    d_t = dim // 3
    d_h = dim // 3
    d_w = dim - d_t - d_h
    gt, gh, gw = torch.meshgrid(torch.arange(t), torch.arange(h), torch.arange(w), indexing="ij")
    return torch.cat(
        [sinusoidal(gt.reshape(-1), d_t), sinusoidal(gh.reshape(-1), d_h), sinusoidal(gw.reshape(-1), d_w)],
        dim=-1,
    )


class LatentDenoiser(nn.Module):
    """Transformer over latent voxels with text slots prepended once at the input.

    The video and noisy-matte latents are concatenated along channels, so
    the input projection sees ``2 * latent_channels`` features per voxel.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.latent_channels, cfg.d_model
        self.in_proj = nn.Linear(2 * c, d)
        with torch.no_grad():
            # Video-condition half starts as a copy of the noisy-latent half.
            self.in_proj.weight[:, :c].copy_(self.in_proj.weight[:, c:])
        self.text_proj = nn.Linear(cfg.text_dim, d)
        self.text_slots = nn.Parameter(torch.randn(cfg.max_text, d) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d, cfg.heads, dim_feedforward=4 * d, dropout=0.0,
                activation="gelu", batch_first=True, norm_first=True,
            )
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, c)

    def forward(self, z_video, z_noise, t, text_tokens, text_mask):
        """Predict the noise in ``z_noise``.

        ``z_video``/``z_noise`` are ``(B, C, T, H, W)``; ``t`` is ``(B,)``
        original step indices; ``text_tokens`` is ``(B, L, D)`` with boolean
        ``text_mask`` ``(B, L)``.
        """
        if z_video.shape != z_noise.shape:
            raise ShapeError(f"video latent {tuple(z_video.shape)} != noise latent {tuple(z_noise.shape)}")
        b, c, tt, hh, ww = z_noise.shape
        if c != self.cfg.latent_channels:
            raise ShapeError(f"latent has {c} channels, denoiser expects {self.cfg.latent_channels}")
        dtype = self.in_proj.weight.dtype
        x = torch.cat([z_video, z_noise], dim=1).flatten(2).transpose(1, 2)
        h = self.in_proj(x) + positional_3d(tt, hh, ww, self.cfg.d_model).to(dtype)
        temb = self.time_mlp(sinusoidal(torch.as_tensor(t), self.cfg.d_model).to(dtype))
        h = h + temb[:, None, :]
        txt = self.text_proj(text_tokens.to(dtype)) + self.text_slots + temb[:, None, :]
        seq = torch.cat([txt, h], dim=1)
        pad = torch.cat(
            [~text_mask.bool(), torch.zeros(b, h.shape[1], dtype=torch.bool, device=h.device)], dim=1
        )
        for blk in self.blocks:
            seq = blk(seq, src_key_padding_mask=pad)
        out = self.out(self.norm(seq[:, txt.shape[1]:]))
        return out.transpose(1, 2).reshape(b, c, tt, hh, ww)


@dataclass
class DiffusionInput:
    z_video: torch.Tensor  # (C, T', H', W')
    z_noise: torch.Tensor
    t: int
    e_text: TextEmbedding

    def __post_init__(self):
        if tuple(self.z_video.shape) != tuple(self.z_noise.shape):
            raise ShapeError(
                f"video latent {tuple(self.z_video.shape)} and noise latent "
                f"{tuple(self.z_noise.shape)} must match"
            )


def text_tensors(emb: TextEmbedding, dtype=torch.float32):
    return torch.from_numpy(emb.tokens).to(dtype)[None], torch.from_numpy(emb.mask)[None]


def denoise_step_predict(inp: DiffusionInput, model: LatentDenoiser) -> torch.Tensor:
    """Noise prediction for a single unbatched input."""
    dtype = model.in_proj.weight.dtype
    tokens, mask = text_tensors(inp.e_text, dtype)
    with torch.no_grad():
        out = model(
            inp.z_video[None].to(dtype),
            inp.z_noise[None].to(dtype),
            torch.tensor([inp.t]),
            tokens,
            mask,
        )
    return out[0]


def sample_latent(
    z_video: torch.Tensor,
    emb: TextEmbedding,
    model: LatentDenoiser,
    schedule: NoiseSchedule,
    seed: int,
) -> torch.Tensor:
    """Run the full reverse chain of ``schedule`` from pure noise."""
    dtype, dev = model.in_proj.weight.dtype, model.in_proj.weight.device
    gen = torch.Generator(device=dev).manual_seed(int(seed))
    z_video = z_video.to(dev, dtype)
    x = torch.randn(z_video.shape, generator=gen, dtype=dtype, device=dev)
    tokens, mask = (a.to(dev) for a in text_tensors(emb, dtype))
    with torch.no_grad():
        for k in range(schedule.T, 0, -1):
            t_model = torch.tensor([int(schedule.timesteps[k - 1])], device=dev)
            eps = model(z_video[None], x[None], t_model, tokens, mask)[0]
            x = reverse_step(x, k, eps, schedule, gen)
    return x


def sample_matte(
    video: np.ndarray,
    caption: str,
    model: LatentDenoiser,
    codec,
    schedule: NoiseSchedule,
    seed: int = 0,
    steps: int | None = 50,
    text_config: TextConfig | None = None,
) -> np.ndarray:
    """Generate the ``(T, H, W, 1)`` matte of the instance ``caption`` refers to.

    ``schedule`` is the training schedule; it is respaced to ``steps``
    entries unless ``steps`` is None.
    """
    emb = encode_text(caption, text_config or TextConfig(dim=model.cfg.text_dim, max_tokens=model.cfg.max_text))
    block = codec.encode(video)
    sched = respace(schedule, steps) if steps else schedule
    z = sample_latent(block.data, emb, model, sched, seed)
    rgb = codec.decode_tensor(z[None].to(codec.device, codec.dtype), block.n_frames)
    alpha = rgb.mean(dim=1, keepdim=True).clamp(0.0, 1.0)
    return alpha[0].permute(1, 2, 3, 0).cpu().numpy()
