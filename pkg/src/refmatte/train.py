"""Training controllers for the codec and diffusion stages."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .codec import Codec, train_codec
from .config import RunConfig
from .data import LoadedSample, codec_clips, load_split
from .diffusion import (
    DenoiserConfig,
    LatentDenoiser,
    NoiseSchedule,
    forward_sample,
    make_schedule,
    predict_x0,
    text_tensors,
)
from .errors import ConfigError, DivergenceError, IngestionError
from .io import append_jsonl
from .runtime import device
from .objectives import ContrastiveBatch, LossWeights, combined_loss, diffusion_loss, latent_infonce
from .text import TextConfig, encode_text

log = logging.getLogger(__name__)


def schedule_from_config(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.T_diff, s.kind, s.beta_min, s.beta_max)


def denoiser_config(cfg: RunConfig, codec: Codec) -> DenoiserConfig:
    return replace(
        cfg.denoiser,
        latent_channels=codec.cfg.latent_channels,
        text_dim=cfg.text.dim,
        max_text=cfg.text.max_tokens,
    )


def _train_samples(cfg: RunConfig) -> list[LoadedSample]:
    samples = load_split(cfg.data_path, "train")
    if not samples:
        raise IngestionError(f"no training samples under {cfg.data_path}; run synth first")
    return samples


def train_codec_stage(cfg: RunConfig) -> Path:
    samples = _train_samples(cfg)
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(cfg.run_dir) / "codec_log.jsonl"
    log_path.unlink(missing_ok=True)
    codec = train_codec(codec_clips(samples), cfg.codec, log_path=log_path, device=device())
    return ckpt.save_checkpoint(
        cfg.checkpoint_dir / "codec.pt", "codec", codec, cfg.codec.steps, cfg.to_dict()
    )


class LatentCache:
    """Frozen-codec latents and caption embeddings for every training item."""

    def __init__(self, samples: list[LoadedSample], codec: Codec, text_cfg: TextConfig):
        self.videos: list[torch.Tensor] = []
        self.mattes: list[dict[int, torch.Tensor]] = []
        self.text: list[dict[int, tuple[torch.Tensor, torch.Tensor]]] = []
        self.items: list[tuple[int, int]] = []
        for i, s in enumerate(samples):
            self.videos.append(codec.encode(s.composite).data)
            self.mattes.append({iid: codec.encode(m).data for iid, m in s.mattes.items()})
            self.text.append(
                {iid: text_tensors(encode_text(s.captions[iid], text_cfg)) for iid in s.mattes}
            )
            self.items.extend((i, iid) for iid in sorted(s.mattes))


def _rng_state(rng: np.random.Generator, gen: torch.Generator) -> dict:
    return {"numpy": json.dumps(rng.bit_generator.state), "torch": gen.get_state()}


def _restore_rng(state: dict, rng: np.random.Generator, gen: torch.Generator) -> None:
    rng.bit_generator.state = json.loads(state["numpy"])
    gen.set_state(state["torch"])


def cosine_lr(lr: float, final_ratio: float, step: int, steps: int) -> float:
    """Cosine decay from ``lr`` at step 0 to ``lr * final_ratio`` at ``steps``.

    A pure function of the step, so resumed runs need no scheduler state.
    """
    frac = min(step / max(steps, 1), 1.0)
    return lr * (final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def train_diffusion_stage(
    cfg: RunConfig,
    codec_path: str | Path | None = None,
    resume: str | Path | None = None,
) -> Path:
    """Train the denoiser against a frozen codec; returns the final checkpoint path.

    Per step and item: draw (t, eps), corrupt the matte latent, predict the
    noise, then form the contrastive anchor from the one-step x0 estimate
    with the other instances of the same video as negatives.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    codec_path = Path(codec_path or cfg.checkpoint_dir / "codec.pt")
    if not codec_path.is_file():
        raise ConfigError(f"no codec checkpoint at {codec_path}; train the codec stage first")
    dev = device()
    codec = ckpt.codec_from_blob(ckpt.load_checkpoint(codec_path))
    codec.model.to(dev)
    for p in codec.model.parameters():
        p.requires_grad_(False)

    schedule = schedule_from_config(cfg)
    weights = LossWeights(cfg.loss.lambda1)
    cache = LatentCache(_train_samples(cfg), codec, cfg.text)

    torch.manual_seed(cfg.seed)
    model = LatentDenoiser(denoiser_config(cfg, codec)).to(dev)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    gen = torch.Generator().manual_seed(cfg.seed)
    start = 0
    if resume is not None:
        blob = ckpt.load_checkpoint(resume)
        model.load_state_dict(ckpt.denoiser_from_blob(blob).state_dict())
        if blob.get("optimizer"):
            opt.load_state_dict(blob["optimizer"])
        if blob.get("rng"):
            _restore_rng(blob["rng"], rng, gen)
        start = blob["step"]

    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(cfg.run_dir) / "train_log.jsonl"
    if resume is None:
        log_path.unlink(missing_ok=True)

    def save(step: int, name: str) -> Path:
        return ckpt.save_checkpoint(
            cfg.checkpoint_dir / name, "diffusion", codec, step, cfg.to_dict(),
            denoiser=model, optimizer=opt, rng=_rng_state(rng, gen),
        )

    last = save(start, "diffusion_last.pt") if start == cfg.train.steps else None
    model.train()
    for step in range(start, cfg.train.steps):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(cfg.train.lr, cfg.train.lr_final_ratio, step, cfg.train.steps)
        picks = [cache.items[k] for k in rng.integers(0, len(cache.items), size=cfg.train.batch_size)]
        ts = rng.integers(1, schedule.T + 1, size=len(picks))
        z_video = torch.stack([cache.videos[i] for i, _ in picks])
        z0 = torch.stack([cache.mattes[i][iid] for i, iid in picks])
        tokens = torch.cat([cache.text[i][iid][0] for i, iid in picks]).to(dev)
        mask = torch.cat([cache.text[i][iid][1] for i, iid in picks]).to(dev)
        # Noise is drawn on the CPU so runs match across devices.
        eps = torch.randn(z0.shape, generator=gen).to(dev)
        x_t = torch.stack([forward_sample(z0[b], int(t), eps[b], schedule) for b, t in enumerate(ts)])

        eps_hat = model(z_video, x_t, torch.from_numpy(ts).to(dev), tokens, mask)
        l_diff = diffusion_loss(eps, eps_hat)

        skip = None
        if weights.lambda1 == 1.0:
            l_nce = torch.zeros(())
            skip = "zero_weight"
        else:
            terms = []
            for b, (i, iid) in enumerate(picks):
                batch = ContrastiveBatch(
                    anchor=predict_x0(x_t[b], int(ts[b]), eps_hat[b], schedule),
                    positive=z0[b],
                    negatives=[z for j, z in cache.mattes[i].items() if j != iid],
                    tau=cfg.loss.tau,
                )
                if not batch.skipped:
                    terms.append(latent_infonce(batch))
            if terms:
                l_nce = torch.stack(terms).mean()
            else:
                l_nce = torch.zeros(())
                skip = "no_negatives"
        loss = combined_loss(l_diff, l_nce, weights)
        if not torch.isfinite(loss):
            raise DivergenceError(step)

        opt.zero_grad()
        loss.backward()
        if cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
        opt.step()

        append_jsonl(
            log_path,
            {
                "step": step,
                "l_diff": l_diff.item(),
                "l_nce": l_nce.item(),
                "lambda1": weights.lambda1,
                "skip_flag": skip,
                "loss": loss.item(),
            },
        )
        if step % 100 == 0:
            log.info("step %d l_diff %.4f l_nce %.4f", step, l_diff.item(), l_nce.item())
        done = step + 1
        if done % cfg.train.checkpoint_every == 0 or done == cfg.train.steps:
            model.eval()
            last = save(done, "diffusion_last.pt")
            if done % cfg.train.checkpoint_every == 0:
                save(done, f"diffusion_{done:06d}.pt")
            model.train()
    model.eval()
    return last
