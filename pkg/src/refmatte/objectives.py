"""Training objectives and the KL-variance diagnostic.

Loss functions take torch tensors (numpy arrays are converted) and return
0-d tensors so they can be differentiated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, DegenerateInputError, ShapeError


def _t(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def diffusion_loss(eps, eps_hat) -> torch.Tensor:
    eps, eps_hat = _t(eps), _t(eps_hat)
    _same_shape(eps, eps_hat, "diffusion_loss")
    return torch.mean((eps - eps_hat) ** 2)


def pixel_l2(matte, matte_hat) -> torch.Tensor:
    """Pixel-space mean squared error between two mattes."""
    matte, matte_hat = _t(matte), _t(matte_hat)
    _same_shape(matte, matte_hat, "pixel_l2")
    return torch.mean((matte - matte_hat) ** 2)


def cosine_sim(a, b) -> torch.Tensor:
    a, b = _t(a).reshape(-1), _t(b).reshape(-1)
    _same_shape(a, b, "cosine_sim")
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return torch.dot(a, b) / (na * nb)


@dataclass
class ContrastiveBatch:
    anchor: torch.Tensor
    positive: torch.Tensor
    negatives: Sequence[torch.Tensor] = field(default_factory=list)
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        for n in [self.positive, *self.negatives]:
            _same_shape(self.anchor, n, "ContrastiveBatch")

    @property
    def skipped(self) -> bool:
        """True when there are no negatives and the contrastive term is 0."""
        return len(self.negatives) == 0


def infonce_from_similarities(s_pos, s_neg, tau: float) -> torch.Tensor:
    """-log softmax of the positive logit, positive included in the denominator.

    Evaluated as ``log(1 + sum(exp((s_neg - s_pos) / tau)))`` with the
    largest term factored out, which keeps full relative precision when the
    loss is close to zero.
    """
    rel = (_t(s_neg).reshape(-1) - _t(s_pos).reshape(())) / tau
    x = torch.logsumexp(rel, dim=0)
    return torch.clamp(x, min=0.0) + torch.log1p(torch.exp(-torch.abs(x)))


def latent_infonce(batch: ContrastiveBatch) -> torch.Tensor:
    if batch.skipped:
        return batch.anchor.sum() * 0.0
    s_pos = cosine_sim(batch.anchor, batch.positive)
    s_neg = torch.stack([cosine_sim(batch.anchor, n) for n in batch.negatives])
    return infonce_from_similarities(s_pos, s_neg, batch.tau)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ConfigError(f"lambda1 must be in [0, 1], got {self.lambda1}")


def combined_loss(l_diff, l_nce, w: LossWeights):
    return w.lambda1 * l_diff + (1.0 - w.lambda1) * l_nce


# ---------------------------------------------------------------------------
# KL-variance probe


def gaussian_kl(q: np.ndarray, p: np.ndarray, var_floor: float = 1e-4) -> float:
    """Summed per-dimension KL(N_q || N_p) between diagonal Gaussian fits.

    ``q`` and ``p`` are ``(n, d)`` sample matrices.  Variances are floored at
    ``var_floor`` so constant dimensions stay finite.
    """
    mq, mp = q.mean(axis=0), p.mean(axis=0)
    vq = np.maximum(q.var(axis=0), var_floor)
    vp = np.maximum(p.var(axis=0), var_floor)
    return float(0.5 * np.sum(np.log(vp / vq) + (vq + (mq - mp) ** 2) / vp - 1.0))


def bootstrap_kl_variance(
    q: np.ndarray,
    p: np.ndarray,
    n_boot: int = 200,
    seed: int = 0,
    var_floor: float = 1e-4,
) -> tuple[float, float]:
    """(KL estimate, bootstrap variance), resampling matched rows jointly."""
    q = np.asarray(q, dtype=np.float64).reshape(len(q), -1)
    p = np.asarray(p, dtype=np.float64).reshape(len(p), -1)
    if q.shape != p.shape:
        raise ShapeError(f"sample matrices differ: {q.shape} vs {p.shape}")
    rng = np.random.default_rng(seed)
    n = q.shape[0]
    est = gaussian_kl(q, p, var_floor)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        boots[b] = gaussian_kl(q[idx], p[idx], var_floor)
    return est, float(boots.var(ddof=1))


@dataclass
class KLProbeResult:
    kl_pixel: float
    kl_latent: float
    var_pixel: float
    var_latent: float


def kl_variance_probe(
    pixel_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    latent_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    n_boot: int = 200,
    seed: int = 0,
    var_floor: float = 1e-4,
    min_samples: int = 30,
) -> KLProbeResult:
    """Bootstrap variance of the KL estimate in pixel and latent space.

    Each pair is ``(ground_truth, prediction)`` flattened; predictions form
    q and ground truths form p.  Both spaces use the same estimator,
    resampling scheme and seed.
    """
    if len(pixel_pairs) < min_samples or len(latent_pairs) < min_samples:
        raise ConfigError(f"kl_variance_probe needs at least {min_samples} pairs per space")

    def stack(pairs):
        gt = np.stack([np.asarray(g, dtype=np.float64).ravel() for g, _ in pairs])
        pred = np.stack([np.asarray(q, dtype=np.float64).ravel() for _, q in pairs])
        return pred, gt

    kl_px, var_px = bootstrap_kl_variance(*stack(pixel_pairs), n_boot, seed, var_floor)
    kl_lt, var_lt = bootstrap_kl_variance(*stack(latent_pairs), n_boot, seed, var_floor)
    return KLProbeResult(kl_px, kl_lt, var_px, var_lt)


def uniform_infonce(k: int) -> float:
    """Closed form of the loss when every similarity is equal."""
    return math.log(k + 1)
