"""Caption embeddings behind a pluggable encoder registry.

The default ``"hash"`` encoder is lexical: captions are lowercased and split
into word tokens, each token is hashed with xxh64 (seed fixed below), and the
low 32 bits of the hash select a row of a virtual ``2**32 x D`` Gaussian table.
Rows are generated on demand from a Philox stream keyed by (table seed, row),
so the table never has to be materialized and two distinct tokens share a row
with probability 2**-32.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import xxhash

from .errors import ConfigError, RegistrationError

HASH_SEED = 0x5EED
TABLE_ROWS = 2**32
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass
class TextEmbedding:
    tokens: np.ndarray  # (L, D) float32
    mask: np.ndarray  # (L,) bool

    def __post_init__(self):
        if self.tokens.shape[0] != self.mask.shape[0]:
            raise ConfigError("tokens and mask disagree on L")


@dataclass(frozen=True)
class TextConfig:
    encoder: str = "hash"
    max_tokens: int = 32
    dim: int = 64
    table_seed: int = 0


def tokenize(caption: str) -> list[str]:
    return _TOKEN_RE.findall(caption.lower())


def token_hash(token: str) -> int:
    return xxhash.xxh64_intdigest(token.encode("utf-8"), seed=HASH_SEED)


@lru_cache(maxsize=65536)
def _table_row(row: int, dim: int, table_seed: int) -> np.ndarray:
    bitgen = np.random.Philox(key=(table_seed << 32) | row)
    v = np.random.Generator(bitgen).standard_normal(dim) / np.sqrt(dim)
    v = v.astype(np.float32)
    v.flags.writeable = False
    return v


def hash_encoder(caption: str, config: TextConfig) -> TextEmbedding:
    toks = tokenize(caption)
    if not toks:
        raise ConfigError("caption is empty after normalization")
    L, D = config.max_tokens, config.dim
    out = np.zeros((L, D), dtype=np.float32)
    mask = np.zeros(L, dtype=bool)
    for i, tok in enumerate(toks[:L]):
        out[i] = _table_row(token_hash(tok) % TABLE_ROWS, D, config.table_seed)
        mask[i] = True
    return TextEmbedding(out, mask)


Encoder = Callable[[str, TextConfig], TextEmbedding]

_REGISTRY: dict[str, Encoder] = {"hash": hash_encoder}


def register_encoder(name: str, encoder: Encoder) -> None:
    if name in _REGISTRY:
        raise RegistrationError(f"text encoder {name!r} is already registered")
    _REGISTRY[name] = encoder


def available_encoders() -> list[str]:
    return sorted(_REGISTRY)


def get_encoder(name: str) -> Encoder:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"unknown text encoder {name!r}; available: {available_encoders()}"
        ) from None


def encode_text(caption: str, config: TextConfig | None = None) -> TextEmbedding:
    config = config or TextConfig()
    if not caption or not caption.strip():
        raise ConfigError("caption is empty")
    emb = get_encoder(config.encoder)(caption, config)
    if emb.tokens.shape != (config.max_tokens, config.dim):
        raise ConfigError(
            f"encoder {config.encoder!r} returned {emb.tokens.shape}, "
            f"expected {(config.max_tokens, config.dim)}"
        )
    emb.tokens[~emb.mask] = 0.0
    return emb
