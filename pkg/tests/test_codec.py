import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradcheck import relative_errors
from refmatte.codec import (
    Codec,
    CodecConfig,
    IdentityCodec,
    LatentBlock,
    VideoVAE,
    latent_shape,
    noise_attenuation_probe,
    pad_time,
    reconstruction_loss,
    roundtrip_alpha,
    train_codec,
    weights_digest,
)
from refmatte.errors import ConfigError, DivergenceError, ShapeError, StateError

TINY = CodecConfig(latent_channels=2, width=4, temporal_factor=2, spatial_factor=2)


def untrained(cfg=CodecConfig(), seed=0):
    torch.manual_seed(seed)
    return Codec(VideoVAE(cfg))


def blob_mattes(n, t=4, size=16, seed=0):
    """Soft-edged discs moving a pixel per frame."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    out = []
    for _ in range(n):
        cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
        r = rng.uniform(size * 0.15, size * 0.3)
        frames = [np.clip(r - np.hypot(yy - cy, xx - cx - k), 0, 1) for k in range(t)]
        out.append(np.stack(frames)[..., None].astype(np.float32))
    return out


@pytest.fixture(scope="module")
def small_trained():
    cfg = CodecConfig(latent_channels=4, width=8, temporal_factor=2, spatial_factor=2,
                      steps=150, batch_size=4, lr=5e-3)
    return train_codec(blob_mattes(8), cfg), cfg


def test_default_latent_shape():
    codec = untrained()
    z = codec.encode(np.zeros((16, 64, 64, 3), np.float32))
    assert z.shape == (4, 8, 8, 16)
    assert z.numpy().shape == (4, 8, 8, 16)
    assert latent_shape((16, 64, 64), CodecConfig()) == (4, 8, 8, 16)


def test_minimal_clip_gives_single_latent_cell():
    z = untrained().encode(np.zeros((4, 8, 8, 3), np.float32))
    assert z.shape == (1, 1, 1, 16)


def test_latent_compactness():
    x = np.random.default_rng(0).random((16, 64, 64, 3)).astype(np.float32)
    z = untrained().encode(x)
    assert z.numpy().size == x.size / (8 * 8 * 4) * (16 / 3)


@settings(max_examples=15, deadline=None)
@given(t=st.integers(1, 9), h=st.integers(1, 3), w=st.integers(1, 3), c=st.sampled_from([1, 3]))
def test_shape_contract(t, h, w, c):
    codec = untrained(TINY)
    x = np.random.default_rng(t).random((t, 2 * h, 2 * w, c)).astype(np.float32)
    z = codec.encode(x)
    assert z.shape == latent_shape(x.shape, TINY) == (-(-t // 2), h, w, 2)
    y = codec.decode(z)
    assert y.shape == (t, 2 * h, 2 * w, 3)
    assert y.min() >= 0.0 and y.max() <= 1.0


def test_non_divisible_spatial_rejected():
    codec = untrained()
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((4, 60, 64, 3), np.float32))
    with pytest.raises(ShapeError):
        latent_shape((4, 64, 12), CodecConfig())


def test_bad_channel_counts_rejected():
    codec = untrained()
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((4, 8, 8, 2), np.float32))
    bad = LatentBlock(torch.zeros(8, 1, 1, 1), n_frames=4)
    with pytest.raises(ShapeError):
        codec.decode(bad)


def test_encode_is_deterministic():
    codec = untrained()
    x = np.random.default_rng(1).random((8, 16, 16, 3)).astype(np.float32)
    np.testing.assert_array_equal(codec.encode(x).numpy(), codec.encode(x).numpy())


def test_zero_latent_decodes_into_unit_range():
    out = untrained().decode(LatentBlock(torch.zeros(16, 2, 3, 3), n_frames=8))
    assert out.shape == (8, 24, 24, 3)
    assert np.isfinite(out).all() and out.min() >= 0.0 and out.max() <= 1.0


def test_pad_time_replicates_last_frame():
    x = torch.arange(5.0).view(1, 1, 5, 1, 1)
    y = pad_time(x, 4)
    np.testing.assert_array_equal(y.flatten().numpy(), [0, 1, 2, 3, 4, 4, 4, 4])
    assert pad_time(x[:, :, :4], 4).shape[2] == 4


def test_odd_length_decodes_to_original_length():
    codec = untrained()
    z = codec.encode(np.zeros((5, 16, 16, 1), np.float32))
    assert z.n_frames == 5 and z.shape[0] == 2
    assert codec.decode(z).shape == (5, 16, 16, 3)


@pytest.mark.parametrize("kw", [dict(temporal_factor=3), dict(spatial_factor=0),
                                dict(width=0), dict(matte_fraction=1.5)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        CodecConfig(**kw)


def test_identity_compression_needs_identity_codec():
    with pytest.raises(ConfigError):
        VideoVAE(CodecConfig(temporal_factor=1, spatial_factor=1))


def test_reconstruction_gradcheck():
    torch.manual_seed(0)
    model = VideoVAE(TINY).double()
    assert sum(p.numel() for p in model.parameters()) <= 5000
    x = torch.rand(2, 3, 4, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    errs = relative_errors(lambda: reconstruction_loss(model, x), model.parameters())
    assert errs.max() < 1e-4, errs


def test_training_reduces_held_out_loss(small_trained):
    codec, cfg = small_trained
    held = blob_mattes(4, seed=99)
    init = untrained(cfg, seed=cfg.seed)
    err = lambda c: np.mean([np.mean((roundtrip_alpha(c, m) - m) ** 2) for m in held])
    assert err(codec) < 0.5 * err(init)


def test_training_is_reproducible(tmp_path):
    cfg = CodecConfig(latent_channels=2, width=4, temporal_factor=2, spatial_factor=2,
                      steps=10)
    a = train_codec(blob_mattes(3), cfg, log_path=tmp_path / "a.jsonl")
    b = train_codec(blob_mattes(3), cfg, log_path=tmp_path / "b.jsonl")
    assert weights_digest(a.model) == weights_digest(b.model)
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 10
    c = train_codec(blob_mattes(3), CodecConfig(**{**cfg.__dict__, "seed": 1}))
    assert weights_digest(a.model) != weights_digest(c.model)


def test_training_needs_data():
    with pytest.raises(ConfigError):
        train_codec([], TINY)


def test_divergence_reports_step():
    cfg = CodecConfig(latent_channels=2, width=4, temporal_factor=2, spatial_factor=2, steps=5)
    clips = [np.full((2, 4, 4, 1), np.nan, np.float32)]
    with pytest.raises(DivergenceError) as info:
        train_codec(clips, cfg)
    assert info.value.step == 0


def test_identity_probe_is_one():
    m = blob_mattes(1, t=4, size=16)[0]
    for scale in (0.05, 0.1, 0.2):
        lam = noise_attenuation_probe(m, scale, IdentityCodec(), trials=8)
        assert abs(lam - 1.0) < 1e-6


def test_probe_needs_trained_codec():
    m = blob_mattes(1)[0]
    with pytest.raises(StateError):
        noise_attenuation_probe(m, 0.1, untrained(TINY))


def test_probe_rejects_bad_scale():
    with pytest.raises(ConfigError):
        noise_attenuation_probe(blob_mattes(1)[0], 0.0, IdentityCodec())


def test_probe_is_deterministic_and_seeded(small_trained):
    codec, _ = small_trained
    m = blob_mattes(1, seed=5)[0]
    a = noise_attenuation_probe(m, 0.1, codec, trials=3, seed=0)
    assert a == noise_attenuation_probe(m, 0.1, codec, trials=3, seed=0)
    assert a != noise_attenuation_probe(m, 0.1, codec, trials=3, seed=1)


def test_probe_matches_direct_ratio(small_trained):
    codec, _ = small_trained
    m = blob_mattes(1, seed=5)[0].astype(np.float64)
    rng = np.random.default_rng(0)
    noisy = np.clip(m + rng.normal(0.0, 0.2, m.shape), 0, 1)
    rec = codec.decode(codec.encode(noisy)).mean(axis=-1, keepdims=True)
    direct = np.sum((rec - m) ** 2) / np.sum((noisy - m) ** 2)
    assert noise_attenuation_probe(m, 0.2, codec, trials=1) == pytest.approx(direct, rel=1e-12)


def test_full_matte_fraction_draws_only_mattes():
    # Any draw of the NaN video would diverge; with fraction 1 none happens.
    cfg = CodecConfig(latent_channels=2, width=4, temporal_factor=2, spatial_factor=2,
                      steps=20, matte_fraction=1.0)
    clips = [np.full((2, 4, 4, 3), np.nan, np.float32)] + blob_mattes(2, t=2, size=4)
    train_codec(clips, cfg)
    with pytest.raises(DivergenceError):
        train_codec(clips, CodecConfig(**{**cfg.__dict__, "matte_fraction": 0.0}))
