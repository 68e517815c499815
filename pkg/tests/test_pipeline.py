"""End-to-end CLI runs on a tiny configuration."""
import json

import numpy as np
import pytest
import torch
import yaml

from refmatte import checkpoint as ckpt
from refmatte.cli import build_parser, evaluate_roots, main
from refmatte.config import PRESETS, RunConfig, load_config, save_config
from refmatte.data import load_manifest, load_split, read_mattes
from refmatte.errors import ConfigError, IngestionError
from refmatte.io import read_frames, read_jsonl, write_frames
from refmatte.runtime import device
from refmatte.train import cosine_lr

TINY_RUN = {
    "seed": 3,
    "run_dir": "run",
    "sources": {"toy_backgrounds": 3},
    "synth": {"n_train": 3, "n_val": 1, "n_frames": 4, "height": 16, "width": 16},
    "codec": {"latent_channels": 4, "width": 4, "temporal_factor": 2,
              "spatial_factor": 2, "steps": 4},
    "denoiser": {"d_model": 16, "depth": 1, "heads": 2},
    "text": {"max_tokens": 4, "dim": 8},
    "schedule": {"T_diff": 40, "sample_steps": 4},
    "train": {"lr": 1e-3, "steps": 6, "checkpoint_every": 3, "lr_final_ratio": 0.2},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Synthesize, then train both stages with the tiny config."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = root / "run.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY_RUN))
    assert main(["synth", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path), "--stage", "codec"]) == 0
    assert main(["train", "--config", str(cfg_path), "--stage", "diffusion"]) == 0
    return root, cfg_path, root / "run"


def test_synth_layout(run):
    _, _, rd = run
    recs = load_manifest(rd / "data")
    assert [r["split"] for r in recs].count("train") == 3
    assert [r["split"] for r in recs].count("val") == 1
    assert (rd / "config.yaml").is_file()
    snap = yaml.safe_load((rd / "config.yaml").read_text())
    assert snap["seed"] == 3 and snap["codec"]["seed"] == 3


def test_codec_checkpoint(run):
    _, _, rd = run
    blob = ckpt.load_checkpoint(rd / "checkpoints" / "codec.pt")
    assert blob["kind"] == "codec" and blob["step"] == 4
    assert blob["config_digest"] == ckpt.config_digest(blob["config"])
    codec = ckpt.codec_from_blob(blob)
    assert codec.trained and codec.cfg.width == 4
    assert len(list(read_jsonl(rd / "codec_log.jsonl"))) == 4


def test_diffusion_checkpoints_and_log(run):
    _, _, rd = run
    names = sorted(p.name for p in (rd / "checkpoints").glob("diffusion_*.pt"))
    assert names == ["diffusion_000003.pt", "diffusion_000006.pt", "diffusion_last.pt"]
    rows = list(read_jsonl(rd / "train_log.jsonl"))
    assert [r["step"] for r in rows] == list(range(6))
    for r in rows:
        assert set(r) == {"step", "l_diff", "l_nce", "lambda1", "skip_flag", "loss"}
        assert r["lambda1"] == 0.9
        assert np.isclose(r["loss"], 0.9 * r["l_diff"] + 0.1 * r["l_nce"], rtol=1e-5, atol=1e-7)
        assert r["skip_flag"] in (None, "no_negatives")
        if r["skip_flag"] == "no_negatives":
            assert r["l_nce"] == 0.0


def test_zero_contrastive_weight_is_flagged(run, tmp_path):
    root, cfg_path, rd = run
    cfg = load_config(cfg_path, loss={"lambda1": 1.0}, run_dir=str(tmp_path / "r"),
                      data_root=str(rd / "data"), train={"steps": 2})
    from refmatte.train import train_diffusion_stage
    train_diffusion_stage(cfg, codec_path=rd / "checkpoints" / "codec.pt")
    rows = list(read_jsonl(tmp_path / "r" / "train_log.jsonl"))
    assert [r["skip_flag"] for r in rows] == ["zero_weight"] * 2
    assert all(r["l_nce"] == 0.0 and r["loss"] == pytest.approx(r["l_diff"]) for r in rows)


def test_resume_matches_uninterrupted(run, tmp_path):
    root, cfg_path, rd = run
    full = torch.load(rd / "checkpoints" / "diffusion_last.pt", weights_only=True)
    other = load_config(cfg_path, run_dir=str(tmp_path / "r"), data_root=str(rd / "data"))
    (tmp_path / "r" / "checkpoints").mkdir(parents=True)
    (tmp_path / "r" / "checkpoints" / "codec.pt").write_bytes((rd / "checkpoints" / "codec.pt").read_bytes())
    save_config(other, tmp_path / "r.yaml")
    mid = rd / "checkpoints" / "diffusion_000003.pt"
    assert main(["train", "--config", str(tmp_path / "r.yaml"), "--stage", "diffusion",
                 "--resume", str(mid)]) == 0
    resumed = torch.load(tmp_path / "r" / "checkpoints" / "diffusion_last.pt", weights_only=True)
    assert resumed["step"] == 6
    for k, v in full["denoiser"]["state"].items():
        torch.testing.assert_close(resumed["denoiser"]["state"][k], v, rtol=0, atol=0)
    steps = [r["step"] for r in read_jsonl(tmp_path / "r" / "train_log.jsonl")]
    assert steps == [3, 4, 5]


def test_cosine_lr_endpoints():
    assert cosine_lr(1e-3, 0.05, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 0.05, 50, 100) == pytest.approx(0.525e-3)
    assert cosine_lr(1e-3, 0.05, 100, 100) == pytest.approx(0.05e-3)
    assert cosine_lr(1e-3, 1.0, 37, 100) == 1e-3
    lrs = [cosine_lr(1.0, 0.1, k, 20) for k in range(21)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_sample_writes_matte_and_extraction(run, tmp_path):
    _, _, rd = run
    sid = load_manifest(rd / "data", "train")[0]["sample_id"]
    video = rd / "data" / sid / "composite"
    cap = (rd / "data" / sid / "captions.txt").read_text().splitlines()[0].split("\t")[1]
    ck = rd / "checkpoints" / "diffusion_last.pt"
    args = ["sample", "--ckpt", str(ck), "--video", str(video), "--caption", cap, "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = read_frames(tmp_path / "a" / "matte", gray=True)
    assert a.shape == (4, 16, 16, 1)
    np.testing.assert_array_equal(a, read_frames(tmp_path / "b" / "matte", gray=True))
    ext = read_frames(tmp_path / "a" / "extracted")
    assert ext.shape == (4, 16, 16, 3)
    assert np.all(ext <= read_frames(video) + 1.0 / 255)


def test_predict_then_eval(run, tmp_path, capsys):
    _, _, rd = run
    ck = rd / "checkpoints" / "diffusion_last.pt"
    pred = tmp_path / "pred"
    assert main(["predict", "--ckpt", str(ck), "--data", str(rd / "data"), "--split", "val",
                 "--out", str(pred)]) == 0
    assert main(["eval", "--pred", str(pred), "--gt", str(rd / "data"), "--split", "val",
                 "--iou", "0.3"]) == 0
    report = json.loads((pred / "report.json").read_text())
    assert report["flags"] == {"iou": 0.3, "sigma": 1.4, "step": 0.1}
    assert list(report["aggregate"]) == ["val"]
    agg = report["aggregate"]["val"]
    assert agg["n_samples"] == 1
    for k in ("mad", "mse", "grad", "conn", "rq", "tq", "mq", "vimq"):
        assert np.isfinite(agg[k])
    assert "[val] n=1" in capsys.readouterr().out


def test_eval_of_ground_truth_is_perfect(run, tmp_path):
    _, _, rd = run
    report = evaluate_roots(rd / "data", rd / "data")
    for agg in report["aggregate"].values():
        assert agg["mad"] == 0 and agg["mse"] == 0 and agg["grad"] == 0 and agg["conn"] == 1
        assert agg["rq"] == agg["tq"] == agg["mq"] == 100.0
    assert sorted(report["aggregate"]) == ["train", "val"]
    assert len(report["samples"]) == 4


def test_eval_reports_missing_predictions(run, tmp_path, capsys):
    _, _, rd = run
    (tmp_path / "pred").mkdir()
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(rd / "data")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "predictions missing" in err
    sid = load_manifest(rd / "data")[0]["sample_id"]
    assert sid in err


def test_eval_rejects_unknown_instance(run, tmp_path):
    _, _, rd = run
    for rec in load_manifest(rd / "data", "val"):
        gts = read_mattes(rd / "data" / rec["sample_id"])
        write_frames(tmp_path / rec["sample_id"] / "matte_99", next(iter(gts.values())))
    with pytest.raises(IngestionError, match="ground truth"):
        evaluate_roots(tmp_path, rd / "data", split="val")


@pytest.mark.parametrize("argv", [
    ["sample", "--ckpt", "nope.pt", "--video", "v", "--caption", "a man", "--out", "o"],
    ["train", "--config", "missing.yaml", "--stage", "codec"],
    ["synth", "--preset", "bogus"],
])
def test_errors_exit_nonzero(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_empty_caption_exits_nonzero(run, tmp_path, capsys):
    _, _, rd = run
    sid = load_manifest(rd / "data")[0]["sample_id"]
    assert main(["sample", "--ckpt", str(rd / "checkpoints" / "diffusion_last.pt"),
                 "--video", str(rd / "data" / sid / "composite"), "--caption", "  ",
                 "--out", str(tmp_path)]) == 1
    assert "caption" in capsys.readouterr().err


def test_diffusion_needs_codec(tmp_path):
    cfg = load_config(None, run_dir=str(tmp_path))
    from refmatte.train import train_diffusion_stage
    with pytest.raises(ConfigError, match="codec"):
        train_diffusion_stage(cfg)


def test_codec_stage_needs_data(tmp_path):
    from refmatte.train import train_codec_stage
    with pytest.raises(IngestionError):
        train_codec_stage(load_config(None, run_dir=str(tmp_path)))


def test_parser_requires_stage_choice():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--stage", "decoder"])


def test_config_round_trip(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = load_config(None, preset="toy", seed=7)
    save_config(cfg, tmp_path / "snap" / "c.yaml")
    again = load_config(tmp_path / "snap" / "c.yaml")
    assert again.run_dir == str(tmp_path / "runs" / "default")
    again.run_dir = cfg.run_dir
    assert again.to_dict() == cfg.to_dict()
    assert again.codec.seed == 7 and again.synth.seed == 7


def test_config_resolves_relative_paths(tmp_path):
    (tmp_path / "c.yaml").write_text("run_dir: out\nsources: {background_dir: bg, foreground_dir: fg}\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.run_dir == str(tmp_path / "out")
    assert cfg.sources.background_dir == str(tmp_path / "bg")
    assert cfg.data_path == tmp_path / "out" / "data"


@pytest.mark.parametrize("data, match", [
    ({"bogus": 1}, "unknown config key"),
    ({"codec": {"depth": 3}}, "unknown keys"),
    ({"codec": 5}, "mapping"),
    ({"synth": {"max_instances": 0}}, "max_instances"),
    ({"train": {"lr_final_ratio": 0}}, "lr_final_ratio"),
])
def test_config_rejects_bad_input(tmp_path, data, match):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(data))
    with pytest.raises(ConfigError, match=match):
        load_config(tmp_path / "c.yaml")


def test_presets_build():
    for name in PRESETS:
        assert isinstance(load_config(None, preset=name), RunConfig)


def test_overfit_preset_shape():
    cfg = load_config(None, preset="overfit")
    assert (cfg.synth.n_train, cfg.synth.n_frames, cfg.synth.height, cfg.synth.width) == (4, 16, 64, 64)
    assert cfg.train.steps == 2000


def test_device_env(monkeypatch):
    monkeypatch.setenv("REFMATTE_DEVICE", "cpu")
    assert device() == torch.device("cpu")
    monkeypatch.setenv("REFMATTE_DEVICE", "warp-drive")
    with pytest.raises(ConfigError):
        device()
    if not torch.cuda.is_available():
        monkeypatch.setenv("REFMATTE_DEVICE", "cuda")
        with pytest.raises(ConfigError):
            device()


def test_checkpoint_rejects_foreign_files(tmp_path):
    torch.save({"hello": 1}, tmp_path / "x.pt")
    with pytest.raises(IngestionError):
        ckpt.load_checkpoint(tmp_path / "x.pt")
    with pytest.raises(IngestionError):
        ckpt.load_checkpoint(tmp_path / "missing.pt")


def test_codec_checkpoint_has_no_denoiser(run):
    _, _, rd = run
    with pytest.raises(IngestionError, match="no denoiser"):
        ckpt.denoiser_from_blob(ckpt.load_checkpoint(rd / "checkpoints" / "codec.pt"))


def test_loaded_split_matches_manifest(run):
    _, _, rd = run
    samples = load_split(rd / "data", "train")
    recs = load_manifest(rd / "data", "train")
    assert [s.sample_id for s in samples] == [r["sample_id"] for r in recs]
    for s, r in zip(samples, recs):
        assert sorted(s.mattes) == sorted(r["instance_ids"])
        assert set(s.captions) == set(s.mattes)
