"""Command-line entry point: ``refmatte {synth,train,sample,predict,eval}``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, load_config, save_config
from .data import load_manifest, read_captions, read_mattes
from .diffusion import make_schedule, sample_matte
from .errors import ConfigError, IngestionError, RefMatteError
from .io import read_frames, write_frames
from .runtime import device
from .metrics import evaluate_matte, vim_scores
from .synth import build_dataset
from .toy_sources import make_toy_sources

log = logging.getLogger("refmatte")


def _snapshot(cfg: RunConfig) -> None:
    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run / "config.yaml")


def cmd_synth(cfg: RunConfig) -> Path:
    _snapshot(cfg)
    src = cfg.sources
    if src.background_dir and src.foreground_dir:
        bg, fg = Path(src.background_dir), Path(src.foreground_dir)
    elif src.toy:
        bg, fg = make_toy_sources(
            Path(cfg.run_dir) / "sources",
            n_backgrounds=src.toy_backgrounds,
            n_frames=cfg.synth.n_frames,
            bg_size=(cfg.synth.height, cfg.synth.width),
            seed=src.toy_seed,
        )
    else:
        raise ConfigError("sources.background_dir and sources.foreground_dir are required")
    manifest = build_dataset(cfg.synth, bg, fg, src.caption_dir, cfg.data_path)
    records = list(load_manifest(cfg.data_path))
    n_train = sum(r["split"] == "train" for r in records)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()[:16]
    print(f"wrote {len(records)} samples ({n_train} train / {len(records) - n_train} val) "
          f"to {cfg.data_path}; manifest sha256 {digest}")
    return manifest


def cmd_train(cfg: RunConfig, stage: str, resume: str | None = None) -> Path:
    from .train import train_codec_stage, train_diffusion_stage

    _snapshot(cfg)
    if stage == "codec":
        path = train_codec_stage(cfg)
    elif stage == "diffusion":
        path = train_diffusion_stage(cfg, resume=resume)
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    print(f"checkpoint: {path}")
    return path


def _load_model(ckpt_path):
    blob = ckpt.load_checkpoint(ckpt_path)
    dev = device()
    codec = ckpt.codec_from_blob(blob)
    codec.model.to(dev)
    model = ckpt.denoiser_from_blob(blob).to(dev)
    cfg = RunConfig.from_dict(blob["config"])
    s = cfg.schedule
    return codec, model, make_schedule(s.T_diff, s.kind, s.beta_min, s.beta_max), cfg


def cmd_sample(ckpt_path, video_dir, caption: str, out_dir, seed: int = 0, steps: int | None = None) -> Path:
    if not caption or not caption.strip():
        raise ConfigError("caption is empty")
    codec, model, schedule, cfg = _load_model(ckpt_path)
    video = read_frames(video_dir)
    alpha = sample_matte(
        video, caption, model, codec, schedule, seed=seed,
        steps=steps or cfg.schedule.sample_steps, text_config=cfg.text,
    )
    out = Path(out_dir)
    write_frames(out / "matte", alpha)
    write_frames(out / "extracted", video * alpha)
    print(f"wrote {alpha.shape[0]} matte frames to {out / 'matte'}")
    return out / "matte"


def cmd_predict(ckpt_path, data_root, out_root, split: str | None = "train", seed: int = 0,
                steps: int | None = None) -> Path:
    """Sample one matte per caption for every sample of a split."""
    codec, model, schedule, cfg = _load_model(ckpt_path)
    out_root = Path(out_root)
    for rec in load_manifest(data_root, split):
        sd = Path(data_root) / rec["sample_id"]
        video = read_frames(sd / "composite")
        captions = read_captions(sd / "captions.txt")
        for iid, caption in captions.items():
            alpha = sample_matte(
                video, caption, model, codec, schedule, seed=seed,
                steps=steps or cfg.schedule.sample_steps, text_config=cfg.text,
            )
            write_frames(out_root / rec["sample_id"] / f"matte_{iid}", alpha)
        shutil.copy(sd / "captions.txt", out_root / rec["sample_id"] / "captions.txt")
    return out_root


def evaluate_roots(pred_root, gt_root, iou: float = 0.5, sigma: float = 1.4, step: float = 0.1,
                   split: str | None = None) -> dict:
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    records = load_manifest(gt_root, split)
    missing = [r["sample_id"] for r in records if not (pred_root / r["sample_id"]).is_dir()]
    if missing:
        raise IngestionError(f"predictions missing for sample ids: {', '.join(missing)}")
    rows = []
    for rec in records:
        sid = rec["sample_id"]
        gts = read_mattes(gt_root / sid)
        captions = read_captions(gt_root / sid / "captions.txt")
        preds = read_mattes(pred_root / sid)
        unknown = sorted(set(preds) - set(gts))
        if unknown or not preds:
            raise IngestionError(f"{sid}: predicted instance ids {sorted(preds)} vs ground truth {sorted(gts)}")
        per_inst = {}
        for iid, p in preds.items():
            r = evaluate_matte(p, gts[iid], sigma, step)
            per_inst[iid] = {"mad": r.mad, "mse": r.mse, "grad": r.grad, "conn": r.conn}
        vim = vim_scores(
            [(captions.get(iid, str(iid)), preds[iid]) for iid in sorted(preds)],
            [(iid, gts[iid]) for iid in sorted(gts)],
            iou,
        )
        row = {"sample_id": sid, "split": rec["split"]}
        for k in ("mad", "mse", "grad", "conn"):
            row[k] = float(np.mean([v[k] for v in per_inst.values()]))
        row.update(rq=vim.rq, tq=vim.tq, mq=vim.mq, vimq=vim.vimq)
        row["instances"] = {str(k): v for k, v in per_inst.items()}
        rows.append(row)
    keys = ("mad", "mse", "grad", "conn", "rq", "tq", "mq", "vimq")
    aggregate = {}
    for sp in sorted({r["split"] for r in rows}):
        sel = [r for r in rows if r["split"] == sp]
        aggregate[sp] = {k: float(np.mean([r[k] for r in sel])) for k in keys}
        aggregate[sp]["n_samples"] = len(sel)
    return {"flags": {"iou": iou, "sigma": sigma, "step": step}, "aggregate": aggregate, "samples": rows}


def cmd_eval(pred_root, gt_root, out=None, iou: float = 0.5, sigma: float = 1.4, step: float = 0.1,
             split: str | None = None) -> Path:
    report = evaluate_roots(pred_root, gt_root, iou, sigma, step, split)
    out = Path(out) if out else Path(pred_root) / "report.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    for sp, agg in report["aggregate"].items():
        vals = " ".join(f"{k.upper()}={agg[k]:.4f}" for k in ("mad", "mse", "grad", "conn", "rq", "tq", "mq", "vimq"))
        print(f"[{sp}] n={agg['n_samples']} {vals}")
    print(f"report: {out}")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="refmatte", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--preset", help="toy, overfit or full")

    p = sub.add_parser("synth", help="synthesize the captioned matting dataset")
    add_config(p)

    p = sub.add_parser("train", help="train the codec or the diffusion model")
    add_config(p)
    p.add_argument("--stage", choices=("codec", "diffusion"), required=True)
    p.add_argument("--resume", help="diffusion checkpoint to resume from")

    p = sub.add_parser("sample", help="generate a matte for one video and caption")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True, help="directory of RGB frame PNGs")
    p.add_argument("--caption", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None, help="sampling steps (default from config)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="sample every caption of a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score predicted mattes against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=1.4)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--split", default=None)
    p.add_argument("--out", default=None, help="report path (default <pred>/report.json)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(load_config(args.config, args.preset))
        elif args.command == "train":
            cmd_train(load_config(args.config, args.preset), args.stage, args.resume)
        elif args.command == "sample":
            cmd_sample(args.ckpt, args.video, args.caption, args.out, args.seed, args.steps)
        elif args.command == "predict":
            cmd_predict(args.ckpt, args.data, args.out, args.split, args.seed, args.steps)
        elif args.command == "eval":
            cmd_eval(args.pred, args.gt, args.out, args.iou, args.sigma, args.step, args.split)
    except (RefMatteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
