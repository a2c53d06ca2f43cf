# src/components/eval_cmd.py

import csv
import logging
import os

import numpy as np

import config
from core import storage
from core.errors import ConfigError, DimensionError
from core.metrics import psnr, ssim, warp_error
from core.pipeline import interpolate_frames, reconstruct_frames
from core.synth import Clip
from core.trainer import check_geometry, latest_checkpoint, load_model

EVAL_DIR = "eval"
METRICS_FILE = "metrics.csv"
COLUMNS = ["method", "clip", "psnr", "ssim", "warp_error"]
BASELINE = "bicubic"


def _methods(requested):
    unknown = [m for m in requested if m not in config.EVAL_METHODS]
    if unknown:
        raise ConfigError(f"Unknown eval method(s) {unknown}. Choose from {config.EVAL_METHODS}.")
    methods = list(dict.fromkeys(requested))
    if BASELINE not in methods:
        methods.append(BASELINE)
    return methods


def super_resolve_clip(method, model, lr_frames, hr_frames, scale):
    if method == "model":
        return reconstruct_frames(model, lr_frames, scale)
    if method == "hr":
        return np.asarray(hr_frames, dtype=np.float64)
    return interpolate_frames(lr_frames, scale, method)


def evaluate_clips(model, data_dir, manifest, methods, scale, dump_dir=None, dump_frames=0):
    """Per-clip rows for every method followed by one 'mean' row per method."""
    rows = []
    for i, entry in enumerate(manifest):
        hr_t, lr_t = storage.read_clip(data_dir, entry["id"])
        hr_frames, lr_frames = hr_t["frames"], lr_t["frames"]
        if hr_frames.shape[-1] != lr_frames.shape[-1] * scale or hr_frames.shape[-2] != lr_frames.shape[-2] * scale:
            raise DimensionError(f"Clip {entry['id']}: HR {hr_frames.shape[-2:]} is not x{scale} of LR "
                                 f"{lr_frames.shape[-2:]}", axis=2)
        if model is not None:
            check_geometry(model.config, scale, lr_frames.shape)
        hr_clip = Clip(hr_frames, hr_t.get("flow"))
        for method in methods:
            sr = super_resolve_clip(method, model, lr_frames, hr_frames, scale)
            rows.append({"method": method, "clip": entry["id"], "psnr": psnr(sr, hr_frames),
                         "ssim": ssim(sr, hr_frames),
                         "warp_error": warp_error(hr_clip, sr) if hr_clip.flow is not None else None})
            if dump_dir and i < dump_frames and method != "hr":
                storage.save_frame(os.path.join(dump_dir, f"{entry['id']}_{method}"), sr[0])
        if dump_dir and i < dump_frames:
            storage.save_frame(os.path.join(dump_dir, f"{entry['id']}_lr"), lr_frames[0])
            storage.save_frame(os.path.join(dump_dir, f"{entry['id']}_hr"), hr_frames[0])
    for method in methods:
        mine = [r for r in rows if r["method"] == method and r["clip"] != "mean"]
        summary = {"method": method, "clip": "mean"}
        for key in ("psnr", "ssim", "warp_error"):
            values = [r[key] for r in mine if r[key] is not None]
            summary[key] = float(np.mean(values)) if values else None
        rows.append(summary)
    return rows


def write_metrics(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                             for k in COLUMNS})


def cmd_eval(resolved):
    ev = config.section(resolved, "eval")
    methods = _methods(ev["methods"])
    data_dir = resolved["data.dir"]
    manifest = storage.read_manifest(data_dir)
    if ev["max_clips"] > 0:
        manifest = manifest[:ev["max_clips"]]

    model, scale = None, resolved["degrade.downscale"]
    if "model" in methods:
        checkpoint = ev["checkpoint"] or latest_checkpoint(resolved["out"])
        model, meta = load_model(checkpoint)
        scale = meta["scale"]
        logging.info(f"Evaluating checkpoint {checkpoint} (step {meta['step']})")

    out_dir = os.path.join(resolved["out"], EVAL_DIR)
    dump_dir = os.path.join(out_dir, "frames") if ev["dump_frames"] > 0 else None
    config.write_resolved_config(resolved, out_dir)
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)
    rows = evaluate_clips(model, data_dir, manifest, methods, scale, dump_dir, ev["dump_frames"])
    path = os.path.join(out_dir, METRICS_FILE)
    write_metrics(path, rows)
    for row in rows:
        if row["clip"] == "mean":
            logging.info(f"{row['method']:>8}: PSNR {row['psnr']} dB, SSIM {row['ssim']}, warp {row['warp_error']}")
    logging.info(f"Metrics written to {path}")
    return 0
