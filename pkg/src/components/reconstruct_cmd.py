# src/components/reconstruct_cmd.py

import logging
import os

import config

from core import storage
from core.errors import ConfigError
from core.pipeline import reconstruct_frames
from core.trainer import check_geometry, latest_checkpoint, load_model

RECONSTRUCT_DIR = "reconstruct"
OUTPUT_FILE = "sr.fvsr"


def cmd_reconstruct(resolved):
    """LR frames (an .fvsr with a 'frames' entry) -> SR frames via the trained pipeline."""
    rec = config.section(resolved, "reconstruct")
    if not rec["input"]:
        raise ConfigError("reconstruct.input is required (an .fvsr container with a 'frames' entry)")
    tensors = storage.load_tensors(rec["input"])
    if "frames" not in tensors:
        raise ConfigError(f"{rec['input']} has no 'frames' entry")
    lr_frames = tensors["frames"]
    checkpoint = rec["checkpoint"] or latest_checkpoint(resolved["out"])
    model, meta = load_model(checkpoint)
    check_geometry(model.config, meta["scale"], lr_frames.shape)

    sr = reconstruct_frames(model, lr_frames, meta["scale"])
    out_dir = os.path.join(resolved["out"], RECONSTRUCT_DIR)
    config.write_resolved_config(resolved, out_dir)
    storage.save_tensors(os.path.join(out_dir, OUTPUT_FILE), {"frames": sr})
    for t in range(min(rec["dump_frames"], len(sr))):
        storage.save_frame(os.path.join(out_dir, f"frame_{t:04d}"), sr[t])
    logging.info(f"Reconstructed {len(sr)} frame(s) {lr_frames.shape[-2:]} -> {sr.shape[-2:]} into {out_dir}")
    return 0
