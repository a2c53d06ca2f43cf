# src/core/trainer.py

"""
End-to-end LBG training run: data loading, reference-VAE pretraining, the A/B
alternation with a two-phase learning rate, validation, CSV logging and checkpoints.
"""

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
import yaml

import config
from core import storage
from core.errors import ConfigError
from core.lbg import (STAGE_A, STAGE_PRETRAIN, LossWeights, PerceptualExtractor, StageSchedule, TrainState,
                      generate_reconstructions, pretrain_step, stage_a_step, stage_b_step)
from core.metrics import psnr, ssim
from core.optim import AdamW
from core.pipeline import reconstruct_frames
from core.rng import CounterRng
from core.tensorcore import default_dtype
from core.vae import VaeConfig, VaeModel, init_f16_from_f8

LOG_COLUMNS = ["step", "stage", "loss_total", "loss_rec", "loss_bound", "loss_reg",
               "F_ref", "F_lb", "grad_norm", "psnr_val", "ssim_val", "lr"]
LOG_FILE = "train_log.csv"
CHECKPOINT_DIR = "checkpoints"
MODEL_FILE = "model.fvsr"
STATE_FILE = "state.yaml"


# --- Config Translation ---

def model_config_from(resolved, f_dec=None):
    m = config.section(resolved, "model")
    return VaeConfig(f_enc=m["f_enc"], f_dec=f_dec or m["f_dec"], base_channels=m["base_channels"],
                     latent_channels=m["latent_channels"], channel_mult=tuple(m["channel_mult"]),
                     head_variant=m["head_variant"], channel_expand=m["channel_expand"])


def loss_weights_from(resolved):
    loss = config.section(resolved, "loss")
    if loss["objective"] not in config.OBJECTIVES:
        raise ConfigError(f"Unknown loss.objective '{loss['objective']}'. Choose from {config.OBJECTIVES}.")
    lambda_b = 0.0 if loss["objective"] == "vanilla" else loss["lambda_b"]
    return LossWeights(loss["lambda_mse"], loss["lambda_perc"], lambda_b, loss["lambda_reg"], loss["beta"],
                       loss["sigma_rec"], loss["mc_samples"], loss["bound_clip"], loss["reduction"])


def schedule_from(resolved):
    train = config.section(resolved, "train")
    b_steps = 0 if resolved["loss.objective"] == "vanilla" else train["stage_b_steps"]
    return StageSchedule(train["stage_a_steps"], b_steps)


def lr_at(step, train):
    """Two-phase schedule: train.lr before train.phase2_start, train.phase2_lr from it on."""
    return train["lr"] if step < train["phase2_start"] else train["phase2_lr"]


def validate_train_config(resolved):
    train = config.section(resolved, "train")
    for key in ("steps", "pretrain_steps"):
        if train[key] < 0:
            raise ConfigError(f"train.{key} must be >= 0, got {train[key]}")
    for key in ("batch_size", "val_every", "checkpoint_every", "log_every"):
        if train[key] < 1:
            raise ConfigError(f"train.{key} must be >= 1, got {train[key]}")
    for key in ("lr", "phase2_lr", "pretrain_lr"):
        if train[key] < 0:
            raise ConfigError(f"train.{key} must be >= 0, got {train[key]}")
    model_config_from(resolved)
    loss_weights_from(resolved)
    schedule_from(resolved)


# --- Data ---

@dataclass
class TrainingData:
    lr_train: np.ndarray
    hr_train: np.ndarray
    val_clips: list  # [(lr_frames, hr_frames)]


def load_training_data(data_dir, val_count, dtype):
    """Frames of every clip stacked into (N, C, h, w); the last `val_count` clips are held out."""
    manifest = storage.read_manifest(data_dir)
    if not manifest:
        raise ConfigError(f"Dataset at {data_dir} has no clips")
    n_val = min(val_count, len(manifest) - 1) if len(manifest) > 1 else 0
    train_ids = [e["id"] for e in manifest[:len(manifest) - n_val]]
    val_ids = [e["id"] for e in manifest[len(manifest) - n_val:]]

    lr, hr = [], []
    for clip_id in train_ids:
        hr_t, lr_t = storage.read_clip(data_dir, clip_id)
        lr.append(lr_t["frames"])
        hr.append(hr_t["frames"])
    val = []
    for clip_id in val_ids:
        hr_t, lr_t = storage.read_clip(data_dir, clip_id)
        val.append((lr_t["frames"].astype(dtype), hr_t["frames"]))
    data = TrainingData(np.concatenate(lr).astype(dtype), np.concatenate(hr).astype(dtype), val)
    logging.info(f"Loaded {len(data.lr_train)} training frames from {len(train_ids)} clip(s), "
                 f"{len(val_ids)} validation clip(s)")
    return data


def check_geometry(model_cfg, scale, lr_shape):
    """Raises before training if LR frames cannot pass through the codec."""
    r = model_cfg.ratio
    if scale % r:
        raise ConfigError(f"degrade.downscale={scale} is not divisible by the decoder ratio r={r}")
    h, w = lr_shape[-2:]
    side = scale // r
    if (h * side) % model_cfg.f_enc or (w * side) % model_cfg.f_enc:
        raise ConfigError(f"LR frames {h}x{w} upsampled by {side} are not divisible by f_enc={model_cfg.f_enc}")


def evaluate(model, val_clips, scale):
    """Mean PSNR / SSIM over validation clips; (None, None) when there are none."""
    if not val_clips:
        return None, None
    scores = []
    for lr_frames, hr_frames in val_clips:
        sr = reconstruct_frames(model, lr_frames, scale)
        scores.append((psnr(sr, hr_frames), ssim(sr, hr_frames)))
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))


# --- Checkpoints ---

def save_checkpoint(directory, state, model_cfg, resolved):
    os.makedirs(directory, exist_ok=True)
    arrays = {}
    for prefix, module in (("theta", state.f16), ("psi", state.ref), ("phi", state.lb)):
        arrays.update({f"{prefix}.{k}": v for k, v in module.state_dict().items()})
    arrays.update(state.opt_theta.state_arrays("opt.theta"))
    arrays.update(state.opt_phi.state_arrays("opt.phi"))
    storage.save_tensors(os.path.join(directory, MODEL_FILE), arrays)
    meta = {
        "step": state.step,
        "seed": state.seed,
        "scale": state.scale,
        "clip_events": state.clip_events,
        "precision": resolved["precision"],
        "model": model_cfg.to_dict(),
        "opt_theta_step": state.opt_theta.moments.step,
        "opt_phi_step": state.opt_phi.moments.step,
        "rng": CounterRng(state.seed, "train").fork("step", state.step).state(),
    }
    with open(os.path.join(directory, STATE_FILE), "w") as f:
        yaml.safe_dump(meta, f, sort_keys=True)
    logging.info(f"Checkpoint saved to {directory} (step {state.step})")
    return directory


def read_checkpoint(directory):
    state_path = os.path.join(directory, STATE_FILE)
    if not os.path.isfile(state_path):
        raise FileNotFoundError(f"No checkpoint at {directory} (missing {STATE_FILE})")
    with open(state_path) as f:
        meta = yaml.safe_load(f)
    return storage.load_tensors(os.path.join(directory, MODEL_FILE)), meta


def _group(arrays, prefix):
    return {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}


def load_model(directory):
    """The trained f16 pipeline model (theta) of a checkpoint, plus its metadata."""
    arrays, meta = read_checkpoint(directory)
    dtype = np.dtype(config.PRECISION_DTYPES[meta["precision"]]).type
    with default_dtype(dtype):
        model = VaeModel(VaeConfig.from_dict(meta["model"]))
    model.load_state_dict(_group(arrays, "theta"))
    model.set_trainable(False)
    return model, meta


def latest_checkpoint(out_dir):
    root = os.path.join(out_dir, CHECKPOINT_DIR)
    if not os.path.isdir(root):
        raise FileNotFoundError(f"No checkpoints under {out_dir}")
    names = sorted(n for n in os.listdir(root) if n.startswith("step_"))
    if not names:
        raise FileNotFoundError(f"No checkpoints under {root}")
    return os.path.join(root, names[-1])


def checkpoint_path(out_dir, step):
    return os.path.join(out_dir, CHECKPOINT_DIR, f"step_{step:06d}")


# --- Logging ---

def _format(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


class CsvLog:
    """Append-only metric log; on resume, rows at or after the resume step are dropped."""

    def __init__(self, path, resume_step=None):
        self.path = path
        kept = []
        if resume_step is not None and os.path.isfile(path):
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    if row["stage"] == STAGE_PRETRAIN or int(row["step"]) < resume_step:
                        kept.append(row)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(kept)

    def write(self, row):
        with open(self.path, "a", newline="") as f:
            csv.DictWriter(f, fieldnames=LOG_COLUMNS).writerow({k: _format(row.get(k)) for k in LOG_COLUMNS})


# --- Training ---

@dataclass
class TrainResult:
    out_dir: str
    checkpoint: str
    log_path: str
    psnr_val: float = None
    ssim_val: float = None


def build_state(resolved, model_cfg, data, log):
    """Pretrains psi on HR frames, then derives phi (copy of psi) and theta (f16 from psi)."""
    seed = resolved["seed"]
    train = config.section(resolved, "train")
    w = loss_weights_from(resolved)
    optim = config.section(resolved, "optim")
    betas = (optim["beta1"], optim["beta2"])

    ref = VaeModel(model_config_from(resolved, f_dec=model_cfg.f_enc), seed)
    ref_opt = AdamW(ref.named_parameters(), betas, optim["weight_decay"], optim["eps"])
    pretrain_rng = CounterRng(seed, "pretrain")
    for k in range(train["pretrain_steps"]):
        rng = pretrain_rng.fork("step", k)
        idx = rng.fork("batch").integers(0, len(data.hr_train), train["batch_size"])
        record = pretrain_step(ref, ref_opt, data.hr_train[idx], w, train["pretrain_lr"], rng, k)
        log.write(record.as_row())
        if (k + 1) % train["log_every"] == 0:
            logging.info(f"Pretrain step {k + 1}/{train['pretrain_steps']}: loss {record.loss_total:.6f}")
    ref.set_trainable(False)
    lb = ref.clone()

    if model_cfg.ratio == 2:
        f16 = init_f16_from_f8(ref, seed, model_cfg.head_variant, model_cfg.channel_expand,
                               resolved["model.zero_head"])
    else:
        f16 = ref.clone()
        f16.unfreeze("decoder.trunk", "decoder.head")

    return TrainState(
        f16=f16, ref=ref, lb=lb,
        perceptual=PerceptualExtractor(model_cfg.in_channels, tuple(resolved["loss.perceptual_channels"]), seed),
        opt_theta=AdamW(f16.trainable_parameters(), betas, optim["weight_decay"], optim["eps"]),
        opt_phi=AdamW(lb.named_parameters(), betas, optim["weight_decay"], optim["eps"]),
        schedule=schedule_from(resolved), scale=resolved["degrade.downscale"], seed=seed)


def restore_state(state, directory):
    arrays, meta = read_checkpoint(directory)
    state.f16.load_state_dict(_group(arrays, "theta"))
    state.ref.load_state_dict(_group(arrays, "psi"))
    state.lb.load_state_dict(_group(arrays, "phi"))
    state.opt_theta.load_state_arrays(arrays, "opt.theta", meta["opt_theta_step"])
    state.opt_phi.load_state_arrays(arrays, "opt.phi", meta["opt_phi_step"])
    state.step = meta["step"]
    state.clip_events = meta["clip_events"]
    logging.info(f"Resumed from {directory} at step {state.step}")
    return state


def _restore_empty(resolved, model_cfg, data):
    """Shell state with the right architecture; parameters are overwritten by the checkpoint."""
    silent = dict(resolved)
    silent["train.pretrain_steps"] = 0
    return build_state(silent, model_cfg, data, _NullLog())


class _NullLog:
    def write(self, row):
        pass


def train(resolved):
    """
    Runs pretraining (unless resuming) and `train.steps` alternating A/B steps.

    Config and data problems raise before the output directory is touched.
    """
    validate_train_config(resolved)
    model_cfg = model_config_from(resolved)
    train_cfg = config.section(resolved, "train")
    dtype = np.dtype(config.PRECISION_DTYPES[resolved["precision"]]).type
    data = load_training_data(resolved["data.dir"], resolved["data.val_count"], dtype)
    check_geometry(model_cfg, resolved["degrade.downscale"], data.lr_train.shape)
    resume = train_cfg["resume"]
    if resume and not os.path.isfile(os.path.join(resume, STATE_FILE)):
        raise ConfigError(f"train.resume points to {resume}, which is not a checkpoint directory")

    out_dir = resolved["out"]
    config.write_resolved_config(resolved, out_dir)
    w = loss_weights_from(resolved)

    with default_dtype(dtype):
        if resume:
            _, meta = read_checkpoint(resume)
            log = CsvLog(os.path.join(out_dir, LOG_FILE), resume_step=meta["step"])
            state = restore_state(_restore_empty(resolved, model_cfg, data), resume)
        else:
            log = CsvLog(os.path.join(out_dir, LOG_FILE))
            state = build_state(resolved, model_cfg, data, log)

        steps = train_cfg["steps"]
        psnr_val = ssim_val = None
        while state.step < steps:
            step = state.step
            lr = lr_at(step, train_cfg)
            rng = state.rng_for(step)
            idx = rng.fork("batch").integers(0, len(data.lr_train), train_cfg["batch_size"])
            if state.schedule.stage_for(step) == STAGE_A:
                record = stage_a_step(state, (data.lr_train[idx], data.hr_train[idx]), w, lr, rng)
            else:
                y_hat = generate_reconstructions(state, data.lr_train[idx])
                record = stage_b_step(state, y_hat, w, lr, rng)
            row = record.as_row()
            if (step + 1) % train_cfg["val_every"] == 0 or step + 1 == steps:
                psnr_val, ssim_val = evaluate(state.f16, data.val_clips, state.scale)
                row.update(psnr_val=psnr_val, ssim_val=ssim_val)
                if psnr_val is not None:
                    logging.info(f"Step {step + 1}: validation PSNR {psnr_val:.3f} dB, SSIM {ssim_val:.4f}")
            log.write(row)
            if (step + 1) % train_cfg["log_every"] == 0:
                logging.info(f"Step {step + 1}/{steps} [{record.stage}] loss {record.loss_total:.6f} lr {lr:g}")
            if (step + 1) % train_cfg["checkpoint_every"] == 0 and step + 1 < steps:
                save_checkpoint(checkpoint_path(out_dir, state.step), state, state.f16.config, resolved)

        final = save_checkpoint(checkpoint_path(out_dir, state.step), state, state.f16.config, resolved)
    if state.clip_events:
        logging.warning(f"L_bound was clipped {state.clip_events} time(s) during training")
    return TrainResult(out_dir, final, os.path.join(out_dir, LOG_FILE), psnr_val, ssim_val)
