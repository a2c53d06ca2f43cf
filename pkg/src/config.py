# src/config.py

import copy
import logging
import os

import yaml
from dotenv import load_dotenv

from core.errors import ConfigError

load_dotenv()

# --- Path Configuration ---
# Project root is two levels up from this file (src/config.py -> src/ -> root)
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir))

RUNS_DIR = os.getenv("FASTVSR_RUNS_DIR", os.path.join(PROJECT_ROOT, "runs"))
DATA_DIR = os.getenv("FASTVSR_DATA_DIR", os.path.join(PROJECT_ROOT, "data"))
DEFAULT_CONFIG_FILE = os.path.join(PROJECT_ROOT, "config.yaml")
RESOLVED_CONFIG_FILE = "resolved_config.yaml"

# --- Logging ---
LOG_LEVEL = os.getenv("FASTVSR_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

# --- Allowed Values ---
HEAD_VARIANTS = ("pixel_shuffle", "nearest", "bilinear", "bicubic")
CHANNEL_EXPAND_MODES = ("duplicate", "projection")
SYNTH_KINDS = ("checker", "ramp", "texture", "moving_pattern")
EVAL_METHODS = ("model", "bicubic", "nearest", "bilinear", "hr")
PRECISIONS = ("f32", "f64")
REDUCTIONS = ("mean", "sum")
OBJECTIVES = ("lbg", "vanilla")

PRECISION_DTYPES = {"f32": "float32", "f64": "float64"}

# Every key any command reads, with its default. `resolve_run_config` flattens this to
# dotted keys ("loss.lambda_b"); unknown keys in a config file or --set are errors.
DEFAULT_RUN_CONFIG = {
    "seed": 0,
    "out": RUNS_DIR,
    "precision": "f32",
    "data": {
        "dir": DATA_DIR,
        "count": 64,
        "T": 4,
        "H": 128,
        "W": 128,
        "kinds": list(SYNTH_KINDS),
        "velocity": [1, 0],
        "period": 8,
        "val_count": 8,
    },
    "degrade": {
        "blur_sigma": 1.0,
        "downscale": 4,
        "noise_sigma": 0.01,
        "quantize_levels": 0,  # 0 = off
    },
    "model": {
        "f_enc": 8,
        "f_dec": 16,
        "base_channels": 8,
        "latent_channels": 4,
        "channel_mult": [1, 2, 2],
        "head_variant": "pixel_shuffle",
        "channel_expand": "duplicate",
        "zero_head": False,
    },
    "loss": {
        "objective": "lbg",
        "lambda_mse": 1.0,
        "lambda_perc": 0.1,
        "lambda_b": 0.05,
        "lambda_reg": 0.01,
        "beta": 1.5,
        "sigma_rec": 1.0,
        "mc_samples": 1,
        "bound_clip": 1000.0,
        "reduction": "mean",
        "perceptual_channels": [8, 16, 16],
    },
    "optim": {
        "beta1": 0.9,
        "beta2": 0.95,
        "weight_decay": 0.0,
        "eps": 1e-8,
    },
    "train": {
        "steps": 2000,
        "batch_size": 4,
        "lr": 1e-3,
        "phase2_start": 1500,
        "phase2_lr": 1e-4,
        "stage_a_steps": 1,
        "stage_b_steps": 1,
        "pretrain_steps": 500,
        "pretrain_lr": 1e-3,
        "val_every": 100,
        "checkpoint_every": 500,
        "log_every": 50,
        "resume": "",
    },
    "eval": {
        "checkpoint": "",
        "methods": ["model", "bicubic"],
        "dump_frames": 0,
        "max_clips": 0,  # 0 = all clips
    },
    "profile": {
        "volume": "33,720,1280",
        "strides": "4,8",
        "constants": "calibrate",  # or a YAML file with kappa_*/mu_* keys
        "calibrate_sizes": [64, 128],
        "measure_size": 128,
    },
    "reconstruct": {
        "checkpoint": "",
        "input": "",
        "dump_frames": 1,
    },
}


# --- Run Configuration ---

def flatten(tree, prefix=""):
    """{'loss': {'beta': 1.5}} -> {'loss.beta': 1.5}. Dotted keys pass through unchanged."""
    flat = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, path + "."))
        else:
            flat[path] = value
    return flat


def unflatten(flat):
    tree = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return tree


DEFAULTS = flatten(DEFAULT_RUN_CONFIG)


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, list):
        if isinstance(value, (list, tuple)):
            return list(value)
    elif isinstance(default, str):
        if value is None:
            return ""
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            return str(value)
    raise ConfigError(f"Config key '{key}' expects {type(default).__name__}, got {value!r}")


def _apply(resolved, updates, source):
    for key, value in updates.items():
        if key not in DEFAULTS:
            raise ConfigError(f"Unknown config key '{key}' in {source}")
        resolved[key] = _coerce(key, value)


def parse_overrides(pairs):
    """['loss.lambda_b=0', 'model.head_variant=nearest'] -> {key: YAML-parsed value}."""
    updates = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got '{pair}'")
        key, raw = pair.split("=", 1)
        try:
            updates[key.strip()] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse value for '{key}': {e}")
    return updates


def load_config_file(path):
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Error reading {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping of config keys")
    return flatten(data)


def resolve_run_config(config_path=None, overrides=None, seed=None, out=None, precision=None, updates=None):
    """
    Defaults <- config file <- --set overrides <- `updates` <- global flags. Returns a flat dict
    holding every key in DEFAULTS.
    """
    resolved = copy.deepcopy(DEFAULTS)
    if config_path:
        _apply(resolved, load_config_file(config_path), config_path)
    _apply(resolved, parse_overrides(overrides), "--set")
    _apply(resolved, updates or {}, "command flags")
    flags = {"seed": seed, "out": out, "precision": precision}
    _apply(resolved, {k: v for k, v in flags.items() if v is not None}, "command-line flags")
    if resolved["precision"] not in PRECISIONS:
        raise ConfigError(f"Unknown precision '{resolved['precision']}'. Choose from {PRECISIONS}.")
    if resolved["seed"] < 0:
        raise ConfigError(f"seed must be non-negative, got {resolved['seed']}")
    return resolved


def section(resolved, name):
    """Sub-dict of one config section with the prefix stripped."""
    prefix = f"{name}."
    return {k[len(prefix):]: v for k, v in resolved.items() if k.startswith(prefix)}


def write_resolved_config(resolved, directory):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, RESOLVED_CONFIG_FILE)
    with open(path, "w") as f:
        yaml.safe_dump(unflatten(resolved), f, default_flow_style=False, sort_keys=True)
    logging.info(f"Resolved configuration written to {path}")
    return path
