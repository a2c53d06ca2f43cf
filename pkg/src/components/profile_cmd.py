# src/components/profile_cmd.py

import logging
import os

import numpy as np
import yaml

import config
from core.costmodel import (CodecConstants, PipelineConfig, StrideSpec, VolumeSpec, calibrate_from_model,
                            compare_pipelines, dominance_ratio, measured_comparison)
from core.errors import ConfigError
from core.tensorcore import default_dtype
from core.trainer import model_config_from
from core.vae import VaeModel, init_f16_from_f8

PROFILE_DIR = "profile"
REPORT_FILE = "profile.csv"
CALIBRATION_FILE = "calibration.yaml"


def build_codecs(resolved):
    """Untrained symmetric f8 codec and its asymmetric f16-decoder counterpart."""
    dtype = np.dtype(config.PRECISION_DTYPES[resolved["precision"]]).type
    with default_dtype(dtype):
        f8 = VaeModel(model_config_from(resolved, f_dec=resolved["model.f_enc"]), resolved["seed"])
        f16 = init_f16_from_f8(f8, resolved["seed"], resolved["model.head_variant"], resolved["model.channel_expand"])
    return f8, f16


def load_constants(path):
    """YAML with kappa_*/mu_* keys, optionally split into 'symmetric' / 'asymmetric' sections."""
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"Constants file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Error reading {path}: {e}")
    try:
        if "symmetric" in data:
            return CodecConstants.from_dict(data["symmetric"]), CodecConstants.from_dict(data["asymmetric"])
        shared = CodecConstants.from_dict(data)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"{path}: invalid constants ({e})")
    return shared, shared


def cmd_profile(resolved):
    prof = config.section(resolved, "profile")
    volume = VolumeSpec.parse(prof["volume"])
    strides = StrideSpec.parse(prof["strides"])
    f8, f16 = build_codecs(resolved)

    calibration = {}
    if prof["constants"] == "calibrate":
        sizes = prof["calibrate_sizes"]
        sym = calibrate_from_model(f8, [VolumeSpec(1, s, s) for s in sizes], strides, resolved["seed"])
        asym = calibrate_from_model(f16, [VolumeSpec(1, s, s) for s in sizes], strides, resolved["seed"])
        sym_c, asym_c = sym.constants, asym.constants
        calibration = {"symmetric": {"constants": sym_c.to_dict(), "residuals": sym.residuals},
                       "asymmetric": {"constants": asym_c.to_dict(), "residuals": asym.residuals}}
    else:
        sym_c, asym_c = load_constants(prof["constants"])
    sym_c.plausibility_warnings()

    measure = VolumeSpec(1, prof["measure_size"], prof["measure_size"])
    report = compare_pipelines(
        volume,
        PipelineConfig("symmetric", strides, sym_c, 1),
        PipelineConfig("asymmetric", strides, asym_c, f16.config.ratio),
        measured=measured_comparison(f8, f16, measure, resolved["seed"]))

    out_dir = os.path.join(resolved["out"], PROFILE_DIR)
    config.write_resolved_config(resolved, out_dir)
    report.to_csv(os.path.join(out_dir, REPORT_FILE))
    if calibration:
        with open(os.path.join(out_dir, CALIBRATION_FILE), "w") as f:
            yaml.safe_dump(calibration, f, sort_keys=True)
    print(report.table())
    print(f"denoiser volume divisor s_t*s_s^2 = {strides.divisor}")
    if sym_c.kappa_T > 0:
        print(f"decoder dominance ratio = {dominance_ratio(strides, sym_c):.4g}")
    logging.info(f"Profile report written to {out_dir}")
    return 0
