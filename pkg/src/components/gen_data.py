# src/components/gen_data.py

import logging

import config
from core import storage
from core.errors import ConfigError
from core.synth import DegradeParams, degrade, synth_clip

# clip seed = run seed * SEED_STRIDE + clip index
SEED_STRIDE = 1_000_003


def degrade_params_from(resolved):
    d = config.section(resolved, "degrade")
    return DegradeParams(d["blur_sigma"], d["downscale"], d["noise_sigma"], d["quantize_levels"] or None)


def build_dataset(resolved):
    """
    Returns [(manifest entry, hr Clip, lr Clip)] for `data.count` clips, cycling through
    `data.kinds`. Every clip is a pure function of (seed, index, config).
    """
    data = config.section(resolved, "data")
    params = degrade_params_from(resolved)
    kinds = data["kinds"]
    unknown = [k for k in kinds if k not in config.SYNTH_KINDS]
    if unknown or not kinds:
        raise ConfigError(f"data.kinds must be a non-empty subset of {config.SYNTH_KINDS}, got {kinds}")
    if data["count"] < 0:
        raise ConfigError(f"data.count must be >= 0, got {data['count']}")
    entries = []
    for i in range(data["count"]):
        kind = kinds[i % len(kinds)]
        clip_seed = resolved["seed"] * SEED_STRIDE + i
        hr = synth_clip(kind, data["T"], data["H"], data["W"], clip_seed,
                        velocity=tuple(data["velocity"]), period=data["period"])
        lr = degrade(hr, params, clip_seed)
        entry = {"id": f"clip_{i:04d}", "kind": kind, "seed": clip_seed, "T": data["T"],
                 "H": data["H"], "W": data["W"], "downscale": params.downscale}
        entries.append((entry, hr, lr))
    return entries


def cmd_gen_data(resolved):
    entries = build_dataset(resolved)
    root = resolved["data.dir"]
    config.write_resolved_config(resolved, root)
    storage.write_dataset(root, entries)
    logging.info(f"Dataset ready at {root}")
    return 0
