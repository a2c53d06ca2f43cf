# src/core/pipeline.py

import numpy as np

from core.errors import ConfigError, DimensionError
from core.tensorcore import Tensor, as_batch, clip, interpolate_upsample, no_grad

PRE_UPSAMPLE_MODE = "bilinear"


def pre_upsample_factor(model_config, scale):
    """Explicit interpolation factor so that explicit x indirect (r) equals the SR scale."""
    r = model_config.ratio
    if scale % r:
        raise ConfigError(f"SR scale x{scale} is not divisible by the decoder ratio r={r}")
    return scale // r


def super_resolve(model, lr_frames, scale):
    """
    LR frames -> bilinear x(scale / r) -> encoder -> posterior mean -> decoder.

    Differentiable w.r.t. trainable decoder parameters; inference callers wrap it in
    `no_grad`. Accepts (C,H,W) or (N,C,H,W) inputs and arrays or Tensors.
    """
    x = lr_frames if isinstance(lr_frames, Tensor) else Tensor(lr_frames)
    x4, squeeze = as_batch(x)
    factor = pre_upsample_factor(model.config, scale)
    codec_input = interpolate_upsample(x4, factor, PRE_UPSAMPLE_MODE) if factor > 1 else x4
    dist = model.encode(codec_input)
    out = model.decode(dist.mean)
    expected = (x4.shape[2] * scale, x4.shape[3] * scale)
    if out.shape[2:] != expected:
        raise DimensionError(f"pipeline produced {out.shape[2:]}, expected {expected}", axis=2)
    return out.reshape(out.shape[1:]) if squeeze else out


def reconstruct_frames(model, lr_frames, scale, batch_size=4):
    """Inference over a (T,C,H,W) array; returns clamped float64 SR frames."""
    outputs = []
    with no_grad():
        for start in range(0, len(lr_frames), batch_size):
            chunk = np.asarray(lr_frames[start:start + batch_size], dtype=model.encoder.conv_in.weight.dtype)
            outputs.append(clip(super_resolve(model, chunk, scale), 0.0, 1.0).data.astype(np.float64))
    return np.concatenate(outputs) if outputs else np.zeros((0,), dtype=np.float64)


def interpolate_frames(lr_frames, scale, mode):
    """Interpolation baseline over a (T,C,H,W) array."""
    with no_grad():
        out = interpolate_upsample(Tensor(np.asarray(lr_frames, dtype=np.float64)), scale, mode)
    return np.clip(out.data, 0.0, 1.0)
