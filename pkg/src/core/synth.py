# src/core/synth.py

"""Procedural video clips and the blur / downsample / noise / quantize degradation."""

import math
from dataclasses import dataclass

import numpy as np

import config
from core.errors import ConfigError, ContractError, DimensionError
from core.rng import CounterRng

MIN_SIDE = 16


@dataclass
class Clip:
    """frames: (T, C, H, W) in [0, 1]. flow: (T-1, 2, H, W) as (dy, dx), frame t -> t+1."""
    frames: np.ndarray
    flow: np.ndarray = None

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise DimensionError(f"Clip frames must be (T, C, H, W), got shape {self.frames.shape}", axis=0)
        if self.flow is not None:
            t, _, h, w = self.frames.shape
            if t < 2:
                raise ContractError("A clip with flow needs at least 2 frames")
            if self.flow.shape != (t - 1, 2, h, w):
                raise DimensionError(f"flow shape {self.flow.shape} does not match frames {self.frames.shape}", axis=0)

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class DegradeParams:
    blur_sigma: float = 1.0
    downscale: int = 4
    noise_sigma: float = 0.01
    quantize_levels: int = None

    def __post_init__(self):
        if self.downscale < 1:
            raise ConfigError(f"degrade.downscale must be >= 1, got {self.downscale}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("degrade sigmas must be non-negative")
        if self.quantize_levels is not None and self.quantize_levels < 2:
            raise ConfigError(f"degrade.quantize_levels must be >= 2, got {self.quantize_levels}")


# --- Procedural Content ---

def _checker(h, w, period):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy // period + xx // period) % 2).astype(np.float64)


def _ramp(h, w, rng):
    angle = float(rng.uniform((), 0.0, 2.0 * math.pi))
    yy, xx = np.mgrid[0:h, 0:w]
    proj = math.cos(angle) * xx / max(w - 1, 1) + math.sin(angle) * yy / max(h - 1, 1)
    return (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)


def _texture(h, w, rng, shift=(0.0, 0.0), components=6):
    """Sum of grid-periodic sinusoids, so integer and fractional shifts wrap seamlessly."""
    fy = rng.integers(1, max(h // 4, 2), size=components)
    fx = rng.integers(1, max(w // 4, 2), size=components)
    phase = rng.uniform((components,), 0.0, 2.0 * math.pi)
    amp = rng.uniform((components,), 0.5, 1.0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = yy - shift[0], xx - shift[1]
    field = sum(a * np.sin(2.0 * math.pi * (ky * yy / h + kx * xx / w) + p)
                for a, ky, kx, p in zip(amp, fy, fx, phase))
    return 0.5 + 0.5 * field / amp.sum()


def _colorize(plane, rng, channels):
    gains = rng.uniform((channels,), 0.6, 1.0)
    offsets = rng.uniform((channels,), 0.0, 0.4) * (1.0 - gains)
    return np.stack([np.clip(plane * g + o, 0.0, 1.0) for g, o in zip(gains, offsets)])


def synth_clip(kind, T, H, W, seed, velocity=(1, 0), period=8, channels=3):
    """
    Deterministic procedural clip. `moving_pattern` translates a texture by `velocity`
    (dy, dx) pixels per frame with wrap-around and carries that flow exactly; the static
    kinds repeat one frame and carry zero flow.
    """
    if kind not in config.SYNTH_KINDS:
        raise ConfigError(f"Unknown clip kind '{kind}'. Choose from {config.SYNTH_KINDS}.")
    if min(H, W) < MIN_SIDE:
        raise ConfigError(f"Clip sides must be >= {MIN_SIDE}, got {H}x{W}")
    if T < 1:
        raise ConfigError(f"Clip needs at least one frame, got T={T}")
    rng = CounterRng(seed, f"synth/{kind}")

    if kind == "checker":
        base = _checker(H, W, period)
        frames = np.broadcast_to(base, (T, channels, H, W)).copy()
    elif kind == "ramp":
        frames = np.broadcast_to(_colorize(_ramp(H, W, rng), rng, channels), (T, channels, H, W)).copy()
    elif kind == "texture":
        frames = np.broadcast_to(_colorize(_texture(H, W, rng), rng, channels), (T, channels, H, W)).copy()
    else:
        frames = _moving_frames(T, H, W, rng, velocity, channels)

    flow = None
    if T >= 2:
        v = velocity if kind == "moving_pattern" else (0, 0)
        flow = np.empty((T - 1, 2, H, W), dtype=np.float64)
        flow[:, 0], flow[:, 1] = v[0], v[1]
    return Clip(frames.astype(np.float64), flow)


def _moving_frames(T, H, W, rng, velocity, channels):
    vy, vx = velocity
    if float(vy).is_integer() and float(vx).is_integer():
        first = _colorize(_texture(H, W, rng.fork("pattern")), rng.fork("color"), channels)
        return np.stack([np.roll(first, (int(vy) * t, int(vx) * t), axis=(1, 2)) for t in range(T)])
    frames = []
    for t in range(T):
        plane = _texture(H, W, rng.fork("pattern"), shift=(vy * t, vx * t))
        frames.append(_colorize(plane, rng.fork("color"), channels))
    return np.stack(frames)


# --- Degradation ---

def gaussian_kernel(sigma):
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-x * x / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur(frames, sigma):
    k = gaussian_kernel(sigma)
    radius = len(k) // 2
    if radius == 0:
        return frames
    h, w = frames.shape[-2:]
    pad = [(0, 0)] * (frames.ndim - 2)
    padded = np.pad(frames, pad + [(radius, radius), (0, 0)], mode="reflect")
    out = sum(k[i] * padded[..., i:i + h, :] for i in range(len(k)))
    padded = np.pad(out, pad + [(0, 0), (radius, radius)], mode="reflect")
    return sum(k[i] * padded[..., :, i:i + w] for i in range(len(k)))


def box_downsample(frames, factor):
    if factor == 1:
        return frames
    *lead, h, w = frames.shape
    return frames.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def degrade(clip, p, seed):
    """HR clip -> LR clip; LR geometry is exactly HR / downscale and values stay in [0, 1]."""
    _, _, h, w = clip.shape
    if h % p.downscale or w % p.downscale:
        raise DimensionError(f"Clip {h}x{w} is not divisible by downscale {p.downscale}", axis=2 if h % p.downscale else 3)
    out = box_downsample(_blur(clip.frames, p.blur_sigma), p.downscale)
    if p.noise_sigma > 0:
        out = out + p.noise_sigma * CounterRng(seed, "degrade").normal(out.shape)
    if p.quantize_levels:
        levels = p.quantize_levels - 1
        out = np.round(np.clip(out, 0.0, 1.0) * levels) / levels
    out = np.clip(out, 0.0, 1.0)
    flow = None
    if clip.flow is not None:
        flow = box_downsample(clip.flow, p.downscale) / p.downscale
    return Clip(out, flow)
