# src/core/metrics.py

import math

import numpy as np

from core.errors import ContractError, DimensionError

PSNR_INF = math.inf


def _pair(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        axis = next((i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y), min(a.ndim, b.ndim))
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}", axis=axis)
    return a, b


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE) in dB; identical inputs give +inf."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, window=8, k1=0.01, k2=0.03, data_range=1.0):
    """
    Mean SSIM over non-overlapping window x window tiles of every (H, W) plane.
    Trailing rows/columns that do not fill a tile are ignored.
    """
    a, b = _pair(a, b)
    if a.ndim < 2:
        raise DimensionError(f"ssim needs at least 2 dims, got shape {a.shape}", axis=0)
    h, w = a.shape[-2:]
    if h < window or w < window:
        raise DimensionError(f"ssim window {window} exceeds input {h}x{w}", axis=a.ndim - 2 if h < window else a.ndim - 1)
    ty, tx = h // window, w // window

    def tiles(x):
        x = x.reshape(-1, h, w)[:, :ty * window, :tx * window]
        return x.reshape(-1, ty, window, tx, window).transpose(0, 1, 3, 2, 4).reshape(-1, window * window)

    ta, tb = tiles(a), tiles(b)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = ta.mean(axis=1), tb.mean(axis=1)
    var_a, var_b = ta.var(axis=1), tb.var(axis=1)
    cov = ((ta - mu_a[:, None]) * (tb - mu_b[:, None])).mean(axis=1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def warp(frame, flow):
    """
    Moves `frame` (C, H, W) along `flow` (2, H, W) = (dy, dx) with wrap-around:
    out[y, x] = frame[y - dy, x - dx]. Integer flow is gathered exactly, fractional
    flow is sampled bilinearly.
    """
    _, h, w = frame.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sy = yy - flow[0]
    sx = xx - flow[1]
    if np.all(flow == np.round(flow)):
        return frame[:, sy.astype(np.int64) % h, sx.astype(np.int64) % w]
    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = sy - y0, sx - x0
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    y1, x1 = (y0 + 1) % h, (x0 + 1) % w
    y0, x0 = y0 % h, x0 % w
    return ((1 - fy) * (1 - fx) * frame[:, y0, x0] + (1 - fy) * fx * frame[:, y0, x1]
            + fy * (1 - fx) * frame[:, y1, x0] + fy * fx * frame[:, y1, x1])


def warp_error(clip, frames=None):
    """
    Mean over t of MSE(frame[t+1], warp(frame[t], flow[t])), x1e3.

    `frames` evaluates other frames (e.g. a reconstruction) against the clip's
    ground-truth flow; it defaults to the clip's own frames.
    """
    if clip.flow is None:
        raise ContractError("warp_error needs ground-truth flow; this clip carries none")
    frames = np.asarray(clip.frames if frames is None else frames, dtype=np.float64)
    if frames.shape[0] != clip.flow.shape[0] + 1 or frames.shape[-2:] != clip.flow.shape[-2:]:
        raise DimensionError(f"frames {frames.shape} do not match flow {clip.flow.shape}", axis=0)
    errors = [np.mean((frames[t + 1] - warp(frames[t], clip.flow[t])) ** 2) for t in range(len(clip.flow))]
    return float(np.mean(errors)) * 1e3
