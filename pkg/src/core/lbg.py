# src/core/lbg.py

"""
Lower-bound-guided (LBG) training of the f16 decoder.

Stage A updates the f16 decoder (theta) on
    L_f16 = L_rec + lambda_b * (F_ref(y_hat) - F_lb(y_hat)) + lambda_reg * TV(y_hat)
with the reference VAE (psi) and the lower-bound VAE (phi) treated as fixed functions
of y_hat. Stage B fits phi to detached reconstructions with a beta-weighted ELBO.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

import config
from core.errors import ConfigError, ContractError, DimensionError
from core.layers import Conv2d, Module, requires_grad
from core.optim import AdamW
from core.pipeline import super_resolve
from core.rng import CounterRng
from core.tensorcore import Tensor, backward, clip, no_grad, silu, smooth_abs, tmean, tsum
from core.vae import free_energy

STAGE_A = "A"
STAGE_B = "B"
STAGE_PRETRAIN = "P"


@dataclass
class LossWeights:
    lambda_mse: float = 1.0
    lambda_perc: float = 0.1
    lambda_b: float = 0.05
    lambda_reg: float = 0.01
    beta: float = 1.5
    sigma_rec: float = 1.0
    mc_samples: int = 1
    bound_clip: float = 1e3
    reduction: str = "mean"

    def __post_init__(self):
        for name in ("lambda_mse", "lambda_perc", "lambda_b", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be non-negative, got {getattr(self, name)}")
        if self.beta < 1:
            raise ConfigError(f"loss.beta must be >= 1, got {self.beta}")
        if self.sigma_rec <= 0:
            raise ConfigError(f"loss.sigma_rec must be > 0, got {self.sigma_rec}")
        if self.mc_samples < 1:
            raise ConfigError(f"loss.mc_samples must be >= 1, got {self.mc_samples}")
        if self.bound_clip <= 0:
            raise ConfigError(f"loss.bound_clip must be > 0, got {self.bound_clip}")
        if self.reduction not in config.REDUCTIONS:
            raise ConfigError(f"Unknown loss.reduction '{self.reduction}'. Choose from {config.REDUCTIONS}.")


class PerceptualExtractor(Module):
    """Fixed random-weight feature stack: three stride-2 3x3 convs, never trained."""

    def __init__(self, in_channels=3, channels=(8, 16, 16), seed=0):
        rng = CounterRng(seed, "perceptual")
        chs = (in_channels,) + tuple(channels)
        self.layers = [Conv2d(chs[i], chs[i + 1], 3, rng, stride=2, padding=1) for i in range(3)]
        self.set_trainable(False)

    def forward(self, x):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = silu(h)
        return h


@dataclass
class BoundTerms:
    loss: Tensor
    f_ref: np.ndarray
    f_lb: np.ndarray
    clipped: int


@dataclass
class StageSchedule:
    a_steps: int = 1
    b_steps: int = 1

    def __post_init__(self):
        if self.a_steps < 1 or self.b_steps < 0:
            raise ConfigError(f"stage schedule needs a_steps >= 1 and b_steps >= 0, got {self.a_steps}:{self.b_steps}")

    def stage_for(self, step):
        return STAGE_A if step % (self.a_steps + self.b_steps) < self.a_steps else STAGE_B


@dataclass
class TrainState:
    """theta = f16, psi = ref (always frozen), phi = lb."""
    f16: Module
    ref: Module
    lb: Module
    perceptual: PerceptualExtractor
    opt_theta: AdamW
    opt_phi: AdamW
    schedule: StageSchedule = field(default_factory=StageSchedule)
    scale: int = 4
    seed: int = 0
    step: int = 0
    clip_events: int = 0

    def rng_for(self, step):
        return CounterRng(self.seed, "train").fork("step", step)


@dataclass
class StepRecord:
    step: int
    stage: str
    loss_total: float
    loss_rec: float = None
    loss_bound: float = None
    loss_reg: float = None
    F_ref: float = None
    F_lb: float = None
    grad_norm: float = None
    lr: float = None
    skipped: bool = False

    def as_row(self):
        return {
            "step": self.step, "stage": self.stage, "loss_total": self.loss_total,
            "loss_rec": self.loss_rec, "loss_bound": self.loss_bound, "loss_reg": self.loss_reg,
            "F_ref": self.F_ref, "F_lb": self.F_lb, "grad_norm": self.grad_norm, "lr": self.lr,
        }


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x))


def _per_sample_scale(y, reduction):
    if reduction == "sum":
        return 1.0
    return 1.0 / float(np.prod(y.shape[1:] if y.ndim == 4 else y.shape))


def _latent_shape(model, y):
    cfg = model.config
    n = (y.shape[0],) if y.ndim == 4 else ()
    return n + (cfg.latent_channels, y.shape[-2] // cfg.f_enc, y.shape[-1] // cfg.f_enc)


# --- Losses ---

def loss_rec(y_hat, y_star, w, phi):
    """lambda_mse * ||y_hat - y*||^2 + lambda_perc * ||Phi(y_hat) - Phi(y*)||^2 (mean- or sum-reduced)."""
    y_star = _as_tensor(y_star, y_hat)
    if y_hat.shape != y_star.shape:
        raise DimensionError(f"loss_rec: y_hat {y_hat.shape} vs y_star {y_star.shape}", axis=0)
    reduce = tmean if w.reduction == "mean" else tsum
    diff = y_hat - y_star
    total = reduce(diff * diff) * w.lambda_mse
    if w.lambda_perc > 0:
        feat = phi(y_hat) - phi(y_star.detach())
        total = total + reduce(feat * feat) * w.lambda_perc
    return total


def loss_vanilla(y_hat, y_star, w, phi):
    """Pixel + perceptual baseline objective. The adversarial term of the GAN baseline is not implemented."""
    return loss_rec(y_hat, y_star, w, phi)


def bound_terms(y_hat, ref, lb, mc_samples, sigma_rec, rng=None, clip_value=None, reduction="mean"):
    """
    F_ref(y_hat) - F_lb(y_hat), batch-averaged, with gradients flowing only through y_hat.

    Both free energies use the same noise draws when their latent geometries agree.
    Each sample's difference is clipped to [-clip_value, clip_value].
    """
    if rng is None:
        raise ContractError("bound_terms needs an rng for its shared noise draws")
    ref_shape, lb_shape = _latent_shape(ref, y_hat), _latent_shape(lb, y_hat)
    dtype = y_hat.dtype
    ref_noise = [rng.normal(ref_shape, dtype=dtype) for _ in range(mc_samples)]
    lb_noise = ref_noise if lb_shape == ref_shape else [rng.normal(lb_shape, dtype=dtype) for _ in range(mc_samples)]

    with requires_grad([ref, lb], False):
        f_ref = free_energy(ref, y_hat, mc_samples, sigma_rec, noise=ref_noise).total
        f_lb = free_energy(lb, y_hat, mc_samples, sigma_rec, noise=lb_noise).total
    scale = _per_sample_scale(y_hat, reduction)
    diff = (f_ref - f_lb) * scale
    clipped = 0
    if clip_value is not None:
        clipped = int(np.count_nonzero(np.abs(diff.data) > clip_value))
        if clipped:
            logging.warning(f"L_bound clipped for {clipped} sample(s) at +/-{clip_value}")
        diff = clip(diff, -clip_value, clip_value)
    return BoundTerms(tmean(diff), np.atleast_1d(f_ref.data * scale), np.atleast_1d(f_lb.data * scale), clipped)


def loss_bound(y_hat, ref, lb, mc_samples=1, sigma_rec=1.0, rng=None, clip_value=None, reduction="mean"):
    return bound_terms(y_hat, ref, lb, mc_samples, sigma_rec, rng, clip_value, reduction).loss


def regularizer_tv(y_hat, eps=1e-6):
    """Anisotropic TV: mean |d_h y| + mean |d_w y| with a smoothed absolute value."""
    if y_hat.ndim < 2:
        raise DimensionError(f"regularizer_tv needs spatial rank >= 2, got rank {y_hat.ndim}", axis=0)
    lead = (slice(None),) * (y_hat.ndim - 2)
    dh = y_hat[lead + (slice(1, None), slice(None))] - y_hat[lead + (slice(None, -1), slice(None))]
    dw = y_hat[lead + (slice(None), slice(1, None))] - y_hat[lead + (slice(None), slice(None, -1))]
    return tmean(smooth_abs(dh, eps)) + tmean(smooth_abs(dw, eps))


def loss_f16(y_hat, y_star, state, w, rng=None):
    """Total f16 objective plus a float breakdown for logging."""
    rng = rng or state.rng_for(state.step)
    rec = loss_rec(y_hat, y_star, w, state.perceptual)
    total = rec
    breakdown = {"loss_rec": rec.item(), "loss_bound": 0.0, "loss_reg": 0.0, "F_ref": None, "F_lb": None, "clipped": 0}
    if w.lambda_b > 0:
        terms = bound_terms(y_hat, state.ref, state.lb, w.mc_samples, w.sigma_rec, rng.fork("bound"),
                            w.bound_clip, w.reduction)
        total = total + terms.loss * w.lambda_b
        breakdown.update(loss_bound=terms.loss.item(), F_ref=float(terms.f_ref.mean()),
                         F_lb=float(terms.f_lb.mean()), clipped=terms.clipped)
    if w.lambda_reg > 0:
        reg = regularizer_tv(y_hat)
        total = total + reg * w.lambda_reg
        breakdown["loss_reg"] = reg.item()
    breakdown["loss_total"] = total.item()
    return total, breakdown


def vae_objective(model, y, w, beta, rng):
    """Batch-mean of recon_nll + beta * KL (per-element when reduction is 'mean')."""
    fe = free_energy(model, y, w.mc_samples, w.sigma_rec, rng=rng)
    scale = _per_sample_scale(y, w.reduction)
    per_sample = (fe.recon_nll + fe.kl * beta) * scale
    return tmean(per_sample), fe, scale


# --- Stage Steps ---

def _grad_norm(named_params):
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
    return math.sqrt(total)


def stage_a_step(state, batch, w, lr, rng=None):
    """
    One generator update: frozen f8 encoder -> f16 decoder -> L_f16 -> AdamW on theta only.

    A non-finite loss or gradient skips the update and is logged with its breakdown.
    """
    lr_frames, hr_frames = batch
    if len(lr_frames) == 0:
        raise ContractError("stage_a_step needs a non-empty batch")
    rng = rng or state.rng_for(state.step)
    step = state.step
    state.f16.zero_grad()
    y_hat = super_resolve(state.f16, lr_frames, state.scale)
    y_star = _as_tensor(hr_frames, y_hat)
    if y_hat.shape != y_star.shape:
        raise DimensionError(f"stage A: reconstruction {y_hat.shape} vs target {y_star.shape}", axis=2)

    total, parts = loss_f16(y_hat, y_star, state, w, rng)
    state.clip_events += parts["clipped"]
    record = StepRecord(step, STAGE_A, parts["loss_total"], parts["loss_rec"], parts["loss_bound"],
                        parts["loss_reg"], parts["F_ref"], parts["F_lb"], lr=lr)
    state.step += 1
    if not math.isfinite(parts["loss_total"]):
        logging.error(f"Step {step}: non-finite stage A loss, update skipped. Breakdown: {parts}")
        record.skipped = True
        return record

    backward(total)
    record.grad_norm = _grad_norm(state.opt_theta.named_params)
    if not math.isfinite(record.grad_norm):
        logging.error(f"Step {step}: non-finite stage A gradient, update skipped. Breakdown: {parts}")
        state.f16.zero_grad()
        record.skipped = True
        return record
    state.opt_theta.step(lr)
    state.f16.zero_grad()
    return record


def stage_b_step(state, y_hat_batch, w, lr, rng=None):
    """One lower-bound VAE update on detached reconstructions; only phi changes."""
    rng = rng or state.rng_for(state.step)
    step = state.step
    y = Tensor(np.asarray(y_hat_batch.data if isinstance(y_hat_batch, Tensor) else y_hat_batch))
    with requires_grad([state.lb], True):
        state.lb.zero_grad()
        loss, fe, scale = vae_objective(state.lb, y, w, w.beta, rng.fork("stage-b"))
        record = StepRecord(step, STAGE_B, loss.item(), F_lb=float(np.mean(fe.total.data) * scale), lr=lr)
        state.step += 1
        if not math.isfinite(record.loss_total):
            logging.error(f"Step {step}: non-finite stage B loss ({record.loss_total}), update skipped")
            record.skipped = True
            return record
        backward(loss)
        named = [(name, p) for name, p in state.lb.named_parameters()]
        record.grad_norm = _grad_norm(named)
        if math.isfinite(record.grad_norm):
            state.opt_phi.step(lr)
        else:
            logging.error(f"Step {step}: non-finite stage B gradient, update skipped")
            record.skipped = True
        state.lb.zero_grad()
    return record


def generate_reconstructions(state, lr_frames):
    """Current theta outputs, detached from its graph."""
    with no_grad():
        return super_resolve(state.f16, lr_frames, state.scale).data.copy()


def pretrain_step(model, optimizer, hr_frames, w, lr, rng, step):
    """Ordinary f8 VAE update (beta = 1) used to obtain the reference VAE."""
    model.zero_grad()
    loss, fe, scale = vae_objective(model, _as_tensor(hr_frames, model.encoder.conv_in.weight), w, 1.0, rng)
    record = StepRecord(step, STAGE_PRETRAIN, loss.item(), F_ref=float(np.mean(fe.total.data) * scale), lr=lr)
    if not math.isfinite(record.loss_total):
        logging.error(f"Pretrain step {step}: non-finite loss, update skipped")
        record.skipped = True
        return record
    backward(loss)
    record.grad_norm = _grad_norm(optimizer.named_params)
    if math.isfinite(record.grad_norm):
        optimizer.step(lr)
    else:
        record.skipped = True
    model.zero_grad()
    return record
