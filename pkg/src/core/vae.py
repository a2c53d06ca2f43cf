# src/core/vae.py

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

import config
from core.errors import ConfigError, ContractError, DimensionError, InputSizeError
from core.layers import Conv2d, Downsample, Module, Parameter, ResBlock, Upsample
from core.rng import CounterRng
from core.tensorcore import (Tensor, as_batch, clip, exp, gaussian_kl, interpolate_upsample,
                             pixel_shuffle, repeat_channels, silu, tsum)

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0
PARAM_GROUPS = ("encoder", "decoder.trunk", "decoder.head")


def _is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class VaeConfig:
    f_enc: int = 8
    f_dec: int = 8
    base_channels: int = 8
    latent_channels: int = 4
    channel_mult: tuple = (1, 2, 2)
    in_channels: int = 3
    head_variant: str = "pixel_shuffle"
    channel_expand: str = "duplicate"

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        for name in ("f_enc", "f_dec"):
            if not _is_power_of_two(getattr(self, name)):
                raise ConfigError(f"{name}={getattr(self, name)} must be a power of two")
        if self.f_enc != 2 ** len(self.channel_mult):
            raise ConfigError(
                f"f_enc={self.f_enc} needs {int(math.log2(self.f_enc))} encoder blocks, "
                f"channel_mult has {len(self.channel_mult)}")
        if self.f_dec % self.f_enc or self.f_dec // self.f_enc not in (1, 2):
            raise ConfigError(f"f_dec/f_enc must be 1 or 2, got {self.f_dec}/{self.f_enc}")
        if self.head_variant not in config.HEAD_VARIANTS:
            raise ConfigError(f"Unknown head_variant '{self.head_variant}'. Choose from {config.HEAD_VARIANTS}.")
        if self.channel_expand not in config.CHANNEL_EXPAND_MODES:
            raise ConfigError(
                f"Unknown channel_expand '{self.channel_expand}'. Choose from {config.CHANNEL_EXPAND_MODES}.")
        if self.base_channels < 1 or self.latent_channels < 1:
            raise ConfigError("base_channels and latent_channels must be positive")

    @property
    def ratio(self):
        """Indirect upsampling factor r = f_dec / f_enc."""
        return self.f_dec // self.f_enc

    @property
    def channels(self):
        return [self.base_channels * m for m in self.channel_mult]

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LatentDist:
    mean: Tensor
    logvar: Tensor

    @property
    def shape(self):
        return self.mean.shape


@dataclass
class FreeEnergy:
    """Negative ELBO per sample: total == recon_nll + kl."""
    recon_nll: Tensor
    kl: Tensor
    total: Tensor
    mc_samples: int
    mc_std: np.ndarray


# --- Architecture ---

class Encoder(Module):
    def __init__(self, cfg, rng):
        chs = cfg.channels
        self.conv_in = Conv2d(cfg.in_channels, chs[0], 3, rng)
        self.blocks = [ResBlock(chs[i], rng) for i in range(len(chs))]
        self.downs = [Downsample(chs[i], chs[min(i + 1, len(chs) - 1)], rng) for i in range(len(chs))]
        self.conv_out = Conv2d(chs[-1], 2 * cfg.latent_channels, 3, rng)

    def forward(self, y):
        h = self.conv_in(y)
        for block, down in zip(self.blocks, self.downs):
            h = down(block(h))
        return self.conv_out(silu(h))


class OutputHead(Module):
    """
    f8: output conv only. f16 pixel_shuffle: channel expansion (duplicate or learned 1x1)
    to r^2 x channels, pixel_shuffle(r), output conv. f16 interpolation variants replace
    expansion + shuffle by interpolate_upsample(r, mode).
    """

    def __init__(self, cfg, channels, rng):
        self._ratio = cfg.ratio
        self._variant = cfg.head_variant
        self._expand_mode = cfg.channel_expand
        r2 = self._ratio * self._ratio
        self.expand = None
        if self._ratio > 1 and self._variant == "pixel_shuffle" and self._expand_mode == "projection":
            self.expand = Conv2d(channels, channels * r2, 1, rng)
        self.conv_out = Conv2d(channels, cfg.in_channels, 3, rng)

    def upsample(self, h):
        r = self._ratio
        if r == 1:
            return h
        if self._variant == "pixel_shuffle":
            h = self.expand(h) if self.expand is not None else repeat_channels(h, r * r)
            return pixel_shuffle(h, r)
        return interpolate_upsample(h, r, self._variant)

    def forward(self, h):
        return self.conv_out(self.upsample(h))


class Decoder(Module):
    def __init__(self, cfg, rng):
        chs = cfg.channels
        order = list(reversed(range(len(chs))))
        self.conv_in = Conv2d(cfg.latent_channels, chs[-1], 3, rng)
        self.blocks = [ResBlock(chs[i], rng) for i in order]
        self.ups = [Upsample(chs[i], chs[max(i - 1, 0)], rng) for i in order]
        self.head = OutputHead(cfg, chs[0], rng)

    def features(self, z):
        """Trunk output at f_enc resolution, before the head."""
        h = self.conv_in(z)
        for block, up in zip(self.blocks, self.ups):
            h = up(block(h))
        return silu(h)

    def forward(self, z):
        return self.head(self.features(z))


class VaeModel(Module):
    """Encoder/decoder pair with parameter groups 'encoder', 'decoder.trunk', 'decoder.head'."""

    def __init__(self, cfg, seed=0):
        rng = CounterRng(seed, "vae")
        self.config = cfg
        self.encoder = Encoder(cfg, rng.fork("encoder"))
        self.decoder = Decoder(cfg, rng.fork("decoder"))

    def group_of(self, name):
        if name.startswith("encoder."):
            return "encoder"
        if name.startswith("decoder.head."):
            return "decoder.head"
        return "decoder.trunk"

    def group_parameters(self, group):
        if group not in PARAM_GROUPS:
            raise ConfigError(f"Unknown parameter group '{group}'. Choose from {PARAM_GROUPS}.")
        return [p for name, p in self.named_parameters() if self.group_of(name) == group]

    def freeze(self, *groups):
        for group in groups or PARAM_GROUPS:
            for p in self.group_parameters(group):
                p.requires_grad = False
                p.grad = None

    def unfreeze(self, *groups):
        for group in groups or PARAM_GROUPS:
            for p in self.group_parameters(group):
                p.requires_grad = True

    @property
    def frozen_groups(self):
        return [g for g in PARAM_GROUPS if not any(p.requires_grad for p in self.group_parameters(g))]

    def trainable_parameters(self):
        return [(name, p) for name, p in self.named_parameters() if p.requires_grad]

    def group_checksum(self, group):
        if group not in PARAM_GROUPS:
            raise ConfigError(f"Unknown parameter group '{group}'. Choose from {PARAM_GROUPS}.")
        return self.checksum(lambda name: self.group_of(name) == group)

    def clone(self):
        twin = VaeModel(self.config)
        twin.load_state_dict(self.state_dict())
        for (_, src), (_, dst) in zip(self.named_parameters(), twin.named_parameters()):
            dst.requires_grad = src.requires_grad
        return twin

    def encode(self, y):
        cfg = self.config
        y4, squeeze = as_batch(y)
        if y4.shape[1] != cfg.in_channels:
            raise DimensionError(f"encode: channel axis has {y4.shape[1]}, expected {cfg.in_channels}", axis=1)
        h, w = y4.shape[2:]
        f = cfg.f_enc
        if h % f or w % f:
            pad = ((-h) % f, (-w) % f)
            raise InputSizeError(
                f"Input {h}x{w} is not divisible by f_enc={f}; pad by {pad[0]} rows and {pad[1]} "
                f"columns to {h + pad[0]}x{w + pad[1]}.", padding_hint=pad)
        moments = self.encoder(y4)
        lc = cfg.latent_channels
        mean = moments[:, :lc]
        logvar = clip(moments[:, lc:], LOGVAR_MIN, LOGVAR_MAX)
        if squeeze:
            mean, logvar = mean.reshape(mean.shape[1:]), logvar.reshape(logvar.shape[1:])
        return LatentDist(mean, logvar)

    def decode(self, z):
        z4, squeeze = as_batch(z)
        if z4.shape[1] != self.config.latent_channels:
            raise DimensionError(
                f"decode: latent channel axis has {z4.shape[1]}, expected {self.config.latent_channels}", axis=1)
        out = self.decoder(z4)
        return out.reshape(out.shape[1:]) if squeeze else out

    def decode_features(self, z):
        z4, squeeze = as_batch(z)
        out = self.decoder.features(z4)
        return out.reshape(out.shape[1:]) if squeeze else out


class LinearGaussianVae(Module):
    """
    Analytic element-wise VAE with a closed-form marginal.

    q(z|y) = N(a*y + b, exp(s)), p(y|z) = N(c*z, sigma^2), p(z) = N(0, 1), so
    p(y) = N(0, c^2 + sigma^2) per element.
    """

    def __init__(self, a=0.5, b=0.0, s=-1.0, c=1.0):
        self.a = Parameter(a)
        self.b = Parameter(b)
        self.s = Parameter(s)
        self.c = Parameter(c)

    def encode(self, y):
        mean = self.a * y + self.b
        logvar = self.s * Tensor(np.ones(y.shape, dtype=y.dtype))
        return LatentDist(mean, logvar)

    def decode(self, z):
        return self.c * z

    def log_marginal(self, y, sigma_rec):
        y = np.asarray(y, dtype=np.float64)
        var = float(self.c.data) ** 2 + sigma_rec ** 2
        terms = -0.5 * np.log(2.0 * np.pi * var) - y * y / (2.0 * var)
        return terms.reshape(terms.shape[0], -1).sum(axis=1) if y.ndim > 1 else terms.sum()


# --- Operations ---

def build_vae(cfg, seed=0):
    return VaeModel(cfg, seed)


def encode(model, y):
    return model.encode(y)


def decode(model, z):
    return model.decode(z)


def reparameterize(dist, noise):
    noise = noise if isinstance(noise, Tensor) else Tensor(np.asarray(noise, dtype=dist.mean.dtype))
    if noise.shape != dist.mean.shape:
        raise DimensionError(f"reparameterize: noise {noise.shape} does not match mean {dist.mean.shape}", axis=0)
    return dist.mean + exp(dist.logvar * 0.5) * noise


def init_f16_from_f8(f8_model, seed, head_variant=None, channel_expand=None, zero_head=False):
    """
    Builds the asymmetric f8-encoder / f16-decoder model from a trained f8 VAE.

    Encoder and decoder trunk are copied verbatim; the head (expansion projection if any
    and the output conv) is freshly drawn from a fan-in scaled uniform with `seed`.
    The encoder is frozen, the whole decoder trainable.
    """
    src = f8_model.config
    if src.f_dec != src.f_enc:
        raise ConfigError(f"init_f16_from_f8 needs a symmetric source model, got f_dec={src.f_dec}")
    cfg = replace(src, f_dec=src.f_enc * 2,
                  head_variant=head_variant or src.head_variant,
                  channel_expand=channel_expand or src.channel_expand)
    model = VaeModel(cfg, seed)
    trunk = {k: v for k, v in f8_model.state_dict().items() if model.group_of(k) != "decoder.head"}
    model.load_state_dict(trunk, strict=False)

    head_rng = CounterRng(seed, "f16-head")
    for layer in (model.decoder.head.expand, model.decoder.head.conv_out):
        if layer is None:
            continue
        if zero_head:
            layer.zero_()
        else:
            layer.reset(head_rng)
    model.freeze("encoder")
    model.unfreeze("decoder.trunk", "decoder.head")
    logging.info(f"Initialised f{cfg.f_dec} decoder ({cfg.head_variant}/{cfg.channel_expand}) from f{src.f_dec} model")
    return model


def free_energy(model, y, mc_samples=1, sigma_rec=1.0, rng=None, noise=None):
    """
    F(y) = E_q[-log p(y|z)] + KL(q(z|y) || N(0, I)) per sample, with a fixed-sigma
    Gaussian observation model and `mc_samples` reparameterised draws.

    `noise` (list of arrays, one per draw) overrides `rng`, so two models can share draws;
    one of the two is required.
    """
    if mc_samples < 1:
        raise ContractError(f"mc_samples must be >= 1, got {mc_samples}")
    if sigma_rec <= 0:
        raise ContractError(f"sigma_rec must be > 0, got {sigma_rec}")
    y = y if isinstance(y, Tensor) else Tensor(y)
    dist = model.encode(y)
    if noise is None:
        if rng is None:
            raise ContractError("free_energy needs an rng or explicit noise draws")
        noise = [rng.normal(dist.mean.shape, dtype=dist.mean.dtype) for _ in range(mc_samples)]
    elif len(noise) != mc_samples:
        raise ContractError(f"got {len(noise)} noise draws for mc_samples={mc_samples}")

    # (N, D) vectors and (N, C, H, W) images are batches; anything else is one sample.
    batched = y.ndim in (2, 4)
    axes = tuple(range(1, y.ndim)) if batched else None
    per_sample = int(np.prod(y.shape[1:] if batched else y.shape))
    const = 0.5 * per_sample * math.log(2.0 * math.pi * sigma_rec ** 2)
    inv_two_var = 1.0 / (2.0 * sigma_rec ** 2)

    draws = []
    for eps in noise:
        y_rec = model.decode(reparameterize(dist, eps))
        if y_rec.shape != y.shape:
            raise DimensionError(f"free_energy: reconstruction {y_rec.shape} does not match input {y.shape}", axis=0)
        diff = y - y_rec
        draws.append(tsum(diff * diff, axes) * inv_two_var + const)
    recon = draws[0]
    for d in draws[1:]:
        recon = recon + d
    recon = recon * (1.0 / mc_samples)

    kl_axes = tuple(range(1, dist.mean.ndim)) if batched else None
    kl = gaussian_kl(dist.mean, dist.logvar, kl_axes)
    values = np.stack([d.data for d in draws])
    mc_std = values.std(axis=0, ddof=1) if mc_samples > 1 else np.zeros_like(values[0])
    return FreeEnergy(recon, kl, recon + kl, mc_samples, mc_std)
