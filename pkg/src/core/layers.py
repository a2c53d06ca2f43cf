# src/core/layers.py

import hashlib

import numpy as np

from core.errors import ConfigError, DimensionError
from core.tensorcore import Tensor, conv2d, get_default_dtype, interpolate_upsample, silu


class Parameter(Tensor):
    """A trainable leaf. `requires_grad=False` marks it frozen."""

    def __init__(self, data, name=None):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)


class Module:
    """
    Minimal parameter container: attributes that are Parameters, Modules or lists of
    Modules are discovered in assignment order.
    """

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
            if not flag:
                p.grad = None

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise ConfigError(f"State dict mismatch. Missing: {missing}; unexpected: {unexpected}")
        for name, value in state.items():
            if name not in params:
                continue
            param = params[name]
            if tuple(value.shape) != param.shape:
                raise DimensionError(f"Parameter '{name}' has shape {param.shape}, checkpoint has {value.shape}")
            param.data = np.array(value, dtype=param.dtype)

    def cast(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def checksum(self, include=None):
        """SHA-256 over parameter names and raw bytes; equal iff bit-identical.

        `include` filters parameters by name.
        """
        digest = hashlib.sha256()
        for name, p in self.named_parameters():
            if include is not None and not include(name):
                continue
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound, dtype=get_default_dtype())


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=None):
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(fan_in_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(fan_in_uniform(rng, (out_channels,), fan_in))

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def reset(self, rng):
        fan_in = int(np.prod(self.weight.shape[1:]))
        self.weight.data = fan_in_uniform(rng, self.weight.shape, fan_in)
        self.bias.data = fan_in_uniform(rng, self.bias.shape, fan_in)

    def zero_(self):
        self.weight.data = np.zeros_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ResBlock(Module):
    """x + conv(silu(conv(silu(x))))."""

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def forward(self, x):
        return x + self.conv2(silu(self.conv1(silu(x))))


class Downsample(Module):
    def __init__(self, in_channels, out_channels, rng):
        self.conv = Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(Module):
    """Nearest 2x followed by a 3x3 convolution."""

    def __init__(self, in_channels, out_channels, rng):
        self.conv = Conv2d(in_channels, out_channels, 3, rng)

    def forward(self, x):
        return self.conv(interpolate_upsample(x, 2, "nearest"))


class requires_grad:
    """
    Temporarily sets requires_grad on every parameter of the given modules and
    restores the previous flags on exit.

        with requires_grad([ref, lb], False):   # stop-gradient into ref/lb
            loss = ...
    """

    def __init__(self, modules, flag):
        self.params = [p for m in modules for p in m.parameters()]
        self.flag = bool(flag)

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = self.flag
        return self

    def __exit__(self, *args):
        for p, prev in zip(self.params, self.saved):
            p.requires_grad = prev
