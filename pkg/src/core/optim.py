# src/core/optim.py

from dataclasses import dataclass, field

import numpy as np

from core.errors import ConfigError


@dataclass
class AdamMoments:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_update(params, grads, moments, lr, betas=(0.9, 0.95), weight_decay=0.0, eps=1e-8):
    """
    One AdamW step with decoupled weight decay and bias-corrected moments.

    params/grads are {name: ndarray}; a missing or None grad counts as zero.
    Returns (new_params, new_moments); the inputs are not modified.
    """
    beta1, beta2 = betas
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigError(f"AdamW betas must lie in [0, 1), got {betas}")
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    t = moments.step + 1
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=p.dtype)
        m = moments.m.get(name, np.zeros_like(p))
        v = moments.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        update = lr * weight_decay * p + lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params[name] = (p - update).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_params, AdamMoments(t, new_m, new_v)


class AdamW:
    """Stateful wrapper over `adamw_update` for a list of named Parameters."""

    def __init__(self, named_params, betas=(0.9, 0.95), weight_decay=0.0, eps=1e-8):
        self.named_params = list(named_params)
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.moments = AdamMoments()

    def step(self, lr):
        params = {name: p.data for name, p in self.named_params}
        grads = {name: p.grad for name, p in self.named_params}
        updated, self.moments = adamw_update(params, grads, self.moments, lr, self.betas, self.weight_decay, self.eps)
        for name, p in self.named_params:
            p.data = updated[name]

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def state_arrays(self, prefix):
        out = {}
        for name in self.moments.m:
            out[f"{prefix}.m.{name}"] = self.moments.m[name]
            out[f"{prefix}.v.{name}"] = self.moments.v[name]
        return out

    def load_state_arrays(self, arrays, prefix, step):
        m, v = {}, {}
        for key, value in arrays.items():
            if key.startswith(f"{prefix}.m."):
                m[key[len(prefix) + 3:]] = value
            elif key.startswith(f"{prefix}.v."):
                v[key[len(prefix) + 3:]] = value
        self.moments = AdamMoments(step, m, v)
