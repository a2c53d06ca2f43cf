# src/core/tensorcore.py

"""
Dense numpy-backed tensors with reverse-mode differentiation and multiply-accumulate
(MAC) instrumentation.

Every differentiable op builds its output through `_result`, which links the output to
its parents for `backward` and, when a `record()` block is active, appends an op
record (kind, input ids, output id, MACs, output bytes) to the recording `Graph`.
"""

import functools
import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import ConfigError, ContractError, DimensionError
from core.rng import CounterRng

INTERP_MODES = ("nearest", "bilinear", "bicubic")
BICUBIC_A = -0.5

# --- Global State ---
_default_dtype = np.float32
_grad_enabled = True
_active_graphs = []
_ids = itertools.count()


def set_default_dtype(dtype):
    """Selects float32 (training) or float64 (verification) for new tensors."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"Unsupported precision {dtype}; use float32 or float64.")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class no_grad:
    """Context manager that disables graph construction for backward."""

    def __enter__(self):
        global _grad_enabled
        self.prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *args):
        global _grad_enabled
        _grad_enabled = self.prev


class default_dtype:
    """Context manager that temporarily switches the default precision."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self.prev = _default_dtype
        set_default_dtype(self.dtype)

    def __exit__(self, *args):
        set_default_dtype(self.prev)


# --- Graph Recording ---

@dataclass(frozen=True)
class OpRecord:
    kind: str
    inputs: tuple
    output: int
    macs: int
    nbytes: int


class Graph:
    """Ordered op records of one recorded region. Inputs always precede consumers."""

    def __init__(self, nodes=None, leaves=None):
        self.nodes = list(nodes or [])
        # leaf id -> True if trainable, False if frozen
        self.leaves = dict(leaves or {})

    def record(self, kind, parents, out, macs):
        for p in parents:
            if p._backward is None and p.id not in self.leaves:
                self.leaves[p.id] = p.requires_grad
        self.nodes.append(OpRecord(kind, tuple(p.id for p in parents), out.id, int(macs), int(out.data.nbytes)))

    def extend(self, other):
        self.nodes.extend(other.nodes)
        self.leaves.update(other.leaves)
        return self

    def __add__(self, other):
        return Graph(self.nodes, self.leaves).extend(other)

    def __len__(self):
        return len(self.nodes)

    @property
    def peak_bytes(self):
        """Largest single activation produced in the region."""
        return max((node.nbytes for node in self.nodes), default=0)


class record:
    """
    Records every op executed inside the block into a fresh Graph.

        with record() as graph:
            model.decode(z)
        count_macs(graph).total
    """

    def __enter__(self):
        self.graph = Graph()
        _active_graphs.append(self.graph)
        return self.graph

    def __exit__(self, *args):
        _active_graphs.remove(self.graph)


@dataclass
class MacCounter:
    per_kind: Counter = field(default_factory=Counter)

    @property
    def total(self):
        return sum(self.per_kind.values())

    def add(self, graph):
        for node in graph.nodes:
            self.per_kind[node.kind] += node.macs
        return self

    def __add__(self, other):
        return MacCounter(self.per_kind + other.per_kind)


def count_macs(*graphs):
    """Per-kind and total MACs over one or more recorded graphs (counted once per argument)."""
    counter = MacCounter()
    for graph in graphs:
        counter.add(graph)
    return counter


# --- Tensor ---

class Tensor:
    """
    A float32/float64 array with gradient tracking.

    Leaves created with requires_grad=True accumulate into `.grad` on `backward`;
    leaves with requires_grad=False are frozen and never touched.
    """

    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.id = next(_ids)
        self.op = "leaf"
        self._parents = ()
        self._tracked = ()
        self._backward = None

    # --- Properties ---
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # --- Operators ---
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # --- Method forms ---
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self, grad_output=None):
        return backward(self, grad_output)


def tensor(data, requires_grad=False, name=None, dtype=None):
    """Builds a tensor in the default precision (or `dtype`)."""
    return Tensor(np.asarray(data, dtype=dtype or _default_dtype), requires_grad=requires_grad, name=name)


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(data, parents, op, backward_fn, macs=0):
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    out.op = op
    if requires:
        out._parents = tuple(parents)
        # flags as of the forward pass; later toggles do not reopen the path
        out._tracked = tuple(p.requires_grad for p in parents)
        out._backward = backward_fn
    for graph in _active_graphs:
        graph.record(op, parents, out, macs)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# --- Elementwise Ops ---

def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else a), _lift(b, a)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else a), _lift(b, a)
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else a), _lift(b, a)
    data = a.data * b.data
    return _result(data, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   macs=data.size)


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else a), _lift(b, a)
    data = a.data / b.data
    return _result(data, (a, b), "div",
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
                   macs=data.size)


def neg(x):
    return _result(-x.data, (x,), "neg", lambda g: (-g,))


def power(x, exponent):
    if isinstance(exponent, Tensor):
        raise ContractError("power supports scalar exponents only")
    p = float(exponent)
    data = x.data ** p
    return _result(data, (x,), "pow", lambda g: (g * p * x.data ** (p - 1.0),), macs=data.size)


def exp(x):
    data = np.exp(x.data)
    return _result(data, (x,), "exp", lambda g: (g * data,))


def log(x):
    return _result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def sqrt(x):
    data = np.sqrt(x.data)
    return _result(data, (x,), "sqrt", lambda g: (g * 0.5 / data,))


def silu(x):
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig
    return _result(data, (x,), "silu",
                   lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),), macs=data.size)


def smooth_abs(x, eps=1e-6):
    """sqrt(x^2 + eps) - sqrt(eps): differentiable |x| that is exactly 0 at 0."""
    s = np.sqrt(x.data * x.data + eps)
    return _result(s - np.sqrt(eps), (x,), "smooth_abs", lambda g: (g * x.data / s,), macs=x.size)


def clip(x, low, high):
    """Clamp with zero gradient outside [low, high]."""
    mask = (x.data >= low) & (x.data <= high)
    return _result(np.clip(x.data, low, high), (x,), "clip", lambda g: (g * mask,))


# --- Reductions and Shape Ops ---

def tsum(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(data, (x,), "sum", _backward)


def tmean(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64)) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / count)


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def getitem(x, key):
    def _backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(x.data[key], (x,), "slice", _backward)


def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(
            f"matmul: contraction axis mismatch ({a.shape[-1]} vs {b.shape[-2 if b.ndim > 1 else 0]})",
            axis=a.ndim - 1)
    data = a.data @ b.data
    macs = data.size * a.shape[-1]

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), "matmul", _backward, macs=macs)


def repeat_channels(x, times):
    """Duplicates every channel `times` times in place: channel c -> c*times ... c*times+times-1."""
    x4, squeeze = as_batch(x)
    n, c, h, w = x4.shape
    data = np.repeat(x4.data, times, axis=1)
    out = _result(data, (x4,), "repeat",
                  lambda g: (g.reshape(n, c, times, h, w).sum(axis=2),))
    return out.reshape(out.shape[1:]) if squeeze else out


def as_batch(x):
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    raise DimensionError(f"expected a (C,H,W) or (N,C,H,W) tensor, got rank {x.ndim}", axis=0)


# --- Convolution ---

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (N,)C_in,H,W input with C_out,C_in,k,k weights."""
    x4, squeeze = as_batch(x)
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be rank 4, got rank {weight.ndim}", axis=0)
    n, c, h, w = x4.shape
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if c != c_in:
        raise DimensionError(f"conv2d: input channel axis has {c} channels, weight expects {c_in}", axis=1)
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias axis 0 has {bias.shape}, expected ({c_out},)", axis=0)
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} / padding={padding}")
    k, s, p = kh, stride, padding
    h_out = (h + 2 * p - k) // s + 1
    w_out = (w + 2 * p - k) // s + 1
    if h_out < 1:
        raise DimensionError(f"conv2d: height axis {h} too small for kernel {k} with padding {p}", axis=2)
    if w_out < 1:
        raise DimensionError(f"conv2d: width axis {w} too small for kernel {k} with padding {p}", axis=3)

    xp = np.pad(x4.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x4.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :h_out, :w_out]
    data = np.einsum("nchwij,ocij->nohw", windows, weight.data, optimize=True)
    if bias is not None:
        data = data + bias.data[None, :, None, None]
    macs = n * c_out * c_in * k * k * h_out * w_out

    def _backward(g):
        gw = np.einsum("nohw,nchwij->ocij", g, windows, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * h_out:s, j:j + s * w_out:s] += np.einsum(
                    "nohw,oc->nchw", g, weight.data[:, :, i, j], optimize=True)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x4, weight) if bias is None else (x4, weight, bias)
    out = _result(data, parents, "conv2d", _backward, macs=macs)
    return out.reshape(out.shape[1:]) if squeeze else out


# --- Resampling ---

def _shuffle(a, r):
    n, c, h, w = a.shape
    return a.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c // (r * r), h * r, w * r)


def _unshuffle(a, r):
    n, c, hr, wr = a.shape
    return a.reshape(n, c, hr // r, r, wr // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, hr // r, wr // r)


def pixel_shuffle(x, r):
    """(N,)C*r^2,H,W -> (N,)C,r*H,r*W. Channel c*r^2 + dy*r + dx lands at (c, h*r+dy, w*r+dx)."""
    if r < 1:
        raise ConfigError(f"pixel_shuffle: factor must be >= 1, got {r}")
    x4, squeeze = as_batch(x)
    if x4.shape[1] % (r * r):
        raise ConfigError(f"pixel_shuffle: {x4.shape[1]} channels not divisible by r^2={r * r}")
    out = _result(_shuffle(x4.data, r), (x4,), "pixel_shuffle", lambda g: (_unshuffle(g, r),))
    return out.reshape(out.shape[1:]) if squeeze else out


def pixel_unshuffle(x, r):
    if r < 1:
        raise ConfigError(f"pixel_unshuffle: factor must be >= 1, got {r}")
    x4, squeeze = as_batch(x)
    for axis in (2, 3):
        if x4.shape[axis] % r:
            raise DimensionError(f"pixel_unshuffle: axis {axis} of size {x4.shape[axis]} not divisible by {r}", axis=axis)
    out = _result(_unshuffle(x4.data, r), (x4,), "pixel_unshuffle", lambda g: (_shuffle(g, r),))
    return out.reshape(out.shape[1:]) if squeeze else out


def _cubic(d):
    a = BICUBIC_A
    d = abs(d)
    if d <= 1.0:
        return (a + 2.0) * d ** 3 - (a + 3.0) * d ** 2 + 1.0
    if d < 2.0:
        return a * d ** 3 - 5.0 * a * d ** 2 + 8.0 * a * d - 4.0 * a
    return 0.0


@functools.lru_cache(maxsize=64)
def interp_matrix(n, r, mode):
    """(n*r, n) resampling matrix with half-pixel centres and clamped edges."""
    if mode not in INTERP_MODES:
        raise ConfigError(f"Unknown interpolation mode '{mode}'. Choose from {INTERP_MODES}.")
    m = n * r
    mat = np.zeros((m, n))
    for i in range(m):
        src = (i + 0.5) / r - 0.5
        if mode == "nearest":
            mat[i, min(i // r, n - 1)] = 1.0
        elif mode == "bilinear":
            src = min(max(src, 0.0), n - 1.0)
            x0 = int(np.floor(src))
            x1 = min(x0 + 1, n - 1)
            t = src - x0
            mat[i, x0] += 1.0 - t
            mat[i, x1] += t
        else:
            x0 = int(np.floor(src))
            t = src - x0
            for k in range(-1, 3):
                mat[i, min(max(x0 + k, 0), n - 1)] += _cubic(t - k)
    mat.setflags(write=False)
    return mat


def interpolate_upsample(x, r, mode="bilinear"):
    if r < 1:
        raise ConfigError(f"interpolate_upsample: factor must be >= 1, got {r}")
    if mode not in INTERP_MODES:
        raise ConfigError(f"Unknown interpolation mode '{mode}'. Choose from {INTERP_MODES}.")
    x4, squeeze = as_batch(x)
    n, c, h, w = x4.shape
    mh = interp_matrix(h, r, mode).astype(x4.dtype)
    mw = interp_matrix(w, r, mode).astype(x4.dtype)
    data = np.matmul(np.matmul(mh, x4.data), mw.T)
    macs = 0
    if mode != "nearest":
        macs = n * c * (np.count_nonzero(mh) * w + h * r * np.count_nonzero(mw))
    out = _result(data, (x4,), f"upsample_{mode}",
                  lambda g: (np.matmul(np.matmul(mh.T, g), mw),), macs=macs)
    return out.reshape(out.shape[1:]) if squeeze else out


# --- Distributions ---

def gaussian_kl(mean, logvar, axis=None):
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over `axis` (all axes by default)."""
    if mean.shape != logvar.shape:
        raise DimensionError(f"gaussian_kl: mean {mean.shape} and logvar {logvar.shape} differ", axis=0)
    terms = exp(logvar) + mean * mean - 1.0 - logvar
    return tsum(terms, axis) * 0.5


# --- Backward ---

def _topological_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.id not in seen:
                stack.append((parent, False))
    return order


def _propagate(root, seed):
    grads = {root.id: seed}
    order = _topological_order(root)
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or node._backward is None:
            continue
        for parent, tracked, pg in zip(node._parents, node._tracked, node._backward(g)):
            if pg is None or not tracked:
                continue
            grads[parent.id] = grads[parent.id] + pg if parent.id in grads else pg
    return order, grads


def _seed(root, grad_output):
    if grad_output is None:
        if root.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {root.shape}")
        return np.ones_like(root.data)
    grad_output = np.asarray(grad_output, dtype=root.dtype)
    if grad_output.shape != root.shape:
        raise ContractError(f"grad_output shape {grad_output.shape} != output shape {root.shape}")
    return grad_output


def backward(loss, grad_output=None):
    """
    Accumulates gradients into every trainable leaf reachable from `loss`.

    Returns {leaf tensor: accumulated grad}. Frozen leaves (requires_grad=False)
    never appear and never receive `.grad`.
    """
    order, grads = _propagate(loss, _seed(loss, grad_output))
    updated = {}
    for node in order:
        if node._backward is None and node.requires_grad and node.id in grads:
            g = grads[node.id]
            node.grad = g.copy() if node.grad is None else node.grad + g
            updated[node] = node.grad
    return updated


def grad(loss, wrt, grad_output=None):
    """Gradients of `loss` w.r.t. arbitrary tensors (leaves or intermediates), without accumulation."""
    _, grads = _propagate(loss, _seed(loss, grad_output))
    return [grads.get(t.id, np.zeros_like(t.data)) for t in wrt]


# --- Verification Helpers ---

def numerical_gradient(fn, arrays, eps=1e-5):
    """Central differences of a scalar-valued fn(*Tensors) w.r.t. every element of every array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    result = []
    with no_grad():
        for a in arrays:
            g = np.zeros_like(a)
            flat, gflat = a.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                plus = fn(*[Tensor(x) for x in arrays]).item()
                flat[i] = orig - eps
                minus = fn(*[Tensor(x) for x in arrays]).item()
                flat[i] = orig
                gflat[i] = (plus - minus) / (2.0 * eps)
            result.append(g)
    return result


def gradcheck(fn, arrays, eps=1e-5, seed=0):
    """
    Max relative error between analytic and central-difference gradients of fn.

    Non-scalar outputs are reduced with a fixed random projection so that every
    output element contributes. Runs in float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with default_dtype(np.float64):
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        projection = CounterRng(seed, "gradcheck").normal(out_shape)

        def scalar_fn(*ts):
            return tsum(fn(*ts) * Tensor(projection))

        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        analytic = grad(scalar_fn(*leaves), leaves)
        numeric = numerical_gradient(scalar_fn, arrays, eps)
    worst = 0.0
    for an, nu in zip(analytic, numeric):
        scale = max(np.linalg.norm(an), np.linalg.norm(nu), 1e-12)
        worst = max(worst, float(np.linalg.norm(an - nu) / scale))
    return worst
