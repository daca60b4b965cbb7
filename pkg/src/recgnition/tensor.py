"""Dense tensors with a recorded operation tape for reverse-mode gradients.

Every op accepts either a single sample or a batch with one extra leading
axis (images are ``[H, W, C]`` or ``[B, H, W, C]``, vectors ``[D]`` or
``[B, D]``). Apart from that leading batch axis and bias addition there is
no broadcasting; mismatched shapes raise :class:`ShapeMismatch`.

Usage::

    x = Tensor(data, requires_grad=True)
    with Tape() as tape:
        loss = sum_all(relu(x))
    tape.backward(loss)
    x.grad
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidRate, NotScalar, ShapeMismatch

__all__ = [
    "Tensor", "Tape", "Rng", "record", "conv2d", "depthwise_conv2d",
    "pointwise_conv", "dense", "relu", "softmax", "maxpool2d", "hadamard",
    "concat", "dropout", "flatten", "sum_all", "scale", "add", "backward",
    "grad_check",
]


class Tensor:
    """Array plus optional gradient. ``data`` is a numpy array (row-major)."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

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

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, which is already a topological
    order, so :meth:`backward` only has to walk them in reverse. The active
    tape is thread-local; independent graphs can be built concurrently.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        backward(self, loss)


def record(out_data, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``out_data`` and register ``grad_fn`` on the active tape.

    ``grad_fn(g)`` receives the upstream gradient and returns one gradient
    (or ``None``) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append((out, tuple(inputs), grad_fn))
    return out


def backward(tape: Tape, loss: Tensor):
    """Propagate d(loss)/d(leaf) to every leaf on ``tape``.

    Leaves receive their gradient in ``.grad``; an existing gradient is added
    to, so fan-out and repeated calls accumulate.
    """
    if loss.size != 1:
        raise NotScalar(f"loss must be a scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves = {}
    for out, inputs, _ in tape.records:
        produced.add(id(out))
    for out, inputs, grad_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = grad_fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeMismatch(f"gradient shape {gi.shape} != tensor shape {t.data.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# Deterministic generator

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class Rng:
    """SplitMix64 in counter form.

    Output ``i`` (1-based, counted from the seed) is ``mix(seed + i * GAMMA)``,
    which lets whole blocks be generated with vectorised uint64 arithmetic.
    The stream depends only on the seed, never on platform or numpy version.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.state = self.seed & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
        self.state = (self.state + n * _GAMMA) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, size=None, low=0.0, high=1.0):
        """Floats in ``[low, high)`` built from the top 53 bits."""
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return u.reshape(shape) if shape else float(u[0])

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def getstate(self):
        return self.state

    def setstate(self, state):
        self.state = int(state) & _MASK64


# --------------------------------------------------------------------------
# helpers

def _batched(x: np.ndarray, core_ndim: int):
    """Return (4D-or-2D view with a batch axis, had_batch)."""
    if x.ndim == core_ndim:
        return x[None], False
    if x.ndim == core_ndim + 1:
        return x, True
    raise ShapeMismatch(f"expected {core_ndim} or {core_ndim + 1} dims, got shape {x.shape}")


def _pad_amounts(size, k, stride, padding):
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        lo = total // 2
        return out, lo, total - lo
    if padding == "valid":
        if size < k:
            raise ShapeMismatch(f"kernel {k} larger than input {size} under valid padding")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _pad_input(x4, k, stride, padding):
    _, h, w, _ = x4.shape
    oh, ph0, ph1 = _pad_amounts(h, k, stride, padding)
    ow, pw0, pw1 = _pad_amounts(w, k, stride, padding)
    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(x4, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    else:
        xp = x4
    return xp, (oh, ow), (ph0, pw0)


def _crop(gp, pads, h, w):
    ph0, pw0 = pads
    return gp[:, ph0:ph0 + h, pw0:pw0 + w, :]


# --------------------------------------------------------------------------
# convolutions

def conv2d(x, w, bias, stride=1, padding="same"):
    """Standard convolution. x: [(B,) H, W, C], w: [K, K, C, F], bias: [F]."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    x4, had_batch = _batched(x.data, 3)
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"conv kernel must be [K, K, C, F], got {w.shape}")
    k, _, c, f = w.shape
    if x4.shape[3] != c:
        raise ShapeMismatch(f"input has {x4.shape[3]} channels, kernel expects {c}")
    if bias.shape != (f,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({f},)")
    b, h, wd, _ = x4.shape
    xp, (oh, ow), pads = _pad_input(x4, k, stride, padding)
    # (B, oh, ow, C, K, K) -> (B, oh, ow, K, K, C)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * oh * ow, k * k * c)
    wmat = w.data.reshape(k * k * c, f)
    out = (cols @ wmat).reshape(b, oh, ow, f) + bias.data
    if not had_batch:
        out = out[0]

    def grad_fn(g):
        g4 = g if had_batch else g[None]
        gmat = g4.reshape(b * oh * ow, f)
        gw = (cols.T @ gmat).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(b, oh, ow, k, k, c)
            gp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += gcols[:, :, :, i, j, :]
            gx = _crop(gp, pads, h, wd)
            gx = gx if had_batch else gx[0]
        return gx, gw, gb

    return record(out, (x, w, bias), grad_fn)


def depthwise_conv2d(x, w, stride=1, padding="same"):
    """One K x K filter per channel. x: [(B,) H, W, C], w: [K, K, C]."""
    x, w = as_tensor(x), as_tensor(w)
    x4, had_batch = _batched(x.data, 3)
    if w.ndim != 3 or w.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"depthwise kernel must be [K, K, C], got {w.shape}")
    k, _, c = w.shape
    if x4.shape[3] != c:
        raise ShapeMismatch(f"input has {x4.shape[3]} channels, kernel expects {c}")
    _, h, wd, _ = x4.shape
    xp, (oh, ow), pads = _pad_input(x4, k, stride, padding)
    wk = w.data
    out = np.zeros((x4.shape[0], oh, ow, c), dtype=np.result_type(xp, wk))
    tmp = np.empty_like(out)
    for i in range(k):
        for j in range(k):
            np.multiply(xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :], wk[i, j], out=tmp)
            out += tmp
    if not had_batch:
        out = out[0]

    def grad_fn(g):
        g4 = g if had_batch else g[None]
        gw = np.zeros_like(wk) if w.requires_grad else None
        gp = np.zeros_like(xp) if x.requires_grad else None
        scratch = np.empty(g4.shape, dtype=np.result_type(g4, xp))
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(i, i + stride * oh, stride), slice(j, j + stride * ow, stride))
                if gw is not None:
                    gw[i, j] = np.einsum("bhwc,bhwc->c", g4, xp[sl])
                if gp is not None:
                    np.multiply(g4, wk[i, j], out=scratch)
                    gp[sl] += scratch
        gx = None
        if gp is not None:
            gx = _crop(gp, pads, h, wd)
            gx = gx if had_batch else gx[0]
        return gx, gw

    return record(out, (x, w), grad_fn)


def pointwise_conv(x, w, bias):
    """1x1 convolution. x: [(B,) H, W, C], w: [C, M], bias: [M]."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    x4, had_batch = _batched(x.data, 3)
    if w.ndim != 2 or w.shape[0] != x4.shape[3]:
        raise ShapeMismatch(f"pointwise kernel {w.shape} incompatible with input {x.shape}")
    c, m = w.shape
    if bias.shape != (m,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({m},)")
    b, h, wd, _ = x4.shape
    flat = x4.reshape(b * h * wd, c)
    out = (flat @ w.data).reshape(b, h, wd, m) + bias.data
    if not had_batch:
        out = out[0]

    def grad_fn(g):
        gmat = g.reshape(b * h * wd, m)
        gw = flat.T @ gmat if w.requires_grad else None
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        gx = (gmat @ w.data.T).reshape(x.shape) if x.requires_grad else None
        return gx, gw, gb

    return record(out, (x, w, bias), grad_fn)


def dense(x, w, bias):
    """x: [(B,) D], w: [D, M], bias: [M] -> [(B,) M]."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    x2, had_batch = _batched(x.data, 1)
    if w.ndim != 2 or w.shape[0] != x2.shape[1]:
        raise ShapeMismatch(f"dense weight {w.shape} incompatible with input {x.shape}")
    if bias.shape != (w.shape[1],):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({w.shape[1]},)")
    out = x2 @ w.data + bias.data
    if not had_batch:
        out = out[0]

    def grad_fn(g):
        g2 = g if had_batch else g[None]
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = g2 @ w.data.T
            gx = gx if had_batch else gx[0]
        return gx, gw, gb

    return record(out, (x, w, bias), grad_fn)


# --------------------------------------------------------------------------
# elementwise and structural

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return record(out, (x,), lambda g: (np.where(mask, g, 0),))


def softmax(x):
    """Softmax over the last axis, with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), grad_fn)


def maxpool2d(x, pool=2):
    """Non-overlapping max pooling; H and W must be multiples of ``pool``."""
    x = as_tensor(x)
    x4, had_batch = _batched(x.data, 3)
    b, h, w, c = x4.shape
    if h % pool or w % pool:
        raise ShapeMismatch(f"spatial size {(h, w)} not divisible by pool {pool}")
    oh, ow = h // pool, w // pool
    blocks = x4.reshape(b, oh, pool, ow, pool, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, oh, ow, c, pool * pool)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if not had_batch:
        out = out[0]

    def grad_fn(g):
        g4 = g if had_batch else g[None]
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g4[..., None], axis=-1)
        gx = gb.reshape(b, oh, ow, c, pool, pool).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)
        return (gx if had_batch else gx[0],)

    return record(out, (x,), grad_fn)


def _lead_broadcast(a, b):
    """Shapes must match, or one side may carry one extra leading batch axis."""
    if a.shape == b.shape:
        return
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return
    raise ShapeMismatch(f"shapes {a.shape} and {b.shape} are not compatible")


def _unbatch(g, shape):
    return g.sum(axis=0) if g.ndim == len(shape) + 1 else g


def hadamard(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _lead_broadcast(a, b)
    out = a.data * b.data

    def grad_fn(g):
        ga = _unbatch(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbatch(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), grad_fn)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _lead_broadcast(a, b)

    def grad_fn(g):
        return _unbatch(g, a.shape), _unbatch(g, b.shape)

    return record(a.data + b.data, (a, b), grad_fn)


def scale(x, factor: float):
    x = as_tensor(x)
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def concat(a, b, axis=-1):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise ShapeMismatch(f"cannot concatenate ranks {a.ndim} and {b.ndim}")
    ax = axis % a.ndim
    sa, sb = list(a.shape), list(b.shape)
    sa.pop(ax)
    sb.pop(ax)
    if sa != sb:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} differ off the concat axis")
    out = np.concatenate([a.data, b.data], axis=ax)
    n = a.shape[ax]

    def grad_fn(g):
        ga, gb = np.split(g, [n], axis=ax)
        return ga, gb

    return record(out, (a, b), grad_fn)


def flatten(x, batched=True):
    """Collapse all axes except the leading batch axis (if ``batched``)."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1) if batched else x.data.reshape(-1)
    return record(out, (x,), lambda g: (g.reshape(shape),))


def sum_all(x):
    x = as_tensor(x)
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def dropout(x, rate: float, rng: Rng | None, training: bool):
    """Inverted dropout: keep with probability 1 - rate, scale by 1/(1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an Rng")
    keep = rng.uniform(x.shape) >= rate
    mask = keep.astype(x.dtype) * np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    return record(x.data * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# finite-difference checker

def grad_check(build_loss: Callable[[], Tensor], params, eps=1e-3, max_per_param=None, rng=None):
    """Max relative error between tape gradients and central differences.

    ``build_loss`` must rebuild the scalar loss from the current contents of
    ``params`` (a sequence or dict of float64 leaf tensors) deterministically.
    The error for each element is ``|a - fd| / max(|a|, |fd|, 1e-8)``.
    ``max_per_param`` optionally checks a random subset of each tensor.
    """
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            gen = rng if rng is not None else Rng(0)
            idx = np.sort(gen.permutation(flat.size)[:max_per_param])
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(build_loss().data)
            flat[i] = orig - eps
            down = float(build_loss().data)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
