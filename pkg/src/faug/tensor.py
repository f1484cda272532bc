"""Dense float32 tensors with a reverse-mode tape.

The engine is deliberately small: a :class:`Tensor` wraps an immutable
row-major ``float32`` array, and every differentiable operation goes through
:func:`apply_primitive`, which records a node on the active :class:`Tape`
whenever one of its inputs is tracked. :func:`backward` walks the tape once,
in reverse, and returns a gradient for every registered leaf.

Tapes are single-owner. ``with Tape():`` scopes a fresh one; outside any
scope a per-context default tape is used and replaced once consumed.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    NonFiniteInput,
    NonFiniteResult,
    NotScalarLoss,
    ShapeMismatch,
    TapeConsumed,
    UnknownPrimitive,
    InvalidNoiseParams,
)

F32 = np.float32


@dataclass
class _Node:
    kind: str
    inputs: tuple
    attrs: dict
    arrays: tuple
    out: np.ndarray
    saved: object
    key: int


@dataclass
class Tape:
    """Append-only record of primitive applications."""

    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)
    consumed: bool = False
    _next_key: int = 0
    _token: object = None

    def _new_key(self) -> int:
        self._next_key += 1
        return self._next_key

    def register_leaf(self, t: "Tensor") -> None:
        if self.consumed:
            raise TapeConsumed("cannot register a leaf on a consumed tape")
        t.tape = self
        t.key = self._new_key()
        self.leaves.append(t)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None


_ACTIVE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "faug_active_tape", default=None
)


_DTYPE: contextvars.ContextVar = contextvars.ContextVar("faug_dtype", default=F32)


class precision:
    """Temporarily build tensors in another float dtype.

    Only the finite-difference oracle uses this (float64) to keep rounding
    noise far below the tolerances it checks.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        self._token = _DTYPE.set(self.dtype)
        return self

    def __exit__(self, *exc):
        _DTYPE.reset(self._token)


def current_tape() -> Tape:
    tape = _ACTIVE.get()
    if tape is None or tape.consumed:
        tape = Tape()
        _ACTIVE.set(tape)
    return tape


class Tensor:
    """Immutable float32 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "tape", "key")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=_DTYPE.get())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.key: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"


def new_tensor(shape, data, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from a shape and flat (or nested) data."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeMismatch(f"extents must be positive, got {list(shape)}")
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatch(
            f"shape {list(shape)} needs {int(np.prod(shape))} values, got {flat.size}"
        )
    if not np.all(np.isfinite(flat)):
        raise NonFiniteInput("tensor data contains NaN or Inf")
    t = Tensor(flat.reshape(shape), requires_grad=requires_grad)
    if requires_grad:
        current_tape().register_leaf(t)
    return t


def tensor(arr, requires_grad: bool = False) -> Tensor:
    """Leaf tensor from an array-like, keeping its shape."""
    arr = np.asarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return new_tensor(arr.shape, arr, requires_grad=requires_grad)


def constant(arr) -> Tensor:
    """Untracked tensor without the finiteness scan (internal fast path)."""
    return Tensor(arr)


# --------------------------------------------------------------------------
# primitives: forward(arrays, attrs) -> (out, saved)
#             backward(g, arrays, out, saved, attrs) -> tuple of grads


def _add_fwd(xs, attrs):
    a, b = xs
    if a.shape != b.shape and b.shape != a.shape[1:]:
        raise ShapeMismatch(f"add: cannot broadcast {list(b.shape)} onto {list(a.shape)}")
    return a + b, None


def _add_bwd(g, xs, out, saved, attrs):
    a, b = xs
    gb = g if b.shape == a.shape else g.sum(axis=0, dtype=F32)
    return g, gb


def _mul_fwd(xs, attrs):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: shapes differ {list(a.shape)} vs {list(b.shape)}")
    return a * b, None


def _mul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return g * b, g * a


def _scale_fwd(xs, attrs):
    return xs[0] * xs[0].dtype.type(attrs["factor"]), None


def _scale_bwd(g, xs, out, saved, attrs):
    return (g * F32(attrs["factor"]),)


def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {list(a.shape)} x {list(b.shape)}")
    return a @ b, None


def _matmul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return g @ b.T, a.T @ g


def _bmm_fwd(xs, attrs):
    a, b = xs
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatch(f"bmm: {list(a.shape)} x {list(b.shape)}")
    return np.matmul(a, b), None


def _bmm_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return np.matmul(g, b.transpose(0, 2, 1)), np.matmul(a.transpose(0, 2, 1), g)


def _conv_windows(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv2d_fwd(xs, attrs):
    x, w = xs[0], xs[1]
    stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {list(x.shape)}, kernel {list(w.shape)}")
    kh, kw = w.shape[2:]
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _conv_windows(xp, kh, kw, stride)  # N,C,oh,ow,kh,kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,oh,ow,O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if len(xs) == 3:
        b = xs[2]
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"conv2d: bias {list(b.shape)} for {w.shape[0]} filters")
        out = out + b[None, :, None, None]
    return out, None


def _conv2d_bwd(g, xs, out, saved, attrs):
    x, w = xs[0], xs[1]
    stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _conv_windows(xp, kh, kw, stride)
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw
    oh, ow = g.shape[2:]
    gxp = np.zeros(xp.shape, dtype=F32)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # N,oh,ow,C
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else gxp
    grads = [np.ascontiguousarray(gx), gw.astype(F32)]
    if len(xs) == 3:
        grads.append(g.sum(axis=(0, 2, 3), dtype=F32))
    return tuple(grads)


def _maxpool_fwd(xs, attrs):
    (x,) = xs
    k = attrs["k"]
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeMismatch(f"maxpool2d: input {list(x.shape)}, window {k}")
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    blocks = x[:, :, : oh * k, : ow * k].reshape(n, c, oh, k, ow, k)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    # argmax returns the first maximum: lowest flat index within the window
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_bwd(g, xs, out, idx, attrs):
    (x,) = xs
    k = attrs["k"]
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    routed = np.zeros((n, c, oh, ow, k * k), dtype=F32)
    np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
    routed = routed.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
    gx = np.zeros(x.shape, dtype=F32)
    gx[:, :, : oh * k, : ow * k] = routed.reshape(n, c, oh * k, ow * k)
    return (gx,)


def _relu_fwd(xs, attrs):
    return np.maximum(xs[0], 0).astype(xs[0].dtype, copy=False), None


def _relu_bwd(g, xs, out, saved, attrs):
    return (g * (xs[0] > 0),)


def _flatten_fwd(xs, attrs):
    x = xs[0]
    return x.reshape(x.shape[0], -1), None


def _flatten_bwd(g, xs, out, saved, attrs):
    return (g.reshape(xs[0].shape),)


def _reshape_fwd(xs, attrs):
    x = xs[0]
    shape = tuple(attrs["shape"])
    try:
        return x.reshape(shape), None
    except ValueError as e:
        raise ShapeMismatch(f"reshape: {list(x.shape)} -> {list(shape)}") from e


def _reshape_bwd(g, xs, out, saved, attrs):
    return (g.reshape(xs[0].shape),)


def _permute_fwd(xs, attrs):
    axes = tuple(attrs["axes"])
    if sorted(axes) != list(range(xs[0].ndim)):
        raise ShapeMismatch(f"permute: bad axes {axes} for rank {xs[0].ndim}")
    return np.ascontiguousarray(xs[0].transpose(axes)), None


def _permute_bwd(g, xs, out, saved, attrs):
    inv = np.argsort(attrs["axes"])
    return (np.ascontiguousarray(g.transpose(inv)),)


def _mean_fwd(xs, attrs):
    axis = attrs.get("axis")
    x = xs[0]
    if axis is None:
        return np.asarray(x.mean(dtype=x.dtype)).reshape(1), None
    return x.mean(axis=axis, dtype=x.dtype), None


def _mean_bwd(g, xs, out, saved, attrs):
    x = xs[0]
    axis = attrs.get("axis")
    if axis is None:
        return (np.full(x.shape, g.reshape(-1)[0] / F32(x.size), dtype=F32),)
    gx = np.expand_dims(g, axis) / F32(x.shape[axis])
    return (np.ascontiguousarray(np.broadcast_to(gx, x.shape), dtype=F32),)


def _softmax_fwd(xs, attrs):
    x = xs[0]
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, xs, out, saved, attrs):
    s = out
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _ce_fwd(xs, attrs):
    (z,) = xs
    labels = np.asarray(attrs["labels"], dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeMismatch(f"cross_entropy_logits: logits {list(z.shape)}, labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ShapeMismatch("cross_entropy_logits: label out of range")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = z - m - np.log(s)
    nll = -logp[np.arange(z.shape[0]), labels]
    return np.asarray(nll.mean(dtype=z.dtype)).reshape(1), e / s


def _ce_bwd(g, xs, out, probs, attrs):
    labels = np.asarray(attrs["labels"], dtype=np.int64)
    n = probs.shape[0]
    d = probs.copy()
    rows = np.arange(n)
    # p_y - 1 as minus the other classes' mass; p_y itself rounds to 1 when confident
    d[rows, labels] = 0
    d[rows, labels] = -d.sum(axis=1)
    return (d * (g.reshape(-1)[0] / F32(n)),)


def _resize_pad_index(in_side, r, top, left):
    # flat source index per output pixel, -1 where the output is zero padding
    src = (np.arange(r) * in_side) // r
    idx = np.full((in_side, in_side), -1, dtype=np.int64)
    rows = src[:, None] * in_side + src[None, :]
    idx[top : top + r, left : left + r] = rows
    return idx.reshape(-1)


def _resize_pad_fwd(xs, attrs):
    (x,) = xs
    n, c, h, w = x.shape
    if h != w:
        raise ShapeMismatch("resize_pad expects square inputs")
    idx = _resize_pad_index(h, attrs["r"], attrs["top"], attrs["left"])
    flat = x.reshape(n, c, h * w)
    keep = idx >= 0
    out = np.zeros((n, c, h * w), dtype=x.dtype)
    out[:, :, keep] = flat[:, :, idx[keep]]
    return out.reshape(x.shape), idx


def _resize_pad_bwd(g, xs, out, idx, attrs):
    (x,) = xs
    n, c, h, w = x.shape
    keep = idx >= 0
    gflat = g.reshape(n, c, h * w)
    gx = np.zeros((n, c, h * w), dtype=F32)
    # nearest upsampling can map one source to several outputs
    np.add.at(gx, (slice(None), slice(None), idx[keep]), gflat[:, :, keep])
    return (gx.reshape(x.shape),)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "bmm": (_bmm_fwd, _bmm_bwd),
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "maxpool2d": (_maxpool_fwd, _maxpool_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "flatten": (_flatten_fwd, _flatten_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "permute": (_permute_fwd, _permute_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "cross_entropy_logits": (_ce_fwd, _ce_bwd),
    "resize_pad": (_resize_pad_fwd, _resize_pad_bwd),
}


def apply_primitive(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Run one primitive; record it when any input is tracked."""
    try:
        fwd, _ = PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitive(kind) from None
    attrs = dict(attrs or {})
    inputs = tuple(inputs)
    arrays = tuple(t.data for t in inputs)
    with np.errstate(over="ignore", invalid="ignore"):
        out, saved = fwd(arrays, attrs)
    out = np.asarray(out, dtype=_DTYPE.get())
    if not np.isfinite(out).all():
        raise NonFiniteResult(f"{kind} produced NaN or Inf")
    result = Tensor(out)
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if tapes:
        if len(tapes) > 1:
            raise TapeConsumed(f"{kind}: inputs recorded on different tapes")
        (tape,) = tapes.values()
        if tape.consumed:
            raise TapeConsumed(f"{kind}: input tape already consumed")
        result.requires_grad = True
        result.tape = tape
        result.key = tape._new_key()
        tape.nodes.append(_Node(kind, inputs, attrs, arrays, result.data, saved, result.key))
    return result


def backward(loss: Tensor) -> dict:
    """Gradient of a scalar loss w.r.t. every requires_grad leaf on its tape.

    Returns a dict keyed by the leaf tensors themselves. The tape is consumed.
    """
    if loss.data.size != 1:
        raise NotScalarLoss(f"loss has shape {list(loss.shape)}")
    tape = loss.tape
    if tape is None:
        return {}
    if tape.consumed:
        raise TapeConsumed("backward already ran on this tape")
    grads: dict[int, np.ndarray] = {loss.key: np.ones(loss.shape, dtype=F32)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.key, None)
        if g is None:
            continue
        _, bwd = PRIMITIVES[node.kind]
        in_grads = bwd(g, node.arrays, node.out, node.saved, node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if t.tape is None or gi is None:
                continue
            gi = np.asarray(gi, dtype=F32)
            if t.key in grads:
                grads[t.key] = grads[t.key] + gi
            else:
                grads[t.key] = gi
    result = {}
    for leaf in tape.leaves:
        g = grads.get(leaf.key)
        result[leaf] = Tensor(g if g is not None else np.zeros(leaf.shape, dtype=F32))
    tape.consumed = True
    tape.nodes.clear()
    return result


# --------------------------------------------------------------------------
# thin functional wrappers used by the model zoo


def add(a, b):
    return apply_primitive("add", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def scale(a, factor):
    return apply_primitive("scale", (a,), {"factor": float(factor)})


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def bmm(a, b):
    return apply_primitive("bmm", (a, b))


def conv2d(x, w, b=None, stride=1, pad=0):
    ins = (x, w) if b is None else (x, w, b)
    return apply_primitive("conv2d", ins, {"stride": stride, "pad": pad})


def maxpool2d(x, k=2):
    return apply_primitive("maxpool2d", (x,), {"k": k})


def relu(x):
    return apply_primitive("relu", (x,))


def flatten(x):
    return apply_primitive("flatten", (x,))


def reshape(x, shape):
    return apply_primitive("reshape", (x,), {"shape": tuple(shape)})


def permute(x, axes):
    return apply_primitive("permute", (x,), {"axes": tuple(axes)})


def mean(x, axis=None):
    return apply_primitive("mean", (x,), {"axis": axis})


def softmax(x):
    return apply_primitive("softmax", (x,))


def cross_entropy_logits(logits, labels):
    return apply_primitive("cross_entropy_logits", (logits,), {"labels": np.asarray(labels)})


def resize_pad(x, r, top, left):
    return apply_primitive("resize_pad", (x,), {"r": int(r), "top": int(top), "left": int(left)})


def conv2d_array(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Untracked convolution on raw arrays (gradient smoothing, oracles)."""
    out, _ = _conv2d_fwd((np.asarray(x, F32), np.asarray(w, F32)), {"stride": stride, "pad": pad})
    return out


# --------------------------------------------------------------------------
# noise and finite differences


def sample_noise(kind: str, params: dict, shape, rng) -> Tensor:
    """Draw an untracked noise tensor.

    ``normal`` uses ``mu``/``sigma``; ``uniform`` uses ``low``/``high``;
    ``dropout`` returns an inverted-dropout mask with drop probability ``p``.
    """
    shape = tuple(int(s) for s in shape)
    if kind == "normal":
        mu, sigma = float(params.get("mu", 0.0)), float(params.get("sigma", 0.0))
        if not (sigma >= 0 and np.isfinite(mu) and np.isfinite(sigma)):
            raise InvalidNoiseParams(f"normal noise needs sigma >= 0, got {sigma}")
        arr = rng.normal(mu, sigma, shape)
    elif kind == "uniform":
        low, high = float(params.get("low", 0.0)), float(params.get("high", 0.0))
        if not (low <= high and np.isfinite(low) and np.isfinite(high)):
            raise InvalidNoiseParams(f"uniform noise needs low <= high, got [{low}, {high}]")
        arr = rng.uniform(low, high, shape)
    elif kind in ("dropout", "dropout-mask"):
        p = float(params.get("p", 0.0))
        if not 0 <= p < 1:
            raise InvalidNoiseParams(f"dropout needs 0 <= p < 1, got {p}")
        keep = rng.random(shape) >= p
        arr = keep / (1.0 - p)
    else:
        raise InvalidNoiseParams(f"unknown noise kind {kind!r}")
    return Tensor(np.asarray(arr, dtype=F32))


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar-valued ``f`` at ``x``.

    ``f`` is evaluated in float64 so the quotient is limited by truncation,
    not float32 rounding. Unreliable for coordinates within ``h`` of a kink
    (relu at 0, maxpool ties); callers exclude those.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    with precision(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base)).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f(Tensor(base)).data.reshape(-1)[0])
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteResult("finite differences produced NaN or Inf")
    return Tensor(grad.reshape(x.shape))
