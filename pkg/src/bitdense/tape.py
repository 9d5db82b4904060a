"""Reverse-mode automatic differentiation on a flat tape.

Tensors wrap float64 numpy arrays.  While a Tape is active, every
operation whose inputs require gradients appends a node (operation id,
input refs, output ref, backward closure) in construction order, which
is already topological.  ``Tape.backward`` walks the list once in
reverse, accumulating gradients with ``+=`` so fan-out adds naturally;
callers zero parameter gradients between steps.

Sign nodes (``ste_sign`` / ``approx_sign``) are surrogate-gradient
estimators, not derivatives: tapes flag their presence so gradcheck can
refuse graphs that contain them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, ClassVar, Sequence

import numpy as np

from . import bitcore


class Tensor:
    """Dense float64 tensor with an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations; inputs always precede their users."""

    nodes: list[Node] = field(default_factory=list)
    saw_sign_node: bool = False

    _stack: ClassVar[list["Tape"]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @staticmethod
    def current() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def backward(self, loss: Tensor):
        """Populate gradients of everything ``loss`` depends on."""
        if loss.values.size != 1:
            raise ValueError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.values)
        for node in reversed(self.nodes):
            gout = node.output.grad
            if gout is None:
                continue
            grads = node.backward(gout)
            for inp, gin in zip(node.inputs, grads):
                if gin is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gin, dtype=np.float64)
                else:
                    inp.grad += gin


def _record(op: str, out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values + b.values)
    na, nb = a.requires_grad, b.requires_grad
    return _record(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape) if na else None,
                   _unbroadcast(g, b.shape) if nb else None),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values - b.values)
    na, nb = a.requires_grad, b.requires_grad
    return _record(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape) if na else None,
                   _unbroadcast(-g, b.shape) if nb else None),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values * b.values)
    na, nb = a.requires_grad, b.requires_grad
    return _record(
        "mul", out, (a, b),
        lambda g: (
            _unbroadcast(g * b.values, a.shape) if na else None,
            _unbroadcast(g * a.values, b.shape) if nb else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values / b.values)
    na, nb = a.requires_grad, b.requires_grad
    return _record(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape) if na else None,
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape) if nb else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.values)
    return _record("neg", out, (a,), lambda g: (-g,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values.mean(axis=axis, keepdims=keepdims))
    count = a.values.size / out.values.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _record("mean", out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.values))
    return _record("exp", out, (a,), lambda g: (g * out.values,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.values))
    return _record("log", out, (a,), lambda g: (g / a.values,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.values))
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out.values,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.values))
    return _record("abs", out, (a,), lambda g: (g * np.sign(a.values),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.values, 0.0))
    return _record("relu", out, (a,), lambda g: (g * (a.values > 0),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.clip(a.values, lo, hi))
    inside = (a.values >= lo) & (a.values <= hi)
    return _record("clamp", out, (a,), lambda g: (g * inside,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(_sigmoid(a.values))
    return _record(
        "sigmoid", out, (a,), lambda g: (g * out.values * (1.0 - out.values),)
    )


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.values))
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid(a.values),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values @ b.values)
    return _record(
        "matmul", out, (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g),
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values.reshape(shape))
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), backward)


def log_softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - logsum)

    def backward(g):
        soft = np.exp(out.values)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), backward)


def batchnorm2d(x, gamma, beta, eps: float = 1e-5):
    """Fused per-channel batch normalization over (N, H, W) with the
    analytic backward.  Returns (out, batch_mean, batch_var) where the
    statistics are plain arrays for running-stat upkeep."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    count = n * h * w
    if count == 0:
        raise ValueError("batchnorm: empty batch in train mode")
    mu = x.values.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_sigma
    gq = gamma.values.reshape(1, c, 1, 1)
    out = Tensor(gq * xhat + beta.values.reshape(1, c, 1, 1))
    need_x = x.requires_grad

    def backward(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        if not need_x:
            return None, dgamma, dbeta
        dxhat = g * gq
        m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        dx = inv_sigma * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    out = _record("batchnorm2d", out, (x, gamma, beta), backward)
    return out, mu.reshape(-1), var.reshape(-1)


# ---------------------------------------------------------------------------
# sign estimators


def _sign_values(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, -1.0)


def ste_sign(a) -> Tensor:
    """Forward sign (sign(0)=+1); backward clips the upstream gradient to
    the band |x| <= 1 (boundary inclusive)."""
    a = as_tensor(a)
    out = Tensor(_sign_values(a.values))
    mask = np.abs(a.values) <= 1.0
    tape = Tape.current()
    if tape is not None and a.requires_grad:
        tape.saw_sign_node = True
    return _record("ste_sign", out, (a,), lambda g: (g * mask,))


def approx_sign(a) -> Tensor:
    """Forward sign; backward uses the piecewise-polynomial surrogate
    d(x) = 2+2x on [-1,0), 2-2x on [0,1), 0 elsewhere."""
    a = as_tensor(a)
    out = Tensor(_sign_values(a.values))
    x = a.values
    d = np.where(
        (x >= -1.0) & (x < 0.0), 2.0 + 2.0 * x,
        np.where((x >= 0.0) & (x < 1.0), 2.0 - 2.0 * x, 0.0),
    )
    tape = Tape.current()
    if tape is not None and a.requires_grad:
        tape.saw_sign_node = True
    return _record("approx_sign", out, (a,), lambda g: (g * d,))


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"kernel {kernel} (stride {stride}, padding {padding}) does not "
            f"fit input extent {size}"
        )
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
            pad_value: float) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    if padding:
        padded = np.full((n, c, h + 2 * padding, w + 2 * padding), pad_value)
        padded[:, :, padding : padding + h, padding : padding + w] = x
    else:
        padded = x
    sn, sc, sh, sw = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return windows.reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(gcols: np.ndarray, xshape, kh: int, kw: int, stride: int,
            padding: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = xshape
    gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    gwin = gcols.reshape(n, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        return gpad[:, :, padding : padding + h, padding : padding + w]
    return gpad


def _conv_backward(gout, cols, wflat, xshape, wshape, stride, padding, oh, ow,
                   need_x: bool = True, need_w: bool = True):
    n, c, h, w = xshape
    o, _, kh, kw = wshape
    grad_x = grad_w = None
    gflat = None
    if need_w:
        gflat = gout.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        grad_w = (gflat.T @ cols).reshape(wshape)
    if need_x:
        if stride == 1 and kh - 1 - padding >= 0 and kw - 1 - padding >= 0:
            # transposed convolution as correlation with flipped kernels;
            # reuses the gather+GEMM path instead of a strided scatter
            wt = np.ascontiguousarray(
                wflat.reshape(o, c, kh, kw)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            ).reshape(c, o * kh * kw)
            gcols, _, _ = _im2col(gout, kh, kw, 1, kh - 1 - padding, 0.0)
            grad_x = np.ascontiguousarray(
                (gcols @ wt.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            )
        else:
            if gflat is None:
                gflat = gout.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
            gcols = gflat @ wflat
            grad_x = _col2im(gcols, xshape, kh, kw, stride, padding, oh, ow)
    return grad_x, grad_w


def conv2d(x, w, stride: int = 1, padding: int = 0, pad_value: float = 0.0) -> Tensor:
    """Full-precision 2-D convolution (NCHW x OCHW), lowered to im2col."""
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input C={c}, weight C={c2}")
    cols, oh, ow = _im2col(x.values, kh, kw, stride, padding, pad_value)
    wflat = w.values.reshape(o, c * kh * kw)
    out_flat = cols @ wflat.T
    out = Tensor(out_flat.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    need_x, need_w = x.requires_grad, w.requires_grad

    def backward(g):
        return _conv_backward(g, cols, wflat, x.shape, w.shape, stride, padding,
                              oh, ow, need_x, need_w)

    return _record("conv2d", out, (x, w), backward)


def conv2d_pm1(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution of exactly-±1 tensors routed through the bit-packed
    xnor-popcount kernel; padding is -1.  The backward rules are the
    standard convolution ones evaluated on the saved ±1 operands."""
    x, w = as_tensor(x), as_tensor(w)
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input C={c}, weight C={c2}")
    bits = (x.values > 0).astype(np.uint8)
    patch_bits, oh, ow = bitcore.extract_bit_patches(bits, kh, kw, stride, padding)
    a_packed = bitcore._pack_bit_rows(np.ascontiguousarray(patch_bits))
    w_packed = bitcore._pack_bit_rows(
        (w.values.reshape(o, c * kh * kw) > 0).astype(np.uint8)
    )
    flat = bitcore._xnor_popcount_mm(a_packed, w_packed, c * kh * kw)
    out = Tensor(flat.reshape(n, oh, ow, o).transpose(0, 3, 1, 2).astype(np.float64))
    need_x, need_w = x.requires_grad, w.requires_grad

    def backward(g):
        cols = patch_bits.astype(np.float64) * 2.0 - 1.0
        wflat = w.values.reshape(o, c * kh * kw)
        return _conv_backward(g, cols, wflat, x.shape, w.shape, stride, padding,
                              oh, ow, need_x, need_w)

    return _record("conv2d_pm1", out, (x, w), backward)


# ---------------------------------------------------------------------------
# bilinear resize


@lru_cache(maxsize=None)
def _interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """1-D linear interpolation matrix with half-pixel centers."""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for o in range(out_size):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        lo = min(max(i0, 0), in_size - 1)
        hi = min(max(i0 + 1, 0), in_size - 1)
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def upsample_bilinear(x, out_hw: tuple[int, int]) -> Tensor:
    """Separable bilinear resize of an NCHW tensor (exact linear map, so
    the backward pass is just the transposed interpolation)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        out = Tensor(x.values.copy())
        return _record("upsample_id", out, (x,), lambda g: (g,))
    mh = _interp_matrix(h, oh)
    mw = _interp_matrix(w, ow)
    flat = x.values.reshape(n * c, h, w)
    resized = np.matmul(np.matmul(mh, flat), mw.T)
    out = Tensor(resized.reshape(n, c, oh, ow))

    def backward(g):
        gflat = g.reshape(n * c, oh, ow)
        gx = np.matmul(np.matmul(mh.T, gflat), mw)
        return (gx.reshape(n, c, h, w),)

    return _record("upsample_bilinear", out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(f, params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of ``f(*params)`` against central finite
    differences.  Returns the max over parameter elements of
    |analytic - numeric| / max(1, |numeric|).  Graphs containing sign
    nodes are rejected: surrogate gradients are not derivatives."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f(*params)
    if tape.saw_sign_node:
        raise ValueError("gradcheck: graph contains a sign node (STE is not a derivative)")
    if loss.values.size != 1:
        raise ValueError("gradcheck requires a scalar function")
    tape.backward(loss)

    max_err = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.ravel()
        aflat = analytic.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(f(*params).values)
            flat[i] = orig - h
            lm = float(f(*params).values)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
    return max_err
