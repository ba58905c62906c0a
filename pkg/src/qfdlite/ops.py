"""Differentiable primitives recorded on the active Tape.

Every op computes its forward with numpy, wraps the result in a Tensor, and,
when a tape is active and some input is tracked, records a closure holding
exactly the arrays the backward rule needs. Closures return one gradient per
input (None where not needed).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, active_tape


def _finish(out_values, inputs, make_backward) -> Tensor:
    out = Tensor(out_values)
    tape = active_tape()
    if tape is not None:
        needs = tape.register(inputs)
        if needs is not None:
            tape.record(out, inputs, make_backward(needs))
    return out


def constant(values, dtype=None) -> Tensor:
    """Untracked tensor (teacher outputs, targets, fixed coefficients)."""
    return Tensor(values, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b. 2-D matrices [m,k]@[k,n], or batched with equal leading dims."""
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2] or av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)

    def make_backward(needs):
        def bw(g):
            ga = np.matmul(g, bv.swapaxes(-1, -2)) if needs[0] else None
            gb = np.matmul(av.swapaxes(-1, -2), g) if needs[1] else None
            return ga, gb
        return bw

    return _finish(out, (a, b), make_backward)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x [N,C,H,W] with w [F,C,kh,kw].

    Zero padding; output H' = (H + 2p - kh)//stride + 1. Implemented as
    im2col + matmul with an explicit col2im scatter in the backward, so the
    accumulation order is fixed.
    """
    xv, wv = x.values, w.values
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValueError(f"conv2d needs 4-D tensors, got {xv.shape} and {wv.shape}")
    n, c, h, width = xv.shape
    f, cw, kh, kw = wv.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (width + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > width + 2 * padding or h_out < 1 or w_out < 1:
        raise ValueError(
            f"conv2d produces empty output: input {h}x{width}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=xv.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride,
                                  j:j + stride * w_out:stride]
    cols = cols.reshape(n, c * kh * kw, h_out * w_out)
    w_mat = wv.reshape(f, c * kh * kw)
    out = np.matmul(w_mat, cols).reshape(n, f, h_out, w_out)

    def make_backward(needs):
        def bw(g):
            gm = g.reshape(n, f, h_out * w_out)
            gx = gw = None
            if needs[1]:
                gw = np.matmul(gm, cols.swapaxes(1, 2)).sum(axis=0).reshape(wv.shape)
            if needs[0]:
                dcols = np.matmul(w_mat.T, gm).reshape(n, c, kh, kw, h_out, w_out)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * h_out:stride,
                            j:j + stride * w_out:stride] += dcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + width]
                gx = np.ascontiguousarray(gx)
            return gx, gw
        return bw

    return _finish(out, (x, w), make_backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_same_shape(op, a, b):
    if a.values.shape != b.values.shape:
        raise ValueError(f"{op} shape mismatch: {a.values.shape} vs {b.values.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def make_backward(needs):
        def bw(g):
            return (g if needs[0] else None), (g if needs[1] else None)
        return bw

    return _finish(a.values + b.values, (a, b), make_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def make_backward(needs):
        def bw(g):
            return (g if needs[0] else None), (-g if needs[1] else None)
        return bw

    return _finish(a.values - b.values, (a, b), make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    av, bv = a.values, b.values

    def make_backward(needs):
        def bw(g):
            return (g * bv if needs[0] else None), (g * av if needs[1] else None)
        return bw

    return _finish(av * bv, (a, b), make_backward)


def mul_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def make_backward(needs):
        def bw(g):
            return (g * s,)
        return bw

    return _finish(x.values * s, (x,), make_backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); gradient is 0 at exactly x == 0."""
    xv = x.values

    def make_backward(needs):
        def bw(g):
            return (g * (xv > 0),)
        return bw

    return _finish(np.maximum(xv, 0), (x,), make_backward)


# tanh-approximation constants: sqrt(2/pi) and the cubic coefficient
_GELU_C0 = 0.7978845608028654
_GELU_C1 = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation 0.5*x*(1 + tanh(c0*(x + c1*x^3)))."""
    xv = x.values
    inner = _GELU_C0 * (xv + _GELU_C1 * xv ** 3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def make_backward(needs):
        def bw(g):
            dinner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * xv ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t ** 2) * dinner
            return (g * d,)
        return bw

    return _finish(out, (x,), make_backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add b, broadcast over leading axes; b matches the trailing shape of x
    (1-D layer bias, or [T,D] positional table against [N,T,D])."""
    bd = b.values.ndim
    if bd >= x.values.ndim or b.values.shape != x.values.shape[x.values.ndim - bd:]:
        raise ValueError(f"bias_add: bias {b.values.shape} vs input {x.values.shape}")
    axes = tuple(range(x.values.ndim - bd))

    def make_backward(needs):
        def bw(g):
            gx = g if needs[0] else None
            gb = g.sum(axis=axes) if needs[1] else None
            return gx, gb
        return bw

    return _finish(x.values + b.values, (x, b), make_backward)


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.values.shape
    try:
        out = x.values.reshape(shape)
    except ValueError as e:
        raise ValueError(f"reshape {old} -> {shape}: {e}") from None

    def make_backward(needs):
        def bw(g):
            return (g.reshape(old),)
        return bw

    return _finish(np.ascontiguousarray(out), (x,), make_backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def make_backward(needs):
        def bw(g):
            return (np.ascontiguousarray(g.transpose(inverse)),)
        return bw

    return _finish(np.ascontiguousarray(x.values.transpose(axes)), (x,), make_backward)


def mean_over(x: Tensor, axes) -> Tensor:
    """Mean-reduce over `axes` (dropped from the output shape)."""
    axes = tuple(axes)
    in_shape = x.values.shape
    count = 1
    for ax in axes:
        count *= in_shape[ax]
    inv = 1.0 / count

    def make_backward(needs):
        def bw(g):
            gexp = np.expand_dims(g, axes)
            return (np.ascontiguousarray(np.broadcast_to(gexp, in_shape)) * inv,)
        return bw

    return _finish(x.values.mean(axis=axes), (x,), make_backward)


def sum_all(x: Tensor) -> Tensor:
    in_shape = x.values.shape

    def make_backward(needs):
        def bw(g):
            return (np.full(in_shape, g, dtype=g.dtype),)
        return bw

    return _finish(np.asarray(x.values.sum()), (x,), make_backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax_array(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtraction stabilized)."""
    s = softmax_array(x.values)

    def make_backward(needs):
        def bw(g):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
        return bw

    return _finish(s, (x,), make_backward)


def log_softmax_last(x: Tensor) -> Tensor:
    out = log_softmax_array(x.values)
    s = np.exp(out)

    def make_backward(needs):
        def bw(g):
            return (g - s * g.sum(axis=-1, keepdims=True),)
        return bw

    return _finish(out, (x,), make_backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]; scalar output.

    Backward to logits is (softmax - onehot) / N.
    """
    lv = logits.values
    if lv.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [N,C] logits, got {lv.shape}")
    n, c = lv.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0,{c}): {labels.min()}..{labels.max()}")
    log_p = log_softmax_array(lv)
    loss = np.asarray(-log_p[np.arange(n), labels].mean())

    def make_backward(needs):
        def bw(g):
            grad = np.exp(log_p)
            grad[np.arange(n), labels] -= 1.0
            return (grad * (g / n),)
        return bw

    return _finish(loss, (logits,), make_backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements; scalar output."""
    _check_same_shape("mse", a, b)
    diff = a.values - b.values
    count = diff.size
    loss = np.asarray((diff * diff).mean())

    def make_backward(needs):
        def bw(g):
            base = diff * (2.0 * float(g) / count)
            ga = base if needs[0] else None
            gb = -base if needs[1] else None
            return ga, gb
        return bw

    return _finish(loss, (a, b), make_backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics mutated by training-mode batchnorm2d."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel batch normalization for [N,C,H,W].

    Training mode normalizes by biased batch statistics and updates the
    running stats in place with momentum; eval mode uses the running stats.
    """
    xv = x.values
    if xv.ndim != 4:
        raise ValueError(f"batchnorm2d expects [N,C,H,W], got {xv.shape}")
    n, c, h, w = xv.shape
    if n * h * w == 0:
        raise ValueError("batchnorm2d on an empty batch")
    if gamma.values.shape != (c,) or beta.values.shape != (c,):
        raise ValueError(f"batchnorm2d affine params must have shape ({c},)")

    axes = (0, 2, 3)
    if training:
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = (1.0 - m) * state.running_mean + m * mean
        state.running_var[...] = (1.0 - m) * state.running_var + m * var
    else:
        mean = state.running_mean.astype(xv.dtype)
        var = state.running_var.astype(xv.dtype)

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.values[None, :, None, None] * xhat + beta.values[None, :, None, None]

    def make_backward(needs):
        def bw(g):
            gg = (g * xhat).sum(axis=axes) if (needs[1] or (needs[0] and training)) else None
            ggamma = gg if needs[1] else None
            gbeta = g.sum(axis=axes) if needs[2] else None
            gx = None
            if needs[0]:
                scale = (gamma.values * inv_std)[None, :, None, None]
                if training:
                    count = n * h * w
                    gmean = g.mean(axis=axes)[None, :, None, None]
                    gdot = (gg / count)[None, :, None, None]
                    gx = scale * (g - gmean - xhat * gdot)
                else:
                    gx = scale * g
            return gx, ggamma, gbeta
        return bw

    return _finish(out, (x, gamma, beta), make_backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; affine params sized to that axis."""
    xv = x.values
    d = xv.shape[-1]
    if gamma.values.shape != (d,) or beta.values.shape != (d,):
        raise ValueError(f"layernorm affine params must have shape ({d},)")
    mean = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv_std
    out = gamma.values * xhat + beta.values

    def make_backward(needs):
        def bw(g):
            lead = tuple(range(xv.ndim - 1))
            ggamma = (g * xhat).sum(axis=lead) if needs[1] else None
            gbeta = g.sum(axis=lead) if needs[2] else None
            gx = None
            if needs[0]:
                gs = g * gamma.values
                gx = inv_std * (
                    gs
                    - gs.mean(axis=-1, keepdims=True)
                    - xhat * (gs * xhat).mean(axis=-1, keepdims=True)
                )
            return gx, ggamma, gbeta
        return bw

    return _finish(out, (x, gamma, beta), make_backward)
