"""Uniform fake-quantizer with learnable interval bounds and activation scale.

The forward is a three-step pipeline, elementwise over the input tensor:

  1. normalize:   vhat = clip((v - lower) / (upper - lower), 0, 1)
  2. quantize:    vtilde = round((2^b - 1) * vhat) / (2^b - 1)
  3. de-quantize: weight mode      -> 2 * (vtilde - 0.5)
                  activation mode  -> scale * vtilde   (scale > 0, learnable)

Rounding is half-away-from-zero (the argument is nonnegative, so this is
floor(x + 0.5)), a deterministic tie rule. The backward treats the round as
identity (straight-through) but keeps the exact piecewise derivative of the
clip: inputs outside (lower, upper) contribute zero gradient to v, lower and
upper. The scale gradient uses the actually-rounded vtilde and flows for all
inputs, saturated included.

Weight mode has no scale: its outputs live on a fixed grid roughly symmetric
about zero (exactly {-1,+1} at 1 bit). bits=32 is the full-precision
sentinel: the quantizer passes values through untouched.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, active_tape

MODE_WEIGHT = "weight"
MODE_ACTIVATION = "activation"
MODE_FEATURE = "feature"
MODES = (MODE_WEIGHT, MODE_ACTIVATION, MODE_FEATURE)

FP_BITS = 32             # pass-through sentinel
MIN_INTERVAL = 1e-4      # projected floor for upper - lower
MIN_SCALE = 1e-6


class QuantParams:
    """Learnable state of one quantizer: interval bounds and, for
    activation/feature mode, the output scale. Scalars, one set per tensor."""

    def __init__(self, bits: int, mode: str, lower: float | None = None,
                 upper: float | None = None, scale: float | None = None,
                 dtype=np.float32):
        if mode not in MODES:
            raise ValueError(f"unknown quantizer mode {mode!r}")
        if bits != FP_BITS and not 1 <= bits <= 8:
            raise ValueError(f"bits must be in [1,8] or {FP_BITS} (FP), got {bits}")
        self.bits = int(bits)
        self.mode = mode
        if lower is None and upper is None:
            lower, upper = (-1.0, 1.0) if mode == MODE_WEIGHT else (0.0, 1.0)
        if upper - lower < MIN_INTERVAL:
            raise ValueError(f"degenerate interval [{lower}, {upper}]")
        self.lower = Tensor(np.asarray(lower), requires_grad=True, dtype=dtype)
        self.upper = Tensor(np.asarray(upper), requires_grad=True, dtype=dtype)
        if mode == MODE_WEIGHT:
            self.scale = None
        else:
            if scale is None:
                scale = 1.0
            if scale <= 0:
                raise ValueError(f"scale must be positive, got {scale}")
            self.scale = Tensor(np.asarray(scale), requires_grad=True, dtype=dtype)
        self.initialized = False

    @property
    def is_fp(self) -> bool:
        return self.bits == FP_BITS

    def parameters(self):
        out = [("lower", self.lower), ("upper", self.upper)]
        if self.scale is not None:
            out.append(("scale", self.scale))
        return out

    def project(self):
        """Re-establish upper-lower >= 1e-4 and scale >= 1e-6 after a step."""
        lo = float(self.lower.values)
        if float(self.upper.values) - lo < MIN_INTERVAL:
            dt = self.upper.values.dtype
            target = np.asarray(lo, dtype=dt) + np.asarray(MIN_INTERVAL, dtype=dt)
            # storage rounding can drop the sum half an ulp below the floor
            while float(target) - lo < MIN_INTERVAL:
                target = np.nextafter(target, np.asarray(np.inf, dtype=dt))
            self.upper.values[...] = target
        if self.scale is not None and float(self.scale.values) < MIN_SCALE:
            dt = self.scale.values.dtype
            floor = np.asarray(MIN_SCALE, dtype=dt)
            while float(floor) < MIN_SCALE:
                floor = np.nextafter(floor, np.asarray(np.inf, dtype=dt))
            self.scale.values[...] = floor

    def __repr__(self):
        s = "" if self.scale is None else f", scale={float(self.scale.values):.4g}"
        return (f"QuantParams({self.bits}b {self.mode}, "
                f"[{float(self.lower.values):.4g}, {float(self.upper.values):.4g}]{s})")


def _levels_count(bits: int) -> float:
    return float(2 ** bits - 1)


def grid_levels(q: QuantParams) -> np.ndarray:
    """The 2^b representable outputs implied by (bits, mode, scale).

    Computed with the same float expressions as the forward, so forward
    outputs match some level exactly.
    """
    if q.is_fp:
        raise ValueError("full-precision sentinel has no finite level set")
    dtype = q.lower.values.dtype
    base = np.arange(2 ** q.bits, dtype=dtype) / np.asarray(_levels_count(q.bits), dtype=dtype)
    if q.mode == MODE_WEIGHT:
        return (2.0 * (base - 0.5)).astype(dtype)
    return (q.scale.values * base).astype(dtype)


# ---------------------------------------------------------------------------
# pipeline steps (component views; the composed op lives in fake_quant_forward)
# ---------------------------------------------------------------------------

def normalize_clip(v: Tensor, q: QuantParams) -> Tensor:
    """clip((v - lower) / (upper - lower), 0, 1)."""
    lo, hi = q.lower.values, q.upper.values
    if float(hi - lo) < MIN_INTERVAL:
        raise ValueError(f"degenerate quantization interval [{float(lo)}, {float(hi)}]")
    return Tensor(np.clip((v.values - lo) / (hi - lo), 0.0, 1.0))


def round_quantize(vhat: Tensor, bits: int) -> Tensor:
    """Snap [0,1] values onto the 2^b-level grid, ties rounding up."""
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    n = _levels_count(bits)
    return Tensor(np.floor(vhat.values * n + 0.5) / n)


def dequantize(vtilde: Tensor, q: QuantParams) -> Tensor:
    if q.mode == MODE_WEIGHT:
        return Tensor(2.0 * (vtilde.values - 0.5))
    return Tensor(q.scale.values * vtilde.values)


def _forward_arrays(v, lo, hi, scale, bits, mode):
    n = _levels_count(bits)
    vhat = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    vtilde = np.floor(vhat * n + 0.5) / n
    if mode == MODE_WEIGHT:
        out = 2.0 * (vtilde - 0.5)
    else:
        out = scale * vtilde
    return vtilde, out


def fake_quant_forward(v: Tensor, q: QuantParams) -> Tensor:
    """Composed normalize -> round -> de-quantize, recorded on the active tape
    with the straight-through backward. FP sentinel returns v unchanged."""
    if q.is_fp:
        return v
    lo, hi = q.lower.values, q.upper.values
    if float(hi - lo) < MIN_INTERVAL:
        raise ValueError(f"degenerate quantization interval [{float(lo)}, {float(hi)}]")
    vv = v.values
    weight_mode = q.mode == MODE_WEIGHT
    sc = None if weight_mode else q.scale.values
    vtilde, out_values = _forward_arrays(vv, lo, hi, sc, q.bits, q.mode)
    out = Tensor(out_values)

    tape = active_tape()
    if tape is None:
        return out
    inputs = (v, q.lower, q.upper) if weight_mode else (v, q.lower, q.upper, q.scale)
    needs = tape.register(inputs)
    if needs is None:
        return out

    in_range = (vv > lo) & (vv < hi)
    span = hi - lo
    s = 2.0 if weight_mode else sc

    def bw(g):
        g_in = g * in_range
        gv = g_in * (s / span) if needs[0] else None
        gl = np.asarray((g_in * (vv - hi)).sum() * (s / span ** 2)) if needs[1] else None
        gu = np.asarray((g_in * (lo - vv)).sum() * (s / span ** 2)) if needs[2] else None
        if weight_mode:
            return gv, gl, gu
        ga = np.asarray((g * vtilde).sum()) if needs[3] else None
        return gv, gl, gu, ga

    tape.record(out, inputs, bw)
    return out


def fake_quant_backward(upstream: Tensor, v: Tensor, q: QuantParams):
    """Standalone straight-through gradient rule.

    Returns (grad_v, grad_lower, grad_upper, grad_scale); grad_scale is None
    in weight mode. Bound/scale gradients are summed to scalars, matching how
    the tape accumulates into the scalar parameters.
    """
    if q.is_fp:
        return Tensor(upstream.values.copy()), None, None, None
    g = upstream.values
    vv = v.values
    lo, hi = q.lower.values, q.upper.values
    span = hi - lo
    weight_mode = q.mode == MODE_WEIGHT
    s = 2.0 if weight_mode else q.scale.values
    in_range = (vv > lo) & (vv < hi)
    g_in = g * in_range
    grad_v = Tensor(g_in * (s / span))
    grad_l = Tensor(np.asarray((g_in * (vv - hi)).sum() * (s / span ** 2)))
    grad_u = Tensor(np.asarray((g_in * (lo - vv)).sum() * (s / span ** 2)))
    if weight_mode:
        return grad_v, grad_l, grad_u, None
    vtilde, _ = _forward_arrays(vv, lo, hi, q.scale.values, q.bits, q.mode)
    grad_a = Tensor(np.asarray((g * vtilde).sum()))
    return grad_v, grad_l, grad_u, grad_a


def init_bounds_from_stats(samples, q: QuantParams) -> QuantParams:
    """Calibrate bounds (and scale) from observed values, in place.

    Weight mode uses the symmetric max-abs range; activation/feature mode
    uses [0, 99.9th percentile] with scale started at the upper bound.
    All-zero samples fall back to the unit interval.
    """
    arr = samples.values if isinstance(samples, Tensor) else np.asarray(samples)
    if arr.size == 0:
        raise ValueError("cannot calibrate from an empty sample")
    if q.is_fp:
        q.initialized = True
        return q
    if q.mode == MODE_WEIGHT:
        m = float(np.abs(arr).max())
        if m == 0.0:
            m = 1.0
        q.lower.values[...] = -m
        q.upper.values[...] = m
    else:
        hi = float(np.percentile(arr, 99.9))
        if hi < MIN_INTERVAL:
            hi = 1.0
        q.lower.values[...] = 0.0
        q.upper.values[...] = hi
        q.scale.values[...] = hi
    q.initialized = True
    return q
