"""Layer primitives with optional per-layer fake quantization.

A quantized layer owns one weight QuantParams and at most one activation
QuantParams (applied to the layer's input). Quantizers calibrate lazily
from the first values they see, then stay learnable.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .quantizer import QuantParams, fake_quant_forward, init_bounds_from_stats
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _maybe_calibrate(q: QuantParams | None, values: np.ndarray):
    if q is not None and not q.initialized:
        init_bounds_from_stats(values, q)


class Linear:
    """x @ W + b over the last axis; accepts [N,D] or [N,T,D] inputs."""

    def __init__(self, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(he_uniform(rng, (in_dim, out_dim), in_dim),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True, dtype=dtype) if bias else None
        self.weight_quant: QuantParams | None = None
        self.act_quant: QuantParams | None = None

    def forward(self, x: Tensor) -> Tensor:
        if x.values.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: expected last dim {self.in_dim}, got {x.shape}")
        _maybe_calibrate(self.act_quant, x.values)
        if self.act_quant is not None:
            x = fake_quant_forward(x, self.act_quant)
        w = self.weight
        _maybe_calibrate(self.weight_quant, w.values)
        if self.weight_quant is not None:
            w = fake_quant_forward(w, self.weight_quant)
        squeezed = x.values.ndim == 3
        if squeezed:
            n, t, d = x.values.shape
            x = ops.reshape(x, (n * t, d))
        out = ops.matmul(x, w)
        if self.bias is not None:
            out = ops.bias_add(out, self.bias)
        if squeezed:
            out = ops.reshape(out, (n, t, self.out_dim))
        return out

    def parameters(self):
        yield f"{self.name}.weight", self.weight, "weight"
        if self.bias is not None:
            yield f"{self.name}.bias", self.bias, "bias"

    def quantizers(self):
        if self.weight_quant is not None:
            yield f"{self.name}.weight_quant", self.weight_quant
        if self.act_quant is not None:
            yield f"{self.name}.act_quant", self.act_quant


class Conv2d:
    """Bias-free 2-D convolution (a batchnorm always follows in our models)."""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dtype=np.float32):
        self.name = name
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding
        self.weight_quant: QuantParams | None = None
        self.act_quant: QuantParams | None = None

    def forward(self, x: Tensor) -> Tensor:
        _maybe_calibrate(self.act_quant, x.values)
        if self.act_quant is not None:
            x = fake_quant_forward(x, self.act_quant)
        w = self.weight
        _maybe_calibrate(self.weight_quant, w.values)
        if self.weight_quant is not None:
            w = fake_quant_forward(w, self.weight_quant)
        return ops.conv2d(x, w, stride=self.stride, padding=self.padding)

    def parameters(self):
        yield f"{self.name}.weight", self.weight, "weight"

    def quantizers(self):
        if self.weight_quant is not None:
            yield f"{self.name}.weight_quant", self.weight_quant
        if self.act_quant is not None:
            yield f"{self.name}.act_quant", self.act_quant


class BatchNorm2d:
    def __init__(self, name: str, channels: int, dtype=np.float32):
        self.name = name
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.state = ops.BatchNormState(channels, dtype=dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.state, training)

    def parameters(self):
        yield f"{self.name}.gamma", self.gamma, "norm"
        yield f"{self.name}.beta", self.beta, "norm"

    def state_arrays(self):
        yield f"{self.name}.running_mean", self.state.running_mean
        yield f"{self.name}.running_var", self.state.running_var


class LayerNorm:
    def __init__(self, name: str, dim: int, dtype=np.float32):
        self.name = name
        self.gamma = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta)

    def parameters(self):
        yield f"{self.name}.gamma", self.gamma, "norm"
        yield f"{self.name}.beta", self.beta, "norm"
