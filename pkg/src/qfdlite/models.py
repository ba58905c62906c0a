"""Model families (MLP, residual mini-CNN, mini-ViT) wired to a declarative
per-layer quantization policy.

Policy rules: the first layer touching raw input and the final classifier
stay full-precision when skip_first/skip_last are set (the default); every
other conv/linear carries a weight quantizer and an input-activation
quantizer at the configured bit widths. For the mini-ViT, vit_scope narrows
quantization to the attention projections or to the MLP linears.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear
from .quantizer import MODE_ACTIVATION, MODE_WEIGHT, QuantParams
from .tensor import Tensor

ARCHITECTURES = ("mlp", "mini_resnet", "mini_vit")
VIT_SCOPES = ("all", "attention_only", "mlp_only")


@dataclass
class QuantPolicy:
    """Per-layer bit assignment. None means full precision."""

    weight_bits: int | None = None
    act_bits: int | None = None
    skip_first: bool = True
    skip_last: bool = True
    vit_scope: str = "all"

    def __post_init__(self):
        for label, bits in (("weight_bits", self.weight_bits), ("act_bits", self.act_bits)):
            if bits is not None and not 1 <= bits <= 8:
                raise ValueError(f"{label} must be in [1,8] or None (FP), got {bits}")
        if self.vit_scope not in VIT_SCOPES:
            raise ValueError(f"vit_scope must be one of {VIT_SCOPES}, got {self.vit_scope!r}")

    @property
    def is_fp(self) -> bool:
        return self.weight_bits is None and self.act_bits is None

    def to_dict(self) -> dict:
        return {"weight_bits": self.weight_bits, "act_bits": self.act_bits,
                "skip_first": self.skip_first, "skip_last": self.skip_last,
                "vit_scope": self.vit_scope}


def _attach_quantizers(layer, policy: QuantPolicy | None, dtype):
    """Give one layer its weight/activation quantizers per the policy."""
    if policy is None or policy.is_fp:
        return
    if policy.weight_bits is not None:
        layer.weight_quant = QuantParams(policy.weight_bits, MODE_WEIGHT, dtype=dtype)
    if policy.act_bits is not None:
        layer.act_quant = QuantParams(policy.act_bits, MODE_ACTIVATION, dtype=dtype)


def _collect(children, method):
    for child in children:
        if hasattr(child, method):
            yield from getattr(child, method)()


class _ModelBase:
    """Shared parameter/quantizer bookkeeping; subclasses fill self._children."""

    arch = ""

    def __init__(self):
        self._children = []

    def parameters(self):
        params = list(_collect(self._children, "parameters"))
        for name, q in self.quantizers():
            for pname, tensor in q.parameters():
                params.append((f"{name}.{pname}", tensor, "quant"))
        return params

    def quantizers(self):
        return list(_collect(self._children, "quantizers"))

    def state_arrays(self):
        return list(_collect(self._children, "state_arrays"))

    def forward_features(self, x: Tensor, training: bool):
        f = self.features(x, training)
        return f, self.classify(f)

    def quantized_weight_sites(self):
        return [n for n, q in self.quantizers() if q.mode == MODE_WEIGHT]

    def quantized_act_sites(self):
        return [n for n, q in self.quantizers() if q.mode == MODE_ACTIVATION]


class Mlp(_ModelBase):
    """Flatten -> [linear, relu]* -> feature -> linear classifier."""

    arch = "mlp"

    def __init__(self, dims: dict, policy: QuantPolicy | None, rng, dtype=np.float32):
        super().__init__()
        self.dims = dict(dims)
        self.policy = policy
        in_dim = dims["in_dim"]
        hidden = list(dims["hidden"])
        if not hidden:
            raise ValueError("mlp needs at least one hidden layer")
        classes = dims["classes"]
        self.hidden_layers = []
        prev = in_dim
        for i, width in enumerate(hidden):
            layer = Linear(f"hidden{i}", prev, width, rng, dtype=dtype)
            if policy is not None and not (i == 0 and policy.skip_first):
                _attach_quantizers(layer, policy, dtype)
            self.hidden_layers.append(layer)
            prev = width
        self.classifier = Linear("classifier", prev, classes, rng, dtype=dtype)
        if policy is not None and not policy.skip_last:
            _attach_quantizers(self.classifier, policy, dtype)
        self.feature_dim = prev
        self.class_count = classes
        self._children = [*self.hidden_layers, self.classifier]

    def features(self, x: Tensor, training: bool) -> Tensor:
        if x.values.ndim > 2:
            x = ops.reshape(x, (x.values.shape[0], -1))
        h = x
        for layer in self.hidden_layers:
            h = ops.relu(layer.forward(h))
        return h

    def classify(self, f: Tensor) -> Tensor:
        return self.classifier.forward(f)


class BasicBlock:
    """Two 3x3 convs with batchnorm and a (possibly projected) residual."""

    def __init__(self, name: str, in_ch: int, out_ch: int, stride: int,
                 policy, rng, dtype):
        self.name = name
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, rng,
                            stride=stride, padding=1, dtype=dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", out_ch, dtype=dtype)
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, rng, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", out_ch, dtype=dtype)
        self.shortcut = None
        self.shortcut_bn = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(f"{name}.shortcut", in_ch, out_ch, 1, rng,
                                   stride=stride, dtype=dtype)
            self.shortcut_bn = BatchNorm2d(f"{name}.shortcut_bn", out_ch, dtype=dtype)
        for conv in (self.conv1, self.conv2, self.shortcut):
            if conv is not None:
                _attach_quantizers(conv, policy, dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = ops.relu(self.bn1.forward(self.conv1.forward(x), training))
        h = self.bn2.forward(self.conv2.forward(h), training)
        if self.shortcut is not None:
            x = self.shortcut_bn.forward(self.shortcut.forward(x), training)
        return ops.relu(ops.add(h, x))

    def _members(self):
        out = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.shortcut is not None:
            out += [self.shortcut, self.shortcut_bn]
        return out

    def parameters(self):
        yield from _collect(self._members(), "parameters")

    def quantizers(self):
        yield from _collect(self._members(), "quantizers")

    def state_arrays(self):
        yield from _collect(self._members(), "state_arrays")


class MiniResNet(_ModelBase):
    """Stem conv + staged basic blocks + global average pooling.

    Default dims give 3 stages x 2 blocks at widths (16, 32, 64); stages
    after the first downsample by stride 2.
    """

    arch = "mini_resnet"

    def __init__(self, dims: dict, policy: QuantPolicy | None, rng, dtype=np.float32):
        super().__init__()
        self.dims = dict(dims)
        self.policy = policy
        in_ch = dims.get("in_channels", 3)
        widths = list(dims.get("widths", (16, 32, 64)))
        blocks_per_stage = dims.get("blocks_per_stage", 2)
        classes = dims["classes"]

        self.stem = Conv2d("stem", in_ch, widths[0], 3, rng, padding=1, dtype=dtype)
        if policy is not None and not policy.skip_first:
            _attach_quantizers(self.stem, policy, dtype)
        self.stem_bn = BatchNorm2d("stem_bn", widths[0], dtype=dtype)

        self.blocks = []
        prev = widths[0]
        for s, width in enumerate(widths):
            for b in range(blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                self.blocks.append(BasicBlock(f"stage{s}.block{b}", prev, width,
                                              stride, policy, rng, dtype))
                prev = width
        self.classifier = Linear("classifier", prev, classes, rng, dtype=dtype)
        if policy is not None and not policy.skip_last:
            _attach_quantizers(self.classifier, policy, dtype)
        self.feature_dim = prev
        self.class_count = classes
        self._children = [self.stem, self.stem_bn, *self.blocks, self.classifier]

    def features(self, x: Tensor, training: bool) -> Tensor:
        h = ops.relu(self.stem_bn.forward(self.stem.forward(x), training))
        for block in self.blocks:
            h = block.forward(h, training)
        return ops.mean_over(h, (2, 3))  # global average pool -> [N, D]

    def classify(self, f: Tensor) -> Tensor:
        return self.classifier.forward(f)


class ViTBlock:
    """Pre-norm transformer block: x + MHA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, name: str, dim: int, heads: int, mlp_ratio: int,
                 policy, rng, dtype):
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.name = name
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.ln1 = LayerNorm(f"{name}.ln1", dim, dtype=dtype)
        self.wq = Linear(f"{name}.wq", dim, dim, rng, dtype=dtype)
        self.wk = Linear(f"{name}.wk", dim, dim, rng, dtype=dtype)
        self.wv = Linear(f"{name}.wv", dim, dim, rng, dtype=dtype)
        self.wo = Linear(f"{name}.wo", dim, dim, rng, dtype=dtype)
        self.ln2 = LayerNorm(f"{name}.ln2", dim, dtype=dtype)
        self.fc1 = Linear(f"{name}.fc1", dim, mlp_ratio * dim, rng, dtype=dtype)
        self.fc2 = Linear(f"{name}.fc2", mlp_ratio * dim, dim, rng, dtype=dtype)
        if policy is not None and not policy.is_fp:
            scope = policy.vit_scope
            if scope in ("all", "attention_only"):
                for layer in (self.wq, self.wk, self.wv, self.wo):
                    _attach_quantizers(layer, policy, dtype)
            if scope in ("all", "mlp_only"):
                for layer in (self.fc1, self.fc2):
                    _attach_quantizers(layer, policy, dtype)

    def _attention(self, x: Tensor) -> Tensor:
        n, t, d = x.values.shape
        def split(z):  # [N,T,D] -> [N,H,T,dh]
            z = ops.reshape(z, (n, t, self.heads, self.head_dim))
            return ops.transpose(z, (0, 2, 1, 3))
        q = split(self.wq.forward(x))
        k = split(self.wk.forward(x))
        v = split(self.wv.forward(x))
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
        scores = ops.mul_scalar(scores, 1.0 / np.sqrt(self.head_dim))
        attn = ops.softmax_last(scores)           # attention matrix stays FP
        ctx = ops.matmul(attn, v)                 # [N,H,T,dh]
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (n, t, d))
        return self.wo.forward(ctx)

    def _mlp(self, x: Tensor) -> Tensor:
        return self.fc2.forward(ops.gelu(self.fc1.forward(x)))

    def forward(self, x: Tensor) -> Tensor:
        h = ops.add(x, self._attention(self.ln1.forward(x)))
        return ops.add(h, self._mlp(self.ln2.forward(h)))

    def _members(self):
        return [self.ln1, self.wq, self.wk, self.wv, self.wo,
                self.ln2, self.fc1, self.fc2]

    def parameters(self):
        yield from _collect(self._members(), "parameters")

    def quantizers(self):
        yield from _collect(self._members(), "quantizers")


class MiniViT(_ModelBase):
    """Patch-embedding conv, learned positions, pre-norm blocks, mean pooling
    over tokens as the feature (no class token)."""

    arch = "mini_vit"

    def __init__(self, dims: dict, policy: QuantPolicy | None, rng, dtype=np.float32):
        super().__init__()
        self.dims = dict(dims)
        self.policy = policy
        in_ch = dims.get("in_channels", 3)
        image = dims["image_hw"]
        patch = dims.get("patch", 4)
        dim = dims.get("embed_dim", 64)
        depth = dims.get("depth", 2)
        heads = dims.get("heads", 4)
        mlp_ratio = dims.get("mlp_ratio", 4)
        classes = dims["classes"]
        if image % patch != 0:
            raise ValueError(f"image size {image} not divisible by patch {patch}")
        self.patch = patch
        self.tokens = (image // patch) ** 2

        self.patch_embed = Conv2d("patch_embed", in_ch, dim, patch, rng,
                                  stride=patch, dtype=dtype)
        if policy is not None and not policy.skip_first:
            _attach_quantizers(self.patch_embed, policy, dtype)
        self.pos_embed = Tensor(rng.normal(0.0, 0.02, size=(self.tokens, dim)),
                                requires_grad=True, dtype=dtype)
        self.blocks = [ViTBlock(f"block{i}", dim, heads, mlp_ratio, policy, rng, dtype)
                       for i in range(depth)]
        self.final_ln = LayerNorm("final_ln", dim, dtype=dtype)
        self.classifier = Linear("classifier", dim, classes, rng, dtype=dtype)
        if policy is not None and not policy.skip_last:
            _attach_quantizers(self.classifier, policy, dtype)
        self.feature_dim = dim
        self.class_count = classes
        self._children = [self.patch_embed, *self.blocks, self.final_ln, self.classifier]

    def parameters(self):
        params = [("pos_embed", self.pos_embed, "weight")]
        params.extend(super().parameters())
        return params

    def features(self, x: Tensor, training: bool) -> Tensor:
        n = x.values.shape[0]
        h = self.patch_embed.forward(x)                    # [N,D,g,g]
        d = h.values.shape[1]
        h = ops.reshape(h, (n, d, self.tokens))
        h = ops.transpose(h, (0, 2, 1))                    # [N,T,D]
        h = ops.bias_add(h, self.pos_embed)
        for block in self.blocks:
            h = block.forward(h)
        h = self.final_ln.forward(h)
        return ops.mean_over(h, (1,))                      # mean over tokens

    def classify(self, f: Tensor) -> Tensor:
        return self.classifier.forward(f)


_ARCH_CLASSES = {"mlp": Mlp, "mini_resnet": MiniResNet, "mini_vit": MiniViT}


def build_model(arch: str, dims: dict, policy: QuantPolicy | None, seed: int,
                dtype=np.float32):
    """Deterministically initialized model with quantizers attached per policy.

    Quantizer bounds calibrate lazily from the first forward batch.
    """
    if arch not in _ARCH_CLASSES:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    rng = np.random.default_rng(seed)
    return _ARCH_CLASSES[arch](dims, policy, rng, dtype=dtype)
