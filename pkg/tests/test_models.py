"""Model families: policy application, shape contracts, determinism,
transformer block identities, and full-model gradchecks."""

import numpy as np
import pytest

from qfdlite import QuantPolicy, Tensor, build_model, ops
from qfdlite.gradcheck import check_gradients
from qfdlite.models import ViTBlock
from qfdlite.quantizer import grid_levels

MLP_DIMS = {"in_dim": 8, "hidden": [16, 12], "classes": 3}
RESNET_DIMS = {"in_channels": 3, "widths": [4, 8], "blocks_per_stage": 1, "classes": 3}
VIT_DIMS = {"in_channels": 3, "image_hw": 8, "patch": 4, "embed_dim": 16,
            "depth": 2, "heads": 2, "mlp_ratio": 2, "classes": 3}


def params_of(model):
    return {name: t for name, t, _ in model.parameters()}


# ---------------------------------------------------------------------------
# policy application
# ---------------------------------------------------------------------------

def test_mlp_skip_flags():
    policy = QuantPolicy(2, 2)
    model = build_model("mlp", MLP_DIMS, policy, seed=0)
    weights = model.quantized_weight_sites()
    assert "hidden0.weight_quant" not in weights          # skip_first
    assert "hidden1.weight_quant" in weights
    assert "classifier.weight_quant" not in weights       # skip_last
    noskip = build_model("mlp", MLP_DIMS, QuantPolicy(2, 2, skip_first=False,
                                                      skip_last=False), seed=0)
    assert "hidden0.weight_quant" in noskip.quantized_weight_sites()
    assert "classifier.weight_quant" in noskip.quantized_weight_sites()


def test_resnet_policy_covers_all_block_convs():
    model = build_model("mini_resnet", RESNET_DIMS, QuantPolicy(2, 2), seed=0)
    weights = set(model.quantized_weight_sites())
    # stage0: 1 block (2 convs); stage1: 1 block (2 convs + shortcut)
    expected = {"stage0.block0.conv1.weight_quant", "stage0.block0.conv2.weight_quant",
                "stage1.block0.conv1.weight_quant", "stage1.block0.conv2.weight_quant",
                "stage1.block0.shortcut.weight_quant"}
    assert weights == expected
    assert "stem.weight_quant" not in weights
    # one act site per quantized conv
    assert len(model.quantized_act_sites()) == len(expected)


def test_vit_scope_attention_only():
    model = build_model("mini_vit", dict(VIT_DIMS, depth=1),
                        QuantPolicy(4, 4, vit_scope="attention_only"), seed=0)
    weights = set(model.quantized_weight_sites())
    assert weights == {"block0.wq.weight_quant", "block0.wk.weight_quant",
                       "block0.wv.weight_quant", "block0.wo.weight_quant"}
    # every MLP linear stays FP
    assert model.blocks[0].fc1.weight_quant is None
    assert model.blocks[0].fc2.weight_quant is None


def test_vit_scope_mlp_only():
    model = build_model("mini_vit", dict(VIT_DIMS, depth=1),
                        QuantPolicy(4, 4, vit_scope="mlp_only"), seed=0)
    assert set(model.quantized_weight_sites()) == {
        "block0.fc1.weight_quant", "block0.fc2.weight_quant"}


def test_policy_completeness_no_double_attachment():
    model = build_model("mini_resnet", RESNET_DIMS, QuantPolicy(3, 3), seed=1)
    names = [n for n, _ in model.quantizers()]
    assert len(names) == len(set(names))
    # exactly one weight + one act quantizer per quantized conv
    per_layer = {}
    for n in names:
        layer = n.rsplit(".", 1)[0]
        per_layer.setdefault(layer, []).append(n.rsplit(".", 1)[1])
    for layer, kinds in per_layer.items():
        assert sorted(kinds) == ["act_quant", "weight_quant"], layer


def test_fp_policy_attaches_nothing():
    for arch, dims in (("mlp", MLP_DIMS), ("mini_resnet", RESNET_DIMS),
                       ("mini_vit", VIT_DIMS)):
        model = build_model(arch, dims, QuantPolicy(), seed=0)
        assert model.quantizers() == []


# ---------------------------------------------------------------------------
# forward contracts
# ---------------------------------------------------------------------------

def test_same_seed_bitwise_identical_params():
    a = build_model("mini_vit", VIT_DIMS, QuantPolicy(4, 4), seed=7)
    b = build_model("mini_vit", VIT_DIMS, QuantPolicy(4, 4), seed=7)
    pa, pb = params_of(a), params_of(b)
    assert pa.keys() == pb.keys()
    for name in pa:
        assert np.array_equal(pa[name].values, pb[name].values), name


def test_fp_policy_matches_no_policy_bitwise():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(0, 1, (4, 3, 8, 8)).astype(np.float32))
    with_policy = build_model("mini_resnet", RESNET_DIMS, QuantPolicy(), seed=3)
    without = build_model("mini_resnet", RESNET_DIMS, None, seed=3)
    fa, pa = with_policy.forward_features(x, training=True)
    fb, pb = without.forward_features(x, training=True)
    assert np.array_equal(fa.values, fb.values)
    assert np.array_equal(pa.values, pb.values)


def test_resnet_output_shapes():
    model = build_model("mini_resnet", RESNET_DIMS, None, seed=0)
    x = Tensor(np.zeros((8, 3, 16, 16), dtype=np.float32))
    f, p = model.forward_features(x, training=False)
    assert f.shape == (8, model.feature_dim)
    assert p.shape == (8, 3)


def test_one_bit_weights_forward_uses_binary_grid():
    model = build_model("mini_resnet", RESNET_DIMS, QuantPolicy(1, None), seed=0)
    x = Tensor(np.random.default_rng(1).uniform(0, 1, (2, 3, 8, 8)).astype(np.float32))
    model.forward_features(x, training=True)  # triggers calibration
    for name, q in model.quantizers():
        if q.mode != "weight":
            continue
        layer = name.rsplit(".weight_quant", 1)[0]
        from qfdlite.quantizer import fake_quant_forward
        conv = next(c for c in _all_convs(model) if c.name == layer)
        vals = fake_quant_forward(Tensor(conv.weight.values), q).values
        assert set(np.unique(vals)) <= {-1.0, 1.0}, layer


def _all_convs(model):
    for block in model.blocks:
        yield block.conv1
        yield block.conv2
        if block.shortcut is not None:
            yield block.shortcut
    yield model.stem


def test_quantized_forward_stays_on_grid():
    model = build_model("mlp", MLP_DIMS, QuantPolicy(2, None, skip_first=False), seed=0)
    x = Tensor(np.random.default_rng(2).uniform(0, 1, (4, 8)).astype(np.float32))
    model.forward_features(x, training=True)
    for name, q in model.quantizers():
        assert q.initialized, name
        levels = grid_levels(q)
        assert len(levels) == 4


# ---------------------------------------------------------------------------
# mini-ViT block
# ---------------------------------------------------------------------------

def _fp_block(dim=8, heads=2, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return ViTBlock("blk", dim, heads, 2, None, rng, dtype)


def test_vit_block_residual_identity():
    block = _fp_block()
    block.wo.weight.values[...] = 0.0
    block.fc2.weight.values[...] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 8)))
    out = block.forward(x)
    assert np.allclose(out.values, x.values, atol=1e-12)


def test_vit_block_single_token_attention_is_v_projection():
    block = _fp_block()
    x = Tensor(np.random.default_rng(2).normal(size=(2, 1, 8)))
    ln = block.ln1.forward(x)
    attn_out = block._attention(ln)
    expected = block.wo.forward(block.wv.forward(ln))
    assert np.allclose(attn_out.values, expected.values, atol=1e-10)


def test_vit_block_gradcheck():
    rng = np.random.default_rng(3)
    block = _fp_block(seed=4)
    x = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
    t = ops.constant(rng.normal(size=(2, 3, 8)))

    def loss():
        return ops.mse(block.forward(x), t)

    tensors = [("x", x)] + [(n, p) for n, p, _ in block.parameters()]
    err, _, _ = check_gradients(loss, tensors, max_probes=6, rng=rng)
    assert err <= 1e-3


def test_vit_head_divisibility_error():
    with pytest.raises(ValueError, match="divisible"):
        build_model("mini_vit", dict(VIT_DIMS, embed_dim=10, heads=4), None, seed=0)


# ---------------------------------------------------------------------------
# full-model gradchecks (quantizers disabled)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("arch,dims,xshape", [
    ("mlp", MLP_DIMS, (4, 8)),
    ("mini_resnet", {"in_channels": 2, "widths": [4], "blocks_per_stage": 1,
                     "classes": 3}, (2, 2, 8, 8)),
])
def test_full_model_gradcheck(arch, dims, xshape):
    rng = np.random.default_rng(11)
    model = build_model(arch, dims, None, seed=5, dtype=np.float64)
    x = ops.constant(rng.uniform(0, 1, xshape).astype(np.float64))
    labels = rng.integers(0, 3, xshape[0])

    def loss():
        _, logits = model.forward_features(x, training=True)
        return ops.softmax_cross_entropy(logits, labels)

    tensors = [(n, t) for n, t, _ in model.parameters()]
    err, _, probes = check_gradients(loss, tensors, max_probes=12, rng=rng)
    assert probes >= 50
    assert err <= 1e-3
