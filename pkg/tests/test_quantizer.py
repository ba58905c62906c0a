"""Fake-quantizer pipeline: grid exactness, monotonicity, idempotence,
straight-through gradients, and bound calibration."""

import numpy as np
import pytest

from qfdlite import Tape, Tensor, ops
from qfdlite.quantizer import (FP_BITS, QuantParams, dequantize, fake_quant_backward,
                               fake_quant_forward, grid_levels, init_bounds_from_stats,
                               normalize_clip, round_quantize)

BITS = (1, 2, 3, 4, 8)


def act_params(bits, lower=0.0, upper=1.0, scale=1.0):
    return QuantParams(bits, "activation", lower=lower, upper=upper, scale=scale)


def weight_params(bits, lower=-1.0, upper=1.0):
    return QuantParams(bits, "weight", lower=lower, upper=upper)


# ---------------------------------------------------------------------------
# pipeline steps
# ---------------------------------------------------------------------------

def test_normalize_clip_endpoints_and_interior():
    q = act_params(2, lower=-0.5, upper=1.5)
    out = normalize_clip(Tensor([-0.5, 1.5]), q)
    assert np.array_equal(out.values, [0.0, 1.0])
    q = act_params(2, lower=0.0, upper=1.0)
    assert normalize_clip(Tensor([0.4]), q).values[0] == pytest.approx(0.4)
    assert normalize_clip(Tensor([-0.2]), q).values[0] == 0.0  # clipped


def test_normalize_clip_degenerate_interval():
    q = act_params(2)
    q.upper.values[...] = q.lower.values + 1e-6
    with pytest.raises(ValueError, match="degenerate"):
        normalize_clip(Tensor([0.5]), q)


def test_round_quantize_examples():
    assert round_quantize(Tensor([0.0, 1.0]), 3).values.tolist() == [0.0, 1.0]
    # b=2: round(0.4*3)/3 = round(1.2)/3 = 1/3
    assert round_quantize(Tensor([0.4]), 2).values[0] == pytest.approx(1.0 / 3.0)
    # b=1: round(0.65) = 1
    assert round_quantize(Tensor([0.65]), 1).values[0] == 1.0


def test_round_quantize_ties_away_from_zero():
    # 0.5 * (2^1 - 1) = 0.5 -> rounds to 1, not banker's 0
    assert round_quantize(Tensor([0.5]), 1).values[0] == 1.0
    # b=2: 0.5*3 = 1.5 -> 2 -> 2/3
    assert round_quantize(Tensor([0.5]), 2).values[0] == pytest.approx(2.0 / 3.0)


def test_round_quantize_bits_error():
    with pytest.raises(ValueError, match="bits"):
        round_quantize(Tensor([0.5]), 0)


def test_dequantize_modes():
    assert dequantize(Tensor([0.5]), weight_params(2)).values[0] == 0.0
    assert dequantize(Tensor([2.0 / 3.0]), weight_params(2)).values[0] == pytest.approx(1.0 / 3.0)
    assert dequantize(Tensor([1.0 / 3.0]), act_params(2, scale=2.0)).values[0] == pytest.approx(2.0 / 3.0)


def test_fake_quant_chained_examples():
    # weight b=1, [-1,1], v=0.3: vhat=0.65 -> vtilde=1 -> +1
    out = fake_quant_forward(Tensor([0.3]), weight_params(1))
    assert out.values[0] == 1.0
    # activation b=2, [0,1], scale 1, v=0.4 -> 1/3
    out = fake_quant_forward(Tensor([0.4]), act_params(2))
    assert out.values[0] == pytest.approx(1.0 / 3.0)
    # any v <= lower in activation mode -> 0
    out = fake_quant_forward(Tensor([-5.0, 0.0]), act_params(4))
    assert np.array_equal(out.values, [0.0, 0.0])


def test_fp_sentinel_passthrough():
    q = QuantParams(FP_BITS, "feature")
    v = Tensor(np.linspace(-3, 3, 7, dtype=np.float32))
    assert fake_quant_forward(v, q) is v


# ---------------------------------------------------------------------------
# grid properties
# ---------------------------------------------------------------------------

def sweep():
    return np.arange(-2.0, 2.0 + 1e-9, 1e-3, dtype=np.float32)


@pytest.mark.parametrize("bits", BITS)
@pytest.mark.parametrize("mode", ["weight", "activation"])
def test_grid_membership_and_level_count(bits, mode):
    rng = np.random.default_rng(bits * 7 + (mode == "weight"))
    lo = float(rng.uniform(-1.5, 0.0))
    hi = float(rng.uniform(lo + 0.3, 1.8))
    if mode == "weight":
        q = weight_params(bits, lower=lo, upper=hi)
    else:
        q = act_params(bits, lower=lo, upper=hi, scale=float(rng.uniform(0.2, 2.5)))
    out = fake_quant_forward(Tensor(sweep()), q).values
    levels = grid_levels(q)
    dist = np.abs(out[:, None] - levels[None, :]).min(axis=1)
    assert dist.max() <= 1e-9
    assert len(np.unique(out)) <= 2 ** bits


def test_one_bit_weight_image():
    q = weight_params(1, lower=-0.7, upper=0.9)
    out = fake_quant_forward(Tensor(sweep()), q).values
    assert set(np.unique(out)) <= {-1.0, 1.0}


@pytest.mark.parametrize("bits", BITS)
def test_monotonicity(bits):
    q = act_params(bits, lower=-0.4, upper=1.1, scale=1.7)
    out = fake_quant_forward(Tensor(np.sort(sweep())), q).values
    assert np.all(np.diff(out) >= 0.0)
    qw = weight_params(bits, lower=-1.2, upper=0.8)
    outw = fake_quant_forward(Tensor(np.sort(sweep())), qw).values
    assert np.all(np.diff(outw) >= 0.0)


@pytest.mark.parametrize("bits", BITS)
def test_idempotence_unit_activation(bits):
    q = act_params(bits)
    first = fake_quant_forward(Tensor(sweep()), q)
    second = fake_quant_forward(first, q)
    assert np.array_equal(first.values, second.values)


# ---------------------------------------------------------------------------
# straight-through backward
# ---------------------------------------------------------------------------

def test_ste_backward_worked_example():
    # activation, l=0, u=1, scale=1, v=0.4, upstream=1
    q = act_params(2)
    gv, gl, gu, ga = fake_quant_backward(Tensor([1.0]), Tensor([0.4]), q)
    assert gv.values[0] == pytest.approx(1.0)
    assert gl.item() == pytest.approx(-0.6)
    assert gu.item() == pytest.approx(-0.4)
    assert ga.item() == pytest.approx(1.0 / 3.0)  # vtilde at v=0.4, b=2


def test_ste_backward_saturated_zeroes_v_l_u():
    q = act_params(2)
    gv, gl, gu, ga = fake_quant_backward(Tensor([1.0]), Tensor([1.5]), q)
    assert gv.values[0] == 0.0 and gl.item() == 0.0 and gu.item() == 0.0
    assert ga.item() == 1.0  # vtilde saturates to 1; scale still learns


def test_ste_backward_weight_mode_no_scale():
    q = weight_params(2)
    gv, gl, gu, ga = fake_quant_backward(Tensor([1.0]), Tensor([0.2]), q)
    assert ga is None
    assert gv.values[0] == pytest.approx(2.0 / 2.0)  # s/(u-l) = 2/2


def test_ste_matches_analytic_formulas_exact():
    rng = np.random.default_rng(9)
    for _ in range(200):
        lo = rng.uniform(-1.0, 0.0)
        hi = rng.uniform(lo + 0.3, 2.0)
        sc = rng.uniform(0.2, 3.0)
        v = rng.uniform(lo + 1e-3, hi - 1e-3)
        up = rng.uniform(-2, 2)
        q = QuantParams(4, "activation", lower=lo, upper=hi, scale=sc,
                        dtype=np.float64)
        gv, gl, gu, _ = fake_quant_backward(
            Tensor(np.float64(up)), Tensor(np.float64(v)), q)
        span = hi - lo
        assert gv.item() == pytest.approx(up * sc / span, rel=1e-9, abs=1e-12)
        assert gl.item() == pytest.approx(up * sc * (v - hi) / span ** 2, rel=1e-9, abs=1e-12)
        assert gu.item() == pytest.approx(up * sc * (lo - v) / span ** 2, rel=1e-9, abs=1e-12)


def test_ste_matches_surrogate_finite_differences():
    # surrogate: round replaced by identity -> out = s*clip((v-l)/(u-l),0,1)
    # (+ scale*... in activation mode); in-range points only, float64
    rng = np.random.default_rng(10)
    eps = 1e-4
    for mode in ("weight", "activation"):
        lo, hi, sc = -0.6, 1.2, 1.4
        q = QuantParams(3, mode, lower=lo, upper=hi,
                        scale=None if mode == "weight" else sc, dtype=np.float64)
        v = rng.uniform(lo + 10 * eps, hi - 10 * eps, 1000)

        def surrogate(vv, lo=lo, hi=hi):
            vhat = np.clip((vv - lo) / (hi - lo), 0.0, 1.0)
            return 2.0 * (vhat - 0.5) if mode == "weight" else sc * vhat

        gv, gl, gu, _ = fake_quant_backward(
            Tensor(np.ones(1000, dtype=np.float64)), Tensor(v), q)
        fd_v = (surrogate(v + eps) - surrogate(v - eps)) / (2 * eps)
        assert np.abs(gv.values - fd_v).max() < 1e-6
        fd_l = ((surrogate(v, lo=lo + eps).sum() - surrogate(v, lo=lo - eps).sum())
                / (2 * eps))
        fd_u = ((surrogate(v, hi=hi + eps).sum() - surrogate(v, hi=hi - eps).sum())
                / (2 * eps))
        assert abs(gl.item() - fd_l) / max(abs(fd_l), 1.0) < 1e-6
        assert abs(gu.item() - fd_u) / max(abs(fd_u), 1.0) < 1e-6


def test_tape_integration_matches_standalone_backward():
    rng = np.random.default_rng(11)
    vals = rng.uniform(-1.5, 1.5, 64).astype(np.float32)
    q = act_params(3, lower=-0.3, upper=1.2, scale=0.9)
    v = Tensor(vals, requires_grad=True)
    with Tape() as tape:
        out = fake_quant_forward(v, q)
        loss = ops.sum_all(out)
    tape.backward(loss)
    gv, gl, gu, ga = fake_quant_backward(Tensor(np.ones(64, dtype=np.float32)),
                                         Tensor(vals), q)
    assert np.array_equal(v.grad, gv.values)
    assert np.array_equal(q.lower.grad, gl.values)
    assert np.array_equal(q.upper.grad, gu.values)
    assert np.array_equal(q.scale.grad, ga.values)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def test_init_bounds_weight_symmetric():
    q = weight_params(4)
    init_bounds_from_stats(np.array([-0.5, 0.2]), q)
    assert q.lower.item() == -0.5 and q.upper.item() == 0.5 and q.initialized


def test_init_bounds_activation_percentile():
    rng = np.random.default_rng(12)
    samples = rng.uniform(0.0, 2.0, 10_000)
    q = act_params(4)
    init_bounds_from_stats(samples, q)
    assert q.lower.item() == 0.0
    assert abs(q.upper.item() - np.percentile(samples, 99.9)) < 1e-6
    assert abs(q.upper.item() - 2.0) < 0.01
    assert q.scale.item() == q.upper.item()


def test_init_bounds_zero_fallbacks():
    q = weight_params(4)
    init_bounds_from_stats(np.zeros(16), q)
    assert (q.lower.item(), q.upper.item()) == (-1.0, 1.0)
    qa = act_params(4)
    init_bounds_from_stats(np.zeros(16), qa)
    assert (qa.lower.item(), qa.upper.item(), qa.scale.item()) == (0.0, 1.0, 1.0)


def test_init_bounds_empty_sample():
    with pytest.raises(ValueError, match="empty"):
        init_bounds_from_stats(np.array([]), act_params(4))


def test_projection_floors():
    q = act_params(4)
    q.upper.values[...] = q.lower.values + 1e-9
    q.scale.values[...] = -0.5
    q.project()
    assert q.upper.item() - q.lower.item() >= 1e-4
    assert q.scale.item() >= 1e-6


def test_invalid_construction():
    with pytest.raises(ValueError, match="mode"):
        QuantParams(4, "bogus")
    with pytest.raises(ValueError, match="bits"):
        QuantParams(9, "weight")
    with pytest.raises(ValueError, match="positive"):
        QuantParams(4, "activation", lower=0.0, upper=1.0, scale=0.0)
