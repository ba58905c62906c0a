"""Training regimes: baseline QAT, full-precision feature KD, logit KD, and
quantized-feature distillation (QFD), plus the teacher feature-quantization
warmup.

The distillation target is always the pooled pre-classifier feature. For QFD
the teacher's feature passes through a feature-mode fake quantizer that was
fine-tuned jointly with the teacher during a short warmup; feature KD is the
same loss with the raw teacher feature (the 32-bit sentinel); logit KD uses
temperature-softened KL on class logits. Teachers are frozen during student
training: their forwards run off-tape, so no gradient ever reaches them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import ConfigError
from .quantizer import FP_BITS, MODE_FEATURE, QuantParams, fake_quant_forward
from .tensor import Tensor

REGIMES = ("baseline", "feature", "logit", "qfd")
TEACHER_FEATURE_BITS = (1, 2, 4, 8, FP_BITS)


@dataclass
class DistillConfig:
    regime: str = "baseline"
    distill_weight: float = 0.5        # config key: distill.lambda
    teacher_feature_bits: int = 1
    kd_temperature: float = 4.0
    teacher_checkpoint: str | None = None

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"distill.regime must be one of {REGIMES}, got {self.regime!r}")
        if not 0.0 <= self.distill_weight <= 1.0:
            raise ConfigError(f"distill.lambda must be in [0,1], got {self.distill_weight}")
        if self.teacher_feature_bits not in TEACHER_FEATURE_BITS:
            raise ConfigError(
                f"distill.teacher_feature_bits must be one of {TEACHER_FEATURE_BITS}, "
                f"got {self.teacher_feature_bits}")
        if self.kd_temperature <= 0:
            raise ConfigError(
                f"distill.kd_temperature must be positive, got {self.kd_temperature}")
        return self

    def effective_teacher_bits(self) -> int:
        # feature/logit regimes use the raw FP teacher by definition
        return self.teacher_feature_bits if self.regime == "qfd" else FP_BITS


class TeacherBundle:
    """Frozen teacher plus its feature quantizer.

    Construction freezes every parameter; forwards run without a tape, so
    the teacher is isolated from student backprop by construction.
    """

    def __init__(self, model, feature_quant: QuantParams):
        if feature_quant.mode != MODE_FEATURE:
            raise ValueError(f"teacher feature quantizer must be feature-mode, "
                             f"got {feature_quant.mode!r}")
        self.model = model
        self.feature_quant = feature_quant
        self.freeze()

    def freeze(self):
        for _, tensor, _ in self.model.parameters():
            tensor.requires_grad = False
            tensor.grad = None
        for _, t in self.feature_quant.parameters():
            t.requires_grad = False
            t.grad = None

    def forward(self, x_values: np.ndarray):
        """(quantized feature, logits from the quantized feature), off-tape."""
        x = ops.constant(x_values)
        f = self.model.features(x, training=False)
        fq = quantize_teacher_feature(f, self.feature_quant)
        return fq, self.model.classify(fq)

    def raw_feature_and_logits(self, x_values: np.ndarray):
        """FP feature path (feature/logit KD regimes), off-tape."""
        x = ops.constant(x_values)
        f = self.model.features(x, training=False)
        return f, self.model.classify(f)


def quantize_teacher_feature(f_t: Tensor, q: QuantParams) -> Tensor:
    """Fake-quantize the teacher feature onto the feature grid (32-bit
    sentinel passes through, degenerating QFD to plain feature KD)."""
    if q.mode != MODE_FEATURE:
        raise ValueError(f"expected feature-mode quantizer, got {q.mode!r}")
    return fake_quant_forward(f_t, q)


class DistillLoss(NamedTuple):
    total: Tensor
    distill_component: float
    ce_component: float


def _check_feature_shapes(f_s: Tensor, f_t: Tensor):
    if f_s.shape != f_t.shape:
        raise ValueError(f"student feature {f_s.shape} vs teacher feature {f_t.shape}")


def _weighted(distill_term: Tensor, ce: Tensor, lam: float) -> DistillLoss:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0,1], got {lam}")
    if lam == 0.0:
        # exact baseline degeneration: the distillation term is skipped
        return DistillLoss(ce, 0.0, ce.item())
    if lam == 1.0:
        return DistillLoss(distill_term, distill_term.item(), 0.0)
    total = ops.add(ops.mul_scalar(distill_term, lam), ops.mul_scalar(ce, 1.0 - lam))
    return DistillLoss(total, lam * distill_term.item(), (1.0 - lam) * ce.item())


def qfd_loss(f_s: Tensor, f_t_bar: Tensor, p_s: Tensor, labels, lam: float) -> DistillLoss:
    """lam * MSE(student feature, quantized teacher feature)
    + (1-lam) * CE(labels, student logits)."""
    _check_feature_shapes(f_s, f_t_bar)
    ce = ops.softmax_cross_entropy(p_s, labels)
    if lam == 0.0:
        return _weighted(ce, ce, 0.0)
    return _weighted(ops.mse(f_s, f_t_bar), ce, lam)


def feature_kd_loss(f_s: Tensor, f_t: Tensor, p_s: Tensor, labels, lam: float) -> DistillLoss:
    """qfd_loss against the raw full-precision teacher feature."""
    return qfd_loss(f_s, f_t, p_s, labels, lam)


def logit_kd_loss(p_s: Tensor, p_t: Tensor, labels, lam: float,
                  temperature: float) -> DistillLoss:
    """lam * T^2 * KL(softened teacher || softened student) + (1-lam) * CE."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if p_s.shape != p_t.shape:
        raise ValueError(f"student logits {p_s.shape} vs teacher logits {p_t.shape}")
    ce = ops.softmax_cross_entropy(p_s, labels)
    if lam == 0.0:
        return _weighted(ce, ce, 0.0)
    n = p_s.shape[0]
    t_soft = p_t.values / temperature
    log_probs_t = ops.log_softmax_array(t_soft)
    probs_t = np.exp(log_probs_t)
    log_probs_s = ops.log_softmax_last(ops.mul_scalar(p_s, 1.0 / temperature))
    per_entry = ops.mul(ops.constant(probs_t),
                        ops.sub(ops.constant(log_probs_t), log_probs_s))
    kl = ops.mul_scalar(ops.sum_all(per_entry), 1.0 / n)
    return _weighted(ops.mul_scalar(kl, temperature ** 2), ce, lam)


def regime_loss(cfg: DistillConfig, f_s: Tensor, p_s: Tensor, labels,
                teacher_out) -> DistillLoss:
    """Dispatch for train_one. teacher_out is (feature, logits) or None."""
    if cfg.regime == "baseline" or cfg.distill_weight == 0.0:
        ce = ops.softmax_cross_entropy(p_s, labels)
        return DistillLoss(ce, 0.0, ce.item())
    f_t, p_t = teacher_out
    if cfg.regime == "logit":
        return logit_kd_loss(p_s, p_t, labels, cfg.distill_weight, cfg.kd_temperature)
    return qfd_loss(f_s, f_t, p_s, labels, cfg.distill_weight)


class FeatureQuantizedModel:
    """Teacher view used during warmup: logits come from the quantized
    feature, and the feature quantizer trains along with the weights."""

    def __init__(self, model, feature_quant: QuantParams):
        self.model = model
        self.feature_quant = feature_quant

    @property
    def class_count(self):
        return self.model.class_count

    def features(self, x: Tensor, training: bool) -> Tensor:
        f = self.model.features(x, training)
        return quantize_teacher_feature(f, self.feature_quant)

    def classify(self, f: Tensor) -> Tensor:
        return self.model.classify(f)

    def forward_features(self, x: Tensor, training: bool):
        f = self.features(x, training)
        return f, self.classify(f)

    def parameters(self):
        params = list(self.model.parameters())
        for pname, tensor in self.feature_quant.parameters():
            params.append((f"feature_quant.{pname}", tensor, "quant"))
        return params

    def quantizers(self):
        return list(self.model.quantizers()) + [("feature_quant", self.feature_quant)]


def teacher_warmup(teacher, train_ds, eval_ds, bits: int, epochs: int,
                   lr: float = 0.01, momentum: float = 0.9, batch_size: int = 64,
                   seed: int = 0, accuracy_floor: float = 0.0, log=None):
    """Attach a feature quantizer to a pretrained teacher and fine-tune the
    whole teacher through it with the task loss.

    Returns (TeacherBundle, accuracy_before, accuracy_after). bits=32 skips
    training entirely (pass-through quantizer). A teacher below
    accuracy_floor raises a warning line via `log` but proceeds.
    """
    from .train import TrainConfig, evaluate, train_one  # runtime import: train imports us

    before = evaluate(teacher, eval_ds)
    if before < accuracy_floor and log is not None:
        log(f"warning: teacher accuracy {before:.2f} below floor {accuracy_floor:.2f}; "
            f"warmup will proceed but the bundle may be a poor teacher")

    q = QuantParams(bits, MODE_FEATURE)
    if bits == FP_BITS:
        return TeacherBundle(teacher, q), before, before

    wrapped = FeatureQuantizedModel(teacher, q)
    cfg = TrainConfig(epochs=max(1, epochs), batch_size=batch_size, lr=lr,
                      momentum=momentum, weight_decay=0.0, schedule="cosine",
                      seed=seed)
    train_one(DistillConfig(regime="baseline"), wrapped, None, train_ds, eval_ds,
              cfg, log=log)
    after = evaluate(wrapped, eval_ds)
    return TeacherBundle(teacher, q), before, after


def warmup_epochs(total_epochs: int, warmup_fraction: float = 0.1) -> int:
    """Teacher warmup length: a small fraction of the training budget."""
    return max(1, math.ceil(total_epochs * warmup_fraction))
