"""qfdlite: quantization-aware training with quantized-feature distillation,
on a small deterministic reverse-mode autodiff engine."""

from . import ops
from .data import AugmentPolicy, Dataset, augment, load_cifar_binary, load_idx, synth_blobs
from .distill import (DistillConfig, TeacherBundle, feature_kd_loss, logit_kd_loss,
                      qfd_loss, quantize_teacher_feature, teacher_warmup)
from .models import QuantPolicy, build_model
from .optim import SGD, lr_at
from .quantizer import (QuantParams, dequantize, fake_quant_backward,
                        fake_quant_forward, grid_levels, init_bounds_from_stats,
                        normalize_clip, round_quantize)
from .tensor import Tape, Tensor, backward
from .train import (CompareConfig, MetricsRecord, TrainConfig, evaluate,
                    run_comparison, train_one)

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy", "CompareConfig", "Dataset", "DistillConfig", "MetricsRecord",
    "QuantParams", "QuantPolicy", "SGD", "Tape", "TeacherBundle", "Tensor",
    "TrainConfig", "augment", "backward", "build_model", "dequantize", "evaluate",
    "fake_quant_backward", "fake_quant_forward", "feature_kd_loss", "grid_levels",
    "init_bounds_from_stats", "load_cifar_binary", "load_idx", "logit_kd_loss",
    "lr_at", "normalize_clip", "ops", "qfd_loss", "quantize_teacher_feature",
    "round_quantize", "run_comparison", "synth_blobs", "teacher_warmup",
    "train_one",
]
