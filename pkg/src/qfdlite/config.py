"""TOML experiment configuration: parsing, strict validation, defaults, and
the resolved-config copy written next to every run's outputs.

Sections: [dataset], [model], [train], [distill], [compare] (optional),
[output]. Unknown keys anywhere are errors. Bit widths use the "W/A"
notation ("3/4" = 3-bit weights, 4-bit activations; "fp" or "32/32" = full
precision).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import tomli

from .data import AugmentPolicy
from .distill import DistillConfig
from .errors import ConfigError
from .models import ARCHITECTURES, VIT_SCOPES, QuantPolicy
from .train import CompareConfig, TrainConfig

DATASET_SOURCES = ("synth", "idx", "cifar10")


def parse_wa_bits(text: str) -> tuple[int | None, int | None]:
    """'3/4' -> (3, 4); 'fp', '32', '32/32' -> (None, None); '32/4' mixes."""
    text = str(text).strip().lower()
    if text in ("fp", "32", "32/32"):
        return None, None
    parts = text.split("/")
    if len(parts) != 2:
        raise ConfigError(f"model.bits must look like 'W/A' or 'fp', got {text!r}")
    out = []
    for part, label in zip(parts, ("weight", "activation")):
        try:
            bits = int(part)
        except ValueError:
            raise ConfigError(f"model.bits {label} field {part!r} is not an integer") from None
        if bits == 32:
            out.append(None)
        elif 1 <= bits <= 8:
            out.append(bits)
        else:
            raise ConfigError(f"model.bits {label} field must be 1..8 or 32, got {bits}")
    return tuple(out)


def format_wa_bits(weight_bits, act_bits) -> str:
    def one(b):
        return "32" if b is None else str(b)
    return f"{one(weight_bits)}/{one(act_bits)}"


@dataclass
class DatasetConfig:
    source: str = "synth"
    classes: int = 3
    n_per_class: int = 200
    input_dim: int | None = None
    image_shape: tuple | None = (1, 12, 12)
    noise_sigma: float = 0.25
    seed: int = 0
    train_images: str | None = None     # idx paths
    train_labels: str | None = None
    eval_images: str | None = None
    eval_labels: str | None = None
    train_files: list = field(default_factory=list)   # cifar10 paths
    eval_files: list = field(default_factory=list)
    flip_p: float = 0.0
    pad_crop: bool = False

    def validate(self):
        if self.source not in DATASET_SOURCES:
            raise ConfigError(f"dataset.source must be one of {DATASET_SOURCES}, "
                              f"got {self.source!r}")
        if self.source == "synth":
            if self.classes < 2:
                raise ConfigError(f"dataset.classes must be >= 2, got {self.classes}")
            if self.noise_sigma < 0:
                raise ConfigError(f"dataset.noise_sigma must be >= 0, got {self.noise_sigma}")
            if (self.input_dim is None) == (self.image_shape is None):
                raise ConfigError("dataset needs exactly one of input_dim / image_shape")
        if self.source == "idx":
            for key in ("train_images", "train_labels", "eval_images", "eval_labels"):
                if getattr(self, key) is None:
                    raise ConfigError(f"dataset.{key} is required for source 'idx'")
        if self.source == "cifar10":
            if not self.train_files or not self.eval_files:
                raise ConfigError("dataset.train_files and dataset.eval_files are "
                                  "required for source 'cifar10'")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError(f"dataset.flip_p must be in [0,1], got {self.flip_p}")
        return self

    def augment_policy(self) -> AugmentPolicy | None:
        if self.flip_p == 0.0 and not self.pad_crop:
            return None
        return AugmentPolicy(flip_p=self.flip_p, pad_crop=self.pad_crop)

    def load(self):
        from .data import load_cifar_binary, load_idx, synth_blobs
        if self.source == "synth":
            return synth_blobs(self.n_per_class, self.classes,
                               input_dim=self.input_dim,
                               image_shape=None if self.image_shape is None
                               else tuple(self.image_shape),
                               noise_sigma=self.noise_sigma, seed=self.seed)
        if self.source == "idx":
            train = load_idx(self.train_images, self.train_labels)
            ev = load_idx(self.eval_images, self.eval_labels)
            return train, ev
        train = load_cifar_binary(self.train_files, split="train")
        ev = load_cifar_binary(self.eval_files, split="eval")
        return train, ev


@dataclass
class ModelConfig:
    arch: str = "mlp"
    bits: str = "fp"
    skip_first: bool = True
    skip_last: bool = True
    vit_scope: str = "all"
    hidden: list = field(default_factory=lambda: [64])
    widths: list = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 2
    patch: int = 4
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4

    def validate(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"model.arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        parse_wa_bits(self.bits)
        if self.vit_scope not in VIT_SCOPES:
            raise ConfigError(f"model.vit_scope must be one of {VIT_SCOPES}, "
                              f"got {self.vit_scope!r}")
        return self

    def policy(self) -> QuantPolicy:
        wb, ab = parse_wa_bits(self.bits)
        return QuantPolicy(weight_bits=wb, act_bits=ab, skip_first=self.skip_first,
                           skip_last=self.skip_last, vit_scope=self.vit_scope)

    def dims_for(self, dataset_cfg: DatasetConfig, train_ds) -> dict:
        """Architecture dims derived from config plus the loaded data."""
        classes = train_ds.class_count
        images = train_ds.images
        if self.arch == "mlp":
            in_dim = int(np.prod(images.shape[1:]))
            return {"in_dim": in_dim, "hidden": list(self.hidden), "classes": classes}
        if images.ndim != 4:
            raise ConfigError(f"model.arch {self.arch!r} needs image data, "
                              f"got shape {images.shape}")
        in_ch, h, w = images.shape[1:]
        if self.arch == "mini_resnet":
            return {"in_channels": in_ch, "widths": list(self.widths),
                    "blocks_per_stage": self.blocks_per_stage, "classes": classes}
        if h != w:
            raise ConfigError(f"mini_vit needs square images, got {h}x{w}")
        return {"in_channels": in_ch, "image_hw": h, "patch": self.patch,
                "embed_dim": self.embed_dim, "depth": self.depth, "heads": self.heads,
                "mlp_ratio": self.mlp_ratio, "classes": classes}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    distill: DistillConfig
    compare: CompareConfig
    out_dir: str = "runs/out"


# maps: section -> (dataclass field name -> config key), for keys whose
# external spelling differs from the attribute ('lambda' is reserved)
_DISTILL_KEYS = {"regime": "regime", "distill_weight": "lambda",
                 "teacher_feature_bits": "teacher_feature_bits",
                 "kd_temperature": "kd_temperature",
                 "teacher_checkpoint": "teacher_checkpoint"}


def _apply_section(obj, section: dict, section_name: str, key_map=None):
    if key_map is None:
        key_map = {name: name for name in obj.__dataclass_fields__}
    reverse = {v: k for k, v in key_map.items()}
    for key, value in section.items():
        if key not in reverse:
            raise ConfigError(f"unknown key {section_name}.{key}")
        setattr(obj, reverse[key], value)
    return obj


_SECTIONS = ("dataset", "model", "train", "distill", "compare", "output")


def parse_config(path: str) -> ExperimentConfig:
    """Parse, apply defaults, and validate; any unknown key fails fast."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None

    for section in raw:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")

    cfg = ExperimentConfig(dataset=DatasetConfig(), model=ModelConfig(),
                           train=TrainConfig(), distill=DistillConfig(),
                           compare=CompareConfig())
    _apply_section(cfg.dataset, raw.get("dataset", {}), "dataset")
    _apply_section(cfg.model, raw.get("model", {}), "model")
    _apply_section(cfg.train, raw.get("train", {}), "train")
    _apply_section(cfg.distill, raw.get("distill", {}), "distill", _DISTILL_KEYS)
    _apply_section(cfg.compare, raw.get("compare", {}), "compare")
    output = dict(raw.get("output", {}))
    if "dir" in output:
        cfg.out_dir = output.pop("dir")
    if output:
        raise ConfigError(f"unknown key output.{next(iter(output))}")

    # synth image_shape arrives as a TOML array; [] means "use input_dim"
    if isinstance(cfg.dataset.image_shape, list):
        cfg.dataset.image_shape = tuple(cfg.dataset.image_shape) or None
    if cfg.dataset.input_dim is not None:
        cfg.dataset.image_shape = None

    cfg.dataset.validate()
    cfg.model.validate()
    cfg.train.validate()
    cfg.distill.validate()
    cfg.compare.validate()
    return cfg


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def resolved_toml(cfg: ExperimentConfig) -> str:
    """The full configuration, defaults included, reparsable by parse_config."""
    def section(name, obj, key_map=None):
        lines = [f"[{name}]"]
        for attr in obj.__dataclass_fields__:
            value = getattr(obj, attr)
            if value is None:
                continue  # TOML has no null; absent key means default/None
            key = (key_map or {}).get(attr, attr)
            lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines)

    ds = cfg.dataset
    parts = [
        section("dataset", ds),
        section("model", cfg.model),
        section("train", cfg.train),
        section("distill", cfg.distill, _DISTILL_KEYS),
        section("compare", cfg.compare),
        f'[output]\ndir = {_toml_value(cfg.out_dir)}',
    ]
    return "\n\n".join(parts) + "\n"


def write_resolved(cfg: ExperimentConfig, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.resolved.toml")
    with open(path, "w") as fh:
        fh.write(resolved_toml(cfg))
    return path
