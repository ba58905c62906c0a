"""Deterministic training/eval loops, metrics export, and the multi-regime
comparison driver.

Determinism contract: (seed, config) fixes the shuffle order, augmentation
draws, init, and therefore the whole metrics stream bitwise on one machine.
Shuffles are decided per epoch from a dedicated generator before the batch
loop; augmentation consumes its own stream.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .checkpoint import save_model, save_teacher_bundle
from .data import AugmentPolicy, Dataset, augment
from .distill import (DistillConfig, TeacherBundle, regime_loss, teacher_warmup,
                      warmup_epochs)
from .errors import ConfigError
from .models import QuantPolicy, build_model
from .optim import SGD, lr_at
from .quantizer import FP_BITS
from .tensor import Tape, Tensor

SCHEDULES = ("cosine", "step", "constant")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    schedule: str = "cosine"
    seed: int = 0
    warmup_fraction: float = 0.1
    quantizer_lr_scale: float = 1.0
    grad_clip: float | None = None

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if not 0.0 < self.warmup_fraction <= 0.5:
            raise ConfigError(
                f"train.warmup_fraction must be in (0,0.5], got {self.warmup_fraction}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"train.schedule must be one of {SCHEDULES}, "
                              f"got {self.schedule!r}")
        return self


METRICS_COLUMNS = ("epoch", "split", "loss", "top1", "distill_loss_component",
                   "ce_component", "lr", "wall_time_s")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    top1: float
    distill_loss_component: float
    ce_component: float
    lr: float
    wall_time_s: float

    def row(self):
        return [getattr(self, c) for c in METRICS_COLUMNS]

    def as_dict(self):
        return {c: getattr(self, c) for c in METRICS_COLUMNS}


def write_metrics(records, out_dir: str):
    """CSV with the fixed column order, plus a JSON-lines mirror."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.as_dict()) + "\n")


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def evaluate(model, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy x100; eval mode, quantizers active, no tape."""
    if len(data) == 0:
        raise ValueError("evaluate on an empty split")
    correct = 0
    for batch in _batches(len(data), batch_size):
        x = ops.constant(data.images[batch])
        _, logits = model.forward_features(x, training=False)
        correct += int((logits.values.argmax(axis=1) == data.labels[batch]).sum())
    return 100.0 * correct / len(data)


def _eval_record(model, data: Dataset, epoch: int, lr: float, started: float,
                 batch_size: int = 256) -> MetricsRecord:
    correct = 0
    loss_sum = 0.0
    for batch in _batches(len(data), batch_size):
        x = ops.constant(data.images[batch])
        _, logits = model.forward_features(x, training=False)
        correct += int((logits.values.argmax(axis=1) == data.labels[batch]).sum())
        ce = ops.softmax_cross_entropy(logits, data.labels[batch])
        loss_sum += ce.item() * len(batch)
    loss = loss_sum / len(data)
    top1 = 100.0 * correct / len(data)
    return MetricsRecord(epoch, "eval", loss, top1, 0.0, loss, lr,
                         time.perf_counter() - started)


def train_one(regime: DistillConfig, model, teacher: TeacherBundle | None,
              train_ds: Dataset, eval_ds: Dataset, cfg: TrainConfig,
              out_dir: str | None = None, augment_policy: AugmentPolicy | None = None,
              log=None):
    """Run one training job; returns (model, list[MetricsRecord]).

    Writes best/last checkpoints and metrics files when out_dir is given.
    The teacher is required for every regime except baseline and is only
    forwarded when the distillation term actually contributes (lambda > 0).
    """
    regime.validate()
    cfg.validate()
    if (teacher is None) != (regime.regime == "baseline"):
        raise ConfigError(f"regime {regime.regime!r} "
                          f"{'requires a teacher' if teacher is None else 'takes no teacher'}")
    use_teacher = teacher is not None and regime.distill_weight > 0.0
    use_quantized_feature = use_teacher and regime.regime == "qfd"

    opt = SGD(model.parameters(), model.quantizers(), momentum=cfg.momentum,
              weight_decay=cfg.weight_decay, quantizer_lr_scale=cfg.quantizer_lr_scale,
              grad_clip=cfg.grad_clip)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    augment_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))

    records: list[MetricsRecord] = []
    best_top1 = -1.0
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg.schedule, cfg.lr, epoch, cfg.epochs)
        order = shuffle_rng.permutation(n)
        loss_sum = distill_sum = ce_sum = 0.0
        correct = 0
        for batch in _batches(n, cfg.batch_size, order):
            xv = train_ds.images[batch]
            if augment_policy is not None and xv.ndim == 4:
                xv = augment(xv, augment_policy, augment_rng)
            labels = train_ds.labels[batch]
            teacher_out = None
            if use_teacher:
                teacher_out = (teacher.forward(xv) if use_quantized_feature
                               else teacher.raw_feature_and_logits(xv))
            x = ops.constant(xv)
            with Tape() as tape:
                f, p = model.forward_features(x, training=True)
                parts = regime_loss(regime, f, p, labels, teacher_out)
            opt.zero_grad()
            tape.backward(parts.total)
            opt.step(lr)
            b = len(batch)
            loss_sum += parts.total.item() * b
            distill_sum += parts.distill_component * b
            ce_sum += parts.ce_component * b
            correct += int((p.values.argmax(axis=1) == labels).sum())

        train_rec = MetricsRecord(epoch, "train", loss_sum / n, 100.0 * correct / n,
                                  distill_sum / n, ce_sum / n, lr,
                                  time.perf_counter() - t0)
        eval_rec = _eval_record(model, eval_ds, epoch, lr, t0)
        records.extend([train_rec, eval_rec])
        if log is not None:
            log(f"epoch {epoch + 1:3d}/{cfg.epochs} "
                f"train loss {train_rec.loss:7.4f} acc {train_rec.top1:5.1f} | "
                f"eval loss {eval_rec.loss:7.4f} acc {eval_rec.top1:5.1f} | "
                f"lr {lr:.5f} | {eval_rec.wall_time_s:.1f}s")
        if out_dir is not None:
            if eval_rec.top1 > best_top1:
                save_model(os.path.join(out_dir, "checkpoint_best"), model,
                           meta={"epoch": epoch, "eval_top1": eval_rec.top1})
            save_model(os.path.join(out_dir, "checkpoint_last"), model,
                       meta={"epoch": epoch, "eval_top1": eval_rec.top1})
        best_top1 = max(best_top1, eval_rec.top1)

    if out_dir is not None:
        write_metrics(records, out_dir)
    return model, records


def best_and_last_top1(records) -> tuple[float, float]:
    evals = [r.top1 for r in records if r.split == "eval"]
    return max(evals), evals[-1]


# ---------------------------------------------------------------------------
# comparison suites
# ---------------------------------------------------------------------------

@dataclass
class CompareConfig:
    """Suite: (regime x W/A bits) cells, each run over the listed seeds.

    QFD cells fan out over teacher_feature_bits; one shared teacher bundle is
    prepared per distinct teacher-bit setting and reused by every cell.
    """

    regimes: list = field(default_factory=lambda: ["baseline", "qfd"])
    wa_bits: list = field(default_factory=lambda: ["2/2"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    teacher_feature_bits: list = field(default_factory=lambda: [1])

    def validate(self):
        for r in self.regimes:
            if r not in ("baseline", "feature", "logit", "qfd"):
                raise ConfigError(f"compare.regimes entry {r!r} is not a regime")
        if not self.seeds:
            raise ConfigError("compare.seeds must not be empty")
        for b in self.teacher_feature_bits:
            if b not in (1, 2, 4, 8, FP_BITS):
                raise ConfigError(f"compare.teacher_feature_bits entry {b} invalid")
        return self

    def cells(self):
        out = []
        for regime in self.regimes:
            for wa in self.wa_bits:
                if regime == "qfd":
                    out.extend((regime, wa, tb) for tb in self.teacher_feature_bits)
                else:
                    out.append((regime, wa, None))
        return out


AGGREGATE_COLUMNS = ("regime", "weight_bits", "act_bits", "teacher_feature_bits",
                     "n_seeds", "mean_best_top1", "std_best_top1",
                     "mean_last_top1", "std_last_top1", "status")


def _cell_label(regime, wa, teacher_bits):
    return f"{regime}_{wa.replace('/', 'x')}" + ("" if teacher_bits is None
                                                 else f"_t{teacher_bits}")


def run_comparison(suite: CompareConfig, base_distill: DistillConfig,
                   base_train: TrainConfig, model_factory, teacher_factory,
                   train_ds: Dataset, eval_ds: Dataset, out_dir: str | None = None,
                   log=None, max_workers: int = 1):
    """Run every suite cell over every seed and aggregate mean/std top-1.

    model_factory(wa_bits_string, seed) -> fresh student;
    teacher_factory() -> trained FP teacher model (called at most once;
    warmups per teacher-bit are derived from it). A failed cell is recorded
    with its error and the suite continues. Returns the aggregate rows.
    """
    suite.validate()
    cells = suite.cells()
    if not cells:
        return []

    needs_teacher = any(regime != "baseline" for regime, _, _ in cells)
    bundles: dict[int, TeacherBundle] = {}
    if needs_teacher:
        teacher = teacher_factory()
        wanted = sorted({FP_BITS if regime in ("feature", "logit") else tb
                         for regime, _, tb in cells if regime != "baseline"})
        for bits in wanted:
            if log is not None:
                log(f"preparing teacher bundle ({bits}-bit feature)")
            bundles[bits], before, after = teacher_warmup(
                teacher, train_ds, eval_ds, bits,
                warmup_epochs(base_train.epochs, base_train.warmup_fraction),
                lr=base_train.lr, batch_size=base_train.batch_size,
                seed=base_train.seed, log=log)
            if log is not None:
                log(f"teacher top-1 before/after feature quantization: "
                    f"{before:.2f} / {after:.2f}")

    tasks = [(ci, cell, seed) for ci, cell in enumerate(cells) for seed in suite.seeds]

    def run_task(task):
        _, (regime, wa, teacher_bits), seed = task
        from .config import parse_wa_bits
        wb, ab = parse_wa_bits(wa)
        model = model_factory(wa, seed)
        dcfg = DistillConfig(
            regime=regime, distill_weight=base_distill.distill_weight,
            teacher_feature_bits=teacher_bits if teacher_bits is not None else FP_BITS,
            kd_temperature=base_distill.kd_temperature)
        bundle = None
        if regime != "baseline":
            bundle = bundles[FP_BITS if regime in ("feature", "logit") else teacher_bits]
        tcfg = TrainConfig(**{**base_train.__dict__, "seed": seed})
        cell_dir = None
        if out_dir is not None:
            cell_dir = os.path.join(out_dir, "cells",
                                    f"{_cell_label(regime, wa, teacher_bits)}_s{seed}")
        _, records = train_one(dcfg, model, bundle, train_ds, eval_ds, tcfg,
                               out_dir=cell_dir)
        return best_and_last_top1(records)

    results: dict[int, list] = {ci: [] for ci in range(len(cells))}
    errors: dict[int, str] = {}
    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [(task, pool.submit(run_task, task)) for task in tasks]
        for (ci, cell, seed), fut in futures:
            try:
                results[ci].append(fut.result())
            except Exception as e:  # cell failures recorded, suite continues
                errors[ci] = f"{type(e).__name__}: {e}"
    else:
        for task in tasks:
            ci = task[0]
            try:
                results[ci].append(run_task(task))
            except Exception as e:
                errors[ci] = f"{type(e).__name__}: {e}"
            if log is not None and ci not in errors:
                regime, wa, tb = task[1]
                log(f"cell {_cell_label(regime, wa, tb)} seed {task[2]}: "
                    f"best {results[ci][-1][0]:.2f} last {results[ci][-1][1]:.2f}")

    rows = []
    for ci, (regime, wa, teacher_bits) in enumerate(cells):
        from .config import parse_wa_bits
        wb, ab = parse_wa_bits(wa)
        vals = results[ci]
        if vals:
            best = np.array([v[0] for v in vals])
            last = np.array([v[1] for v in vals])
            agg = (float(best.mean()), float(best.std()),
                   float(last.mean()), float(last.std()))
        else:
            agg = (float("nan"),) * 4
        rows.append({
            "regime": regime, "weight_bits": wb, "act_bits": ab,
            "teacher_feature_bits": teacher_bits, "n_seeds": len(vals),
            "mean_best_top1": agg[0], "std_best_top1": agg[1],
            "mean_last_top1": agg[2], "std_last_top1": agg[3],
            "status": errors.get(ci, "ok"),
        })

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "aggregate.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(AGGREGATE_COLUMNS)
            for row in rows:
                writer.writerow([row[c] for c in AGGREGATE_COLUMNS])
        with open(os.path.join(out_dir, "aggregate.json"), "w") as fh:
            json.dump(rows, fh, indent=1)
    return rows
