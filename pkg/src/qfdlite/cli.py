"""Command-line surface.

Subcommands mirror the pipeline stages: `train` (baseline/FP runs),
`quantize-teacher` (feature-quantization warmup), `distill` (any regime),
`eval`, `compare` (regime x bit-width suites) and `gradcheck`. Every run
writes its fully resolved config next to its outputs. Exit codes: 0 ok,
2 config error, 3 numerical failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import gradcheck as gc
from . import ops
from .checkpoint import (load_model, load_teacher_bundle, save_model,
                         save_teacher_bundle)
from .config import ExperimentConfig, parse_config, write_resolved
from .distill import DistillConfig, teacher_warmup, warmup_epochs
from .errors import ArtifactError, ConfigError, NumericalError
from .models import build_model
from .quantizer import FP_BITS
from .tensor import Tensor
from .train import best_and_last_top1, evaluate, run_comparison, train_one

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ARTIFACT = 4


def _log(msg: str):
    print(msg, flush=True)


def _load_experiment(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "teacher", None):
        cfg.distill.teacher_checkpoint = args.teacher
    return cfg


def _prepare(cfg: ExperimentConfig):
    train_ds, eval_ds = cfg.dataset.load()
    dims = cfg.model.dims_for(cfg.dataset, train_ds)
    model = build_model(cfg.model.arch, dims, cfg.model.policy(), cfg.train.seed)
    return train_ds, eval_ds, model


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    write_resolved(cfg, cfg.out_dir)
    train_ds, eval_ds, model = _prepare(cfg)
    _, records = train_one(DistillConfig(regime="baseline"), model, None,
                           train_ds, eval_ds, cfg.train, out_dir=cfg.out_dir,
                           augment_policy=cfg.dataset.augment_policy(), log=_log)
    best, last = best_and_last_top1(records)
    _log(f"done: best top-1 {best:.2f}, last top-1 {last:.2f}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_experiment(args)
    write_resolved(cfg, cfg.out_dir)
    train_ds, eval_ds, model = _prepare(cfg)
    teacher = None
    if cfg.distill.regime != "baseline":
        if not cfg.distill.teacher_checkpoint:
            raise ArtifactError(f"regime {cfg.distill.regime!r} needs --teacher "
                                f"or distill.teacher_checkpoint")
        teacher = load_teacher_bundle(cfg.distill.teacher_checkpoint)
        want = cfg.distill.effective_teacher_bits()
        if teacher.feature_quant.bits != want:
            raise ConfigError(
                f"teacher bundle is {teacher.feature_quant.bits}-bit but the "
                f"configured regime needs {want}-bit features")
    _, records = train_one(cfg.distill, model, teacher, train_ds, eval_ds,
                           cfg.train, out_dir=cfg.out_dir,
                           augment_policy=cfg.dataset.augment_policy(), log=_log)
    best, last = best_and_last_top1(records)
    _log(f"done: best top-1 {best:.2f}, last top-1 {last:.2f}")
    return 0


def cmd_quantize_teacher(args) -> int:
    cfg = _load_experiment(args)
    write_resolved(cfg, cfg.out_dir)
    train_ds, eval_ds, _ = _prepare(cfg)
    if not cfg.distill.teacher_checkpoint:
        raise ArtifactError("quantize-teacher needs --teacher or "
                            "distill.teacher_checkpoint (a trained FP model)")
    teacher = load_model(cfg.distill.teacher_checkpoint)
    epochs = warmup_epochs(cfg.train.epochs, cfg.train.warmup_fraction)
    bundle, before, after = teacher_warmup(
        teacher, train_ds, eval_ds, cfg.distill.teacher_feature_bits, epochs,
        lr=cfg.train.lr, momentum=cfg.train.momentum,
        batch_size=cfg.train.batch_size, seed=cfg.train.seed, log=_log)
    prefix = os.path.join(cfg.out_dir, "teacher_bundle")
    save_teacher_bundle(prefix, bundle, meta={"top1_before": before, "top1_after": after})
    _log(f"teacher top-1 before/after feature quantization "
         f"({cfg.distill.teacher_feature_bits}-bit): {before:.2f} / {after:.2f}")
    _log(f"wrote {prefix}.json / .bin")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_experiment(args)
    model = load_model(args.checkpoint)
    _, eval_ds = cfg.dataset.load()
    top1 = evaluate(model, eval_ds)
    _log(f"top-1: {top1:.2f}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "eval.json"), "w") as fh:
        json.dump({"checkpoint": args.checkpoint, "top1": top1}, fh, indent=1)
    return 0


def cmd_compare(args) -> int:
    cfg = _load_experiment(args)
    write_resolved(cfg, cfg.out_dir)
    train_ds, eval_ds = cfg.dataset.load()
    dims = cfg.model.dims_for(cfg.dataset, train_ds)

    def model_factory(wa: str, seed: int):
        from .config import parse_wa_bits
        from .models import QuantPolicy
        wb, ab = parse_wa_bits(wa)
        policy = QuantPolicy(weight_bits=wb, act_bits=ab,
                             skip_first=cfg.model.skip_first,
                             skip_last=cfg.model.skip_last,
                             vit_scope=cfg.model.vit_scope)
        return build_model(cfg.model.arch, dims, policy, seed)

    def teacher_factory():
        if cfg.distill.teacher_checkpoint:
            return load_model(cfg.distill.teacher_checkpoint)
        _log("training FP teacher")
        from .models import QuantPolicy
        teacher = build_model(cfg.model.arch, dims, QuantPolicy(), cfg.train.seed + 10_000)
        train_one(DistillConfig(regime="baseline"), teacher, None, train_ds,
                  eval_ds, cfg.train, augment_policy=cfg.dataset.augment_policy())
        _log(f"teacher top-1: {evaluate(teacher, eval_ds):.2f}")
        return teacher

    workers = int(os.environ.get("QFD_THREADS", "1"))
    rows = run_comparison(cfg.compare, cfg.distill, cfg.train, model_factory,
                          teacher_factory, train_ds, eval_ds,
                          out_dir=cfg.out_dir, log=_log, max_workers=workers)
    if rows:
        header = (f"{'regime':<10}{'W/A':>6}{'t-bits':>8}{'seeds':>7}"
                  f"{'best(mean/std)':>18}{'last(mean/std)':>18}  status")
        _log(header)
        for row in rows:
            wa = f"{row['weight_bits'] or 32}/{row['act_bits'] or 32}"
            tb = "-" if row["teacher_feature_bits"] is None else str(row["teacher_feature_bits"])
            _log(f"{row['regime']:<10}{wa:>6}{tb:>8}{row['n_seeds']:>7}"
                 f"{row['mean_best_top1']:>10.2f}/{row['std_best_top1']:<7.2f}"
                 f"{row['mean_last_top1']:>10.2f}/{row['std_last_top1']:<7.2f}"
                 f"  {row['status']}")
    else:
        _log("empty suite; nothing to run")
    return 0


def _gradcheck_primitives(rng) -> dict:
    """FD checks for every differentiable primitive, float64."""
    results = {}

    def rand(*shape):
        return Tensor(rng.uniform(-2, 2, shape).astype(np.float64), requires_grad=True)

    a, b = rand(4, 5), rand(5, 3)
    results["matmul"], _, _ = gc.check_gradients(
        lambda: ops.mse(ops.matmul(a, b), ops.constant(np.zeros((4, 3)))),
        [("a", a), ("b", b)])

    x, w = rand(2, 2, 5, 5), rand(3, 2, 3, 3)
    target = ops.constant(np.zeros((2, 3, 5, 5)))
    results["conv2d"], _, _ = gc.check_gradients(
        lambda: ops.mse(ops.conv2d(x, w, padding=1), target), [("x", x), ("w", w)])

    for name, fn in (("relu", ops.relu), ("gelu", ops.gelu)):
        # keep probes clear of relu's kink at 0: FD there measures the corner
        mag = rng.uniform(0.05, 2.0, (4, 6))
        sign = rng.choice([-1.0, 1.0], (4, 6))
        z = Tensor((mag * sign).astype(np.float64), requires_grad=True)
        t = ops.constant(rng.uniform(-1, 1, (4, 6)))
        results[name], _, _ = gc.check_gradients(lambda fn=fn, z=z, t=t: ops.mse(fn(z), t),
                                              [("x", z)])

    z = rand(3, 4)
    gamma = Tensor(rng.uniform(0.5, 1.5, 4).astype(np.float64), requires_grad=True)
    beta = Tensor(rng.uniform(-0.5, 0.5, 4).astype(np.float64), requires_grad=True)
    t = ops.constant(rng.uniform(-1, 1, (3, 4)))
    results["layernorm"], _, _ = gc.check_gradients(
        lambda: ops.mse(ops.layernorm(z, gamma, beta), t),
        [("x", z), ("gamma", gamma), ("beta", beta)])

    xb = rand(4, 3, 5, 5)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3).astype(np.float64), requires_grad=True)
    beta = Tensor(rng.uniform(-0.5, 0.5, 3).astype(np.float64), requires_grad=True)
    state = ops.BatchNormState(3, dtype=np.float64)
    t = ops.constant(rng.uniform(-1, 1, (4, 3, 5, 5)))
    results["batchnorm2d"], _, _ = gc.check_gradients(
        lambda: ops.mse(ops.batchnorm2d(xb, gamma, beta, state, training=True), t),
        [("x", xb), ("gamma", gamma), ("beta", beta)])

    logits = rand(3, 5)
    labels = rng.integers(0, 5, 3)
    results["softmax_cross_entropy"], _, _ = gc.check_gradients(
        lambda: ops.softmax_cross_entropy(logits, labels), [("logits", logits)])

    p, q = rand(4, 6), rand(4, 6)
    results["mse"], _, _ = gc.check_gradients(lambda: ops.mse(p, q), [("a", p), ("b", q)])
    return results


def _gradcheck_models(rng) -> dict:
    """FD checks through full small models (quantizers disabled), float64."""
    from .models import build_model as bm
    results = {}
    cases = [
        ("mlp", {"in_dim": 6, "hidden": [8], "classes": 3}, (4, 6)),
        ("mini_resnet", {"in_channels": 2, "widths": [4], "blocks_per_stage": 1,
                         "classes": 3}, (2, 2, 8, 8)),
        ("mini_vit", {"in_channels": 2, "image_hw": 8, "patch": 4, "embed_dim": 8,
                      "depth": 1, "heads": 2, "mlp_ratio": 2, "classes": 3}, (2, 2, 8, 8)),
    ]
    for arch, dims, xshape in cases:
        model = bm(arch, dims, None, seed=5, dtype=np.float64)
        x = ops.constant(rng.uniform(0, 1, xshape).astype(np.float64))
        labels = rng.integers(0, 3, xshape[0])

        def build_loss(model=model, x=x, labels=labels):
            _, logits = model.forward_features(x, training=True)
            return ops.softmax_cross_entropy(logits, labels)

        params = [(n, t) for n, t, _ in model.parameters()]
        err, _, probes = gc.check_gradients(build_loss, params, max_probes=16, rng=rng)
        results[arch] = err
    return results


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(0)
    tol = 1e-3
    failures = 0
    for suite_name, suite in (("primitive", _gradcheck_primitives(rng)),
                              ("model", _gradcheck_models(rng))):
        for name, err in suite.items():
            ok = err <= tol
            failures += not ok
            _log(f"[{'PASS' if ok else 'FAIL'}] {suite_name} {name}: "
                 f"max rel err {err:.2e} (tol {tol:.0e})")
    if failures:
        raise NumericalError(f"{failures} gradcheck suites exceeded tolerance {tol}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qfdlite",
        description="Quantization-aware training with quantized-feature distillation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--teacher", default=None,
                       help="teacher checkpoint prefix (overrides config)")

    p = sub.add_parser("train", help="baseline / full-precision training run")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="run the configured distillation regime")
    common(p)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("quantize-teacher",
                       help="feature-quantization warmup of a trained teacher")
    common(p)
    p.set_defaults(fn=cmd_quantize_teacher)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint prefix (no extension)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="run a regime x bit-width comparison suite")
    common(p)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all primitives")
    common(p, config_required=False)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArtifactError, FileNotFoundError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
