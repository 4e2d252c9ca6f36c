"""Command-line surface: train, prune, extract, evaluate, compare, report, bench."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .accounting import (SparsityBudget, dense_flops, dense_size, exact_size, report_distribution,
                         sparsity_of, write_report_csv)
from .config import ConfigError, RunConfig, load_config, write_resolved_config
from .data import holdout_set
from .extraction import (CompactModel, benchmark_forward, binarize_and_fold,
                         compact_flops, extract)
from .model import init_model
from .model_io import (is_binary_mask_file, load_any_model, load_binary_masks, load_dense_model,
                       load_masks, save_binary_masks, save_compact_model, save_dense_model, save_masks)
from .omp import omp_prune
from .trainer import (achieved_expected_sparsity, evaluate, finetune_masked,
                      prune_train, train_dense)


def _sparsity_arg(value: str) -> float:
    try:
        f = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}")
    if not (0.0 <= f < 1.0):
        raise argparse.ArgumentTypeError(f"target sparsity must be in [0, 1), got {f}")
    return f


def _budget_mode_arg(value: str) -> str:
    mapping = {"params": "parameters", "parameters": "parameters", "flops": "flops"}
    if value not in mapping:
        raise argparse.ArgumentTypeError(f"budget mode must be params|flops, got {value!r}")
    return mapping[value]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskforge",
                                     description="Structured pruning of a toy Conformer encoder")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON run config")
    common.add_argument("--seed", type=int, default=None, help="override trainer/task seed")
    common.add_argument("--out", type=Path, default=Path("maskforge_out"), help="artifact directory")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-dense", parents=[common], help="train the dense teacher")
    p.add_argument("--steps", type=int, default=None, help="override teacher training steps")

    p = sub.add_parser("prune", parents=[common], help="learn masks under a sparsity budget")
    p.add_argument("--target-sparsity", type=_sparsity_arg, default=None)
    p.add_argument("--budget-mode", type=_budget_mode_arg, default=None)
    p.add_argument("--no-kd", action="store_true", help="disable layerwise distillation")
    p.add_argument("--head-only", action="store_true", help="prune attention heads only")
    p.add_argument("--no-hidden-masks", action="store_true", help="disable hidden-dimension masks")
    p.add_argument("--teacher", type=Path, default=None, help="teacher checkpoint (trained if omitted)")
    p.add_argument("--steps", type=int, default=None, help="override prune-train steps")

    p = sub.add_parser("extract", parents=[common], help="slice a masked model into a smaller one")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True, help="mask logits or binary masks")
    p.add_argument("--trim", action="store_true", help="trim borderline units down to the budget")
    p.add_argument("--round-scales", action="store_true", help="snap retained gates to hard 1.0")
    p.add_argument("--target-sparsity", type=_sparsity_arg, default=None)
    p.add_argument("--budget-mode", type=_budget_mode_arg, default=None)

    p = sub.add_parser("evaluate", parents=[common], help="frame accuracy on the holdout set")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--masks", type=Path, default=None)
    p.add_argument("--holdout-size", type=int, default=64)

    p = sub.add_parser("omp", parents=[common], help="one-shot magnitude pruning baseline")
    p.add_argument("--teacher", type=Path, default=None)
    p.add_argument("--target-sparsity", type=_sparsity_arg, default=None)
    p.add_argument("--budget-mode", type=_budget_mode_arg, default=None)
    p.add_argument("--finetune-steps", type=int, default=0)

    p = sub.add_parser("report", parents=[common], help="per-layer/module retained-ratio table")
    p.add_argument("--masks", type=Path, required=True)

    p = sub.add_parser("bench", parents=[common], help="forward timing and kernel comparison")
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--masks", type=Path, default=None,
                   help="also benchmark the extraction of --model under these masks")
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--batch", type=int, default=8)
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.trainer.seed = args.seed
        cfg.task = type(cfg.task)(**{**cfg.task.__dict__, "seed": args.seed})
    if getattr(args, "target_sparsity", None) is not None:
        cfg.budget.target_sparsity = args.target_sparsity
    if getattr(args, "budget_mode", None) is not None:
        cfg.budget.budget_mode = args.budget_mode
    if getattr(args, "no_kd", False):
        cfg.trainer.enable_kd = False
    if getattr(args, "head_only", False):
        cfg.trainer.head_only_pruning = True
    if getattr(args, "no_hidden_masks", False):
        cfg.trainer.disable_hidden_masks = True
    return cfg.validate()


def _budget(cfg: RunConfig) -> SparsityBudget:
    return SparsityBudget.for_config(cfg.model, cfg.budget.target_sparsity, cfg.budget.budget_mode,
                                     seq_len=cfg.task.seq_len)


def _get_teacher(args, cfg: RunConfig, out: Path):
    if args.teacher is not None:
        return load_dense_model(args.teacher)
    print(f"training dense teacher for {cfg.trainer.teacher_steps} steps", flush=True)
    teacher, curve = train_dense(cfg.model, cfg.task, cfg.trainer)
    save_dense_model(teacher, out / "teacher.cpk")
    print(f"teacher final loss {curve[-1]:.4f}")
    return teacher


def cmd_train_dense(args) -> int:
    cfg = _load_run_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    teacher, curve = train_dense(cfg.model, cfg.task, cfg.trainer, steps=args.steps)
    save_dense_model(teacher, out / "teacher.cpk")
    with open(out / "dense_metrics.csv", "w", encoding="utf-8") as fh:
        fh.write("step,task_loss\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{v!r}\n")
    write_resolved_config(cfg, out / "resolved_config.json")
    feats, labels = holdout_set(cfg.task, 32)
    acc, loss = evaluate(teacher, None, feats, labels)
    print(f"teacher holdout accuracy {acc:.4f} loss {loss:.4f}")
    return 0


def cmd_prune(args) -> int:
    cfg = _load_run_config(args)
    if args.steps is not None:
        cfg.trainer.total_steps = args.steps
        cfg.trainer.warmup_steps = max(1, args.steps // 10)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out / "resolved_config.json")
    teacher = _get_teacher(args, cfg, out)
    budget = _budget(cfg)
    result = prune_train(teacher, cfg.task, cfg.trainer, budget)
    save_masks(result.masks, out / "masks.cpk")
    save_dense_model(result.model, out / "student.cpk")
    with open(out / "prune_metrics.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(result.metrics_csv())
    bin_masks = binarize_and_fold(result.masks)
    save_binary_masks(bin_masks, out / "binary_masks.cpk")
    achieved = achieved_expected_sparsity(result.masks, cfg.model, budget)
    exact_total, _ = exact_size(bin_masks, cfg.model)
    print(f"target sparsity {budget.target_sparsity:.3f} "
          f"achieved expected {achieved:.4f} "
          f"exact parameter sparsity {sparsity_of(exact_total, dense_size(cfg.model)):.4f}")
    return 0


def _load_mask_file(path, cfg: RunConfig):
    if is_binary_mask_file(path):
        return None, load_binary_masks(path, cfg.model.num_layers)
    masks = load_masks(path, cfg.model.num_layers)
    return masks, None


def cmd_extract(args) -> int:
    cfg = _load_run_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    model = load_dense_model(args.model)
    masks, bin_masks = _load_mask_file(args.masks, cfg)
    if bin_masks is None:
        budget = _budget(cfg) if args.trim else None
        bin_masks = binarize_and_fold(masks, budget=budget, config=cfg.model,
                                      round_scales_to_one=args.round_scales)
    cm = extract(model, bin_masks)
    save_compact_model(cm, out / "extracted.cpk")
    total, _ = exact_size(bin_masks, model.config)
    dense = dense_size(model.config)
    summary = {
        "encoder_parameters": cm.num_encoder_parameters(),
        "dense_encoder_parameters": dense,
        "exact_size": total,
        "parameter_sparsity": sparsity_of(total, dense),
        "flops_per_sequence": compact_flops(cm, cfg.task.seq_len),
        "dense_flops_per_sequence": dense_flops(model.config, cfg.task.seq_len),
    }
    with open(out / "extract_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"extracted encoder parameters {cm.num_encoder_parameters()} "
          f"(dense {dense}, sparsity {summary['parameter_sparsity']:.4f})")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    model = load_any_model(args.model)
    masks = None
    if args.masks is not None:
        if isinstance(model, CompactModel):
            raise ValueError("evaluate: masks cannot be applied to an extracted model")
        hc, bm = _load_mask_file(args.masks, cfg)
        masks = hc if hc is not None else bm
    feats, labels = holdout_set(cfg.task, args.holdout_size)
    acc, loss = evaluate(model, masks, feats, labels)
    with open(out / "eval.json", "w", encoding="utf-8") as fh:
        json.dump({"accuracy": acc, "task_loss": loss, "holdout_size": args.holdout_size}, fh, indent=2)
        fh.write("\n")
    print(f"holdout accuracy {acc:.4f} mean task loss {loss:.4f}")
    return 0


def cmd_omp(args) -> int:
    cfg = _load_run_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out / "resolved_config.json")
    teacher = _get_teacher(args, cfg, out)
    budget = _budget(cfg)
    bin_masks = omp_prune(teacher, budget)
    save_binary_masks(bin_masks, out / "omp_masks.cpk")
    total, _ = exact_size(bin_masks, cfg.model)
    print(f"one-shot pruned to exact size {total} "
          f"(sparsity {sparsity_of(total, dense_size(cfg.model)):.4f})")
    if args.finetune_steps > 0:
        model = teacher.clone()
        model, curve = finetune_masked(model, bin_masks.gate_arrays(), cfg.task, cfg.trainer,
                                       args.finetune_steps)
        save_dense_model(model, out / "omp_student.cpk")
        feats, labels = holdout_set(cfg.task, 32)
        acc, loss = evaluate(model, bin_masks, feats, labels)
        print(f"fine-tuned {args.finetune_steps} steps: holdout accuracy {acc:.4f} loss {loss:.4f}")
    return 0


def cmd_report(args) -> int:
    cfg = _load_run_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    hc, bin_masks = _load_mask_file(args.masks, cfg)
    if bin_masks is None:
        bin_masks = binarize_and_fold(hc)
    rows = report_distribution(bin_masks, cfg.model)
    write_report_csv(rows, out / "distribution.csv")
    print(f"wrote {out / 'distribution.csv'} ({len(rows)} rows)")
    return 0


def _bench_kernels(repeats: int) -> dict:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 64, 64), dtype=np.float32)
    w = rng.standard_normal((64, 3), dtype=np.float32)
    b = rng.standard_normal(64, dtype=np.float32)
    out = {}
    paths = [("numpy", False)] + ([("numba", True)] if kernels.USE_NUMBA else [])
    for name, flag in paths:
        kernels.depthwise_conv1d_forward(x, w, b, use_numba=flag)  # warmup/compile
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for _ in range(20):
                kernels.depthwise_conv1d_forward(x, w, b, use_numba=flag)
            times.append((time.perf_counter() - t0) / 20)
        out[name] = float(np.median(times))
    return out


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    model = load_any_model(args.model) if args.model else init_model(cfg.model, seed=cfg.trainer.seed)
    feats, _ = holdout_set(cfg.task, args.batch)
    fwd = benchmark_forward(model, feats, repeats=args.repeats)
    kern = _bench_kernels(max(3, args.repeats))
    result = {
        "forward": fwd,
        "depthwise_kernel_s": kern,
        "numba_enabled": kernels.USE_NUMBA,
        "batch": args.batch,
        "seq_len": cfg.task.seq_len,
    }
    if args.masks is not None:
        if isinstance(model, CompactModel):
            raise ValueError("bench: --masks needs a dense --model to extract from")
        hc, bin_masks = _load_mask_file(args.masks, cfg)
        if bin_masks is None:
            bin_masks = binarize_and_fold(hc)
        compact = extract(model, bin_masks)
        result["extracted_forward"] = benchmark_forward(compact, feats, repeats=args.repeats)
        result["extracted_speedup"] = fwd["median_s"] / result["extracted_forward"]["median_s"]
        result["flops_reduction"] = 1.0 - result["extracted_forward"]["flops_per_forward"] / fwd["flops_per_forward"]
    with open(out / "bench.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    kern_txt = " ".join(f"{k}={v * 1e6:.1f}us" for k, v in kern.items())
    msg = (f"forward median {fwd['median_s'] * 1e3:.3f} ms "
           f"({fwd['flops_per_forward'] / 1e6:.2f} MFLOP); depthwise {kern_txt}")
    if "extracted_forward" in result:
        msg += (f"; extracted {result['extracted_forward']['median_s'] * 1e3:.3f} ms "
                f"({result['extracted_speedup']:.2f}x, FLOPs -{result['flops_reduction'] * 100:.1f}%)")
    print(msg)
    return 0


_COMMANDS = {
    "train-dense": cmd_train_dense,
    "prune": cmd_prune,
    "extract": cmd_extract,
    "evaluate": cmd_evaluate,
    "omp": cmd_omp,
    "report": cmd_report,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"maskforge {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
