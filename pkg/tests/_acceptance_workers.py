"""Top-level worker functions for the acceptance suite's process pools.

The long training runs are independent (per target or per seed), so the
suite spreads them over two worker processes; every worker is
deterministic given its arguments, so parallelism does not change any
result.
"""

from __future__ import annotations

import numpy as np

from maskforge.accounting import (SparsityBudget, dense_size, exact_size, sparsity_of)
from maskforge.data import TaskSpec, holdout_set
from maskforge.extraction import binarize_and_fold
from maskforge.model import ConformerConfig
from maskforge.model_io import load_dense_model
from maskforge.omp import omp_prune
from maskforge.trainer import (TrainerConfig, achieved_expected_sparsity, evaluate,
                               finetune_masked, prune_train)

TOY = ConformerConfig(num_layers=4, hidden=64, num_heads=4, ffn_dim=128, conv_kernel=3,
                      input_dim=16, num_classes=8)
TASK = TaskSpec()


def sparsity_run(args):
    """One budgeted prune run; returns achieved/extracted sparsity and masks."""
    teacher_path, target, budget_mode, total_steps, warmup_steps, seed = args
    teacher = load_dense_model(teacher_path)
    budget = SparsityBudget.for_config(TOY, target, budget_mode=budget_mode, seq_len=TASK.seq_len)
    cfg = TrainerConfig(total_steps=total_steps, warmup_steps=warmup_steps, seed=seed)
    result = prune_train(teacher, TASK, cfg, budget)
    achieved = achieved_expected_sparsity(result.masks, TOY, budget)
    bin_masks = binarize_and_fold(result.masks)
    exact_total, _ = exact_size(bin_masks, TOY)
    exact_sparsity = sparsity_of(exact_total, dense_size(TOY))
    alpha = {fam: t.data.copy() for fam, t in result.masks.alpha.items()}
    return {
        "target": target,
        "achieved_expected": achieved,
        "exact_sparsity": exact_sparsity,
        "alpha": alpha,
        "budget_mode": budget_mode,
    }


def quality_pair_run(args):
    """L0+KD prune vs OMP+finetune at equal step budgets, one seed."""
    teacher_path, target, steps, seed = args
    teacher = load_dense_model(teacher_path)
    budget = SparsityBudget.for_config(TOY, target)
    cfg = TrainerConfig(total_steps=steps, warmup_steps=max(1, steps // 10), seed=seed)
    feats, labels = holdout_set(TASK, 48)

    ours = prune_train(teacher, TASK, cfg, budget)
    ours_bin = binarize_and_fold(ours.masks)
    ours_acc, ours_loss = evaluate(ours.model, ours_bin, feats, labels)

    omp_bin = omp_prune(teacher, budget)
    omp_model, _ = finetune_masked(teacher.clone(), omp_bin.gate_arrays(), TASK, cfg, steps)
    omp_acc, omp_loss = evaluate(omp_model, omp_bin, feats, labels)
    return {
        "seed": seed,
        "ours_acc": ours_acc,
        "ours_loss": ours_loss,
        "omp_acc": omp_acc,
        "omp_loss": omp_loss,
        "ours_exact_sparsity": sparsity_of(exact_size(ours_bin, TOY)[0], dense_size(TOY)),
        "omp_exact_sparsity": sparsity_of(exact_size(omp_bin, TOY)[0], dense_size(TOY)),
    }


def kd_ablation_run(args):
    """Same seed and data stream with and without layerwise distillation."""
    teacher_path, target, steps, seed = args
    teacher = load_dense_model(teacher_path)
    budget = SparsityBudget.for_config(TOY, target)
    feats, labels = holdout_set(TASK, 48)
    out = {"seed": seed}
    for label, enable in (("kd", True), ("no_kd", False)):
        cfg = TrainerConfig(total_steps=steps, warmup_steps=max(1, steps // 10), seed=seed,
                            enable_kd=enable)
        result = prune_train(teacher, TASK, cfg, budget)
        bin_masks = binarize_and_fold(result.masks)
        acc, loss = evaluate(result.model, bin_masks, feats, labels)
        out[label + "_loss"] = loss
        out[label + "_acc"] = acc
    return out
