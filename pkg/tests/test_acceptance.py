"""Acceptance suite: every criterion at its stated tolerance.

One line per criterion is printed (run pytest with -s to watch them).
The long training criteria spread their independent runs over two
worker processes; each run is deterministic given its seed.
"""

import math
import multiprocessing
import os
import time

import numpy as np
import pytest

import _acceptance_workers as workers
from maskforge import autodiff as ad
from maskforge.accounting import (SparsityBudget, dense_flops, exact_size,
                                  expected_flops, expected_size, flops_from_gate_values)
from maskforge.cli import main as cli_main
from maskforge.data import TaskSpec, generate_batch, holdout_set
from maskforge.extraction import BinaryMaskSet, binarize_and_fold, extract, forward_compact
from maskforge.masks import (HardConcreteMaskSet, expected_l0, init_alpha, mask_shapes,
                             monte_carlo_open_fraction)
from maskforge.model import ConformerConfig, forward, init_model
from maskforge.model_io import save_dense_model
from maskforge.objective import (KDState, LagrangianState, kd_loss, lagrangian_penalty,
                                 sparsity_schedule, total_loss)
from maskforge.trainer import TrainerConfig, train_dense

TOY = workers.TOY
TASK = workers.TASK

_t0 = {}


def _start(cid):
    _t0[cid] = time.monotonic()


def _finish(cid, ok, detail, budget_s):
    dt = time.monotonic() - _t0[cid]
    status = "PASS" if ok and dt < budget_s else "FAIL"
    print(f"\n[criterion {cid}] {status} ({dt:.1f}s / budget {budget_s:.0f}s) {detail}", flush=True)
    assert ok, f"criterion {cid}: {detail}"
    assert dt < budget_s, f"criterion {cid}: runtime {dt:.1f}s over budget {budget_s}s"


@pytest.fixture(scope="session")
def teacher_path(tmp_path_factory):
    """One dense teacher at the toy config, shared by criteria 3-7."""
    path = tmp_path_factory.mktemp("teacher") / "teacher.cpk"
    cfg = TrainerConfig(seed=0)
    teacher, curve = train_dense(TOY, TASK, cfg, steps=2000)
    save_dense_model(teacher, path)
    feats, labels = holdout_set(TASK, 32)
    from maskforge.data import nearest_centroid_accuracy
    from maskforge.trainer import evaluate
    acc, _ = evaluate(teacher, None, feats, labels)
    frame_local = nearest_centroid_accuracy(TASK, feats, labels)
    print(f"\n[teacher] 2000 steps, holdout accuracy {acc:.3f} (frame-local oracle {frame_local:.3f})", flush=True)
    assert acc > 0.9
    assert acc > frame_local  # temporal model beats the frame-local oracle
    return str(path)


@pytest.fixture(scope="session")
def sparsity_runs(teacher_path):
    """Criterion 3 runs, shared with criterion 4 (its learned mask sets).

    The 5k-step budget is the criterion's; the ramp takes the first 30%
    of it (a 10% ramp leaves distillation-propped stragglers half-open at
    this scale, which binarization then rounds past the exact-sparsity
    tolerance).
    """
    _start(3)
    jobs = [(teacher_path, t, "parameters", 5000, 1500, 0) for t in (0.2, 0.3, 0.4, 0.5)]
    with multiprocessing.Pool(2) as pool:
        results = list(pool.imap(workers.sparsity_run, jobs))
    return results


def test_criterion_1_hard_concrete_statistics():
    _start(1)
    details = []
    ok = True
    for i, alpha in enumerate((-3.0, -1.0, 0.0, 1.0, 3.0)):
        mc = monte_carlo_open_fraction(alpha, 100_000, seed=1000 + i)
        closed = float(expected_l0(ad.constant([alpha], dtype=np.float64)).data[0])
        ok &= abs(mc - closed) < 0.005
        details.append(f"a={alpha:+.0f}: |{mc:.4f}-{closed:.4f}|={abs(mc - closed):.4f}")
        if alpha == 0.0:
            ok &= abs(mc - 11.0 / 12.0) < 0.005
    _finish(1, ok, "; ".join(details), 10)


def test_criterion_2_gradient_suite():
    _start(2)
    failures = []

    # (a) every autodiff primitive against central finite differences
    from test_autodiff import _primitive_cases, rel_err
    rng = np.random.default_rng(7)
    for name, build, leaves in _primitive_cases(rng):
        out = build()
        loss = ad.sum_(ad.mul(out, out)) if out.data.size > 1 else out
        ad.backward(loss)
        for k, leaf in enumerate(leaves):
            def fn(t, leaf=leaf):
                keep = leaf.data
                leaf.data = t.data
                try:
                    o = build()
                    return ad.sum_(ad.mul(o, o)) if o.data.size > 1 else o
                finally:
                    leaf.data = keep
            fd = ad.finite_difference_gradient(fn, leaf, h=1e-6)
            err = rel_err(leaf.grad, fd)
            if err >= 1e-3:
                failures.append(f"{name}[{k}]={err:.1e}")
            leaf.grad = None

    # (b) full pipeline gradient with frozen noise, float64
    cfg = ConformerConfig(num_layers=2, hidden=8, num_heads=2, ffn_dim=12, conv_kernel=3,
                          input_dim=4, num_classes=4)
    task = TaskSpec(num_classes=4, seq_len=6, feature_dim=4, seed=3)
    model = init_model(cfg, seed=2).astype(np.float64)
    teacher = init_model(cfg, seed=5).astype(np.float64).detached()
    masks = init_alpha(cfg, seed=4).astype(np.float64)
    budget = SparsityBudget.for_config(cfg, 0.4)
    kd = KDState.identity(cfg.hidden, cfg.num_layers, dtype=np.float64)
    lag = LagrangianState.zeros(dtype=np.float64)
    lag.lam1.data = np.asarray(0.7)
    lag.lam2.data = np.asarray(1.3)
    x, y = generate_batch(task, 2, 0)
    x = x.astype(np.float64)
    noise_rng = np.random.default_rng(9)
    noise = {f: noise_rng.uniform(0, 1, masks.alpha[f].data.shape) for f in masks.alpha}

    def pipeline_loss():
        gates = masks.gates("stochastic", noise)
        hiddens, logits = forward(model, x, masks=gates)
        task_term = ad.cross_entropy_with_logits(logits, y)
        current, _ = expected_size(masks, cfg)
        reg = lagrangian_penalty(ad.scale(current, 1.0 / budget.full_size), 0.6, lag)
        with ad.no_grad():
            t_hid, _ = forward(teacher, x, masks=None)
        return total_loss(task_term, reg, kd_loss(hiddens, t_hid, kd))

    loss = pipeline_loss()
    ad.backward(loss)
    targets = [(f"alpha.{fam}", masks.alpha[fam]) for fam in masks.alpha]
    targets += [("theta.w_in", model.params["layer0.ffn1.w_in"]),
                ("theta.w_dw", model.params["layer1.conv.w_dw"]),
                ("theta.w_q", model.params["layer0.attn.w_q"]),
                ("theta.norm_g", model.params["layer1.ffn2.norm.g"]),
                ("w_layer", kd.w_layer[0]),
                ("lambda1", lag.lam1), ("lambda2", lag.lam2)]
    for name, tensor in targets:
        base = tensor.data.copy()
        coord_rng = np.random.default_rng(abs(hash(name)) % 2**32)
        idx = coord_rng.choice(base.size, size=min(4, base.size), replace=False)
        for i in idx:
            h = 1e-5
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert.reshape(-1)[i] += sign * h
                tensor.data = pert
                vals.append(pipeline_loss().item())
                tensor.data = base
            fd = (vals[0] - vals[1]) / (2 * h)
            got = tensor.grad.reshape(-1)[i]
            rel = abs(got - fd) / max(1e-10, abs(got) + abs(fd))
            if rel >= 1e-3:
                failures.append(f"pipeline {name}[{i}]={rel:.1e}")
    _finish(2, not failures, f"primitive+pipeline gradients vs FD (worst offenders: {failures or 'none'})", 120)


def test_criterion_3_sparsity_convergence(sparsity_runs):
    details = []
    ok = True
    for res in sparsity_runs:
        e_err = abs(res["achieved_expected"] - res["target"])
        x_err = abs(res["exact_sparsity"] - res["target"])
        ok &= e_err <= 0.02 and x_err <= 0.03
        details.append(f"t={res['target']}: expected {res['achieved_expected']:.4f} exact {res['exact_sparsity']:.4f}")
    _finish(3, ok, "; ".join(details), 900)


def test_criterion_4_extraction_soundness(teacher_path, sparsity_runs):
    _start(4)
    from maskforge.model_io import load_dense_model
    model = load_dense_model(teacher_path)
    rng = np.random.default_rng(0)
    inputs = rng.standard_normal((100, 16, TOY.input_dim)).astype(np.float32)

    mask_sets = []
    for seed in range(20):
        r = np.random.default_rng(500 + seed)
        vals = {fam: (r.random(shape) > 0.35).astype(np.float64)
                for fam, shape in mask_shapes(TOY).items()}
        vals["hid_global"][0] = 1.0
        mask_sets.append(BinaryMaskSet.from_gate_values(vals, TOY.num_layers))
    for res in sparsity_runs:  # the four learned mask sets from criterion 3
        alphas = HardConcreteMaskSet(
            alpha={f: ad.Tensor(a, requires_grad=False) for f, a in res["alpha"].items()},
            num_layers=TOY.num_layers)
        mask_sets.append(binarize_and_fold(alphas))

    worst = 0.0
    counts_ok = True
    for bm in mask_sets:
        cm = extract(model, bm)
        counts_ok &= cm.num_encoder_parameters() == exact_size(bm, TOY)[0]
        for lo in range(0, 100, 25):
            chunk = inputs[lo : lo + 25]
            _, masked = forward(model, chunk, masks=bm)
            _, compact = forward_compact(cm, chunk)
            worst = max(worst, float(np.abs(compact - masked.data).max()))
    ok = worst <= 1e-4 and counts_ok
    _finish(4, ok, f"{len(mask_sets)} mask sets, worst |masked-extracted| = {worst:.2e}, counts equal: {counts_ok}", 120)


def test_criterion_5_flops_budget_mode(teacher_path):
    # the expected-FLOPs fraction locks onto the target well before 3k
    # steps; 4k keeps this single run inside the 5-minute budget
    _start(5)
    res = workers.sparsity_run((teacher_path, 0.3, "flops", 4000, 500, 0))
    alphas = HardConcreteMaskSet(
        alpha={f: ad.Tensor(a, requires_grad=False) for f, a in res["alpha"].items()},
        num_layers=TOY.num_layers)
    dense = dense_flops(TOY, TASK.seq_len)
    achieved_fraction = expected_flops(alphas, TOY, TASK.seq_len).item() / dense
    bin_masks = binarize_and_fold(alphas)
    vals = {f: np.asarray(bin_masks.retention[f], dtype=np.float64) for f in bin_masks.retention}
    extracted_flops = flops_from_gate_values(vals, TOY, TASK.seq_len)
    ok = abs(achieved_fraction - 0.7) <= 0.02 and extracted_flops < dense
    _finish(5, ok, f"expected FLOPs fraction {achieved_fraction:.4f} (target 0.7); "
                   f"extracted {extracted_flops:.3e} < dense {dense:.3e}", 300)


def test_criterion_6_quality_vs_omp(teacher_path):
    _start(6)
    jobs = [(teacher_path, 0.5, 1000, seed) for seed in (0, 1, 2)]
    with multiprocessing.Pool(2) as pool:
        results = list(pool.imap(workers.quality_pair_run, jobs))
    wins = sum(1 for r in results if r["ours_acc"] >= r["omp_acc"])
    detail = "; ".join(
        f"seed {r['seed']}: ours {r['ours_acc']:.3f} (sp {r['ours_exact_sparsity']:.2f}) "
        f"vs omp {r['omp_acc']:.3f} (sp {r['omp_exact_sparsity']:.2f})" for r in results)
    _finish(6, wins >= 2, f"wins {wins}/3; {detail}", 600)


def test_criterion_7_kd_ablation(teacher_path):
    _start(7)
    jobs = [(teacher_path, 0.5, 1000, seed) for seed in (0, 1, 2)]
    with multiprocessing.Pool(2) as pool:
        results = list(pool.imap(workers.kd_ablation_run, jobs))
    wins = sum(1 for r in results if r["kd_loss"] <= r["no_kd_loss"])
    detail = "; ".join(
        f"seed {r['seed']}: kd {r['kd_loss']:.4f} vs no-kd {r['no_kd_loss']:.4f}" for r in results)
    _finish(7, wins >= 2, f"KD at-or-below no-KD in {wins}/3; {detail}", 600)


def test_criterion_8_schedule_and_determinism(tmp_path):
    _start(8)
    ok = sparsity_schedule(0, 500, 0.5) == 0.0
    ok &= sparsity_schedule(500, 500, 0.5) == 0.5
    ok &= sparsity_schedule(250, 500, 0.5) == 0.25

    assert os.environ.get("MASKFORGE_THREADS", "1") == "1"
    config = tmp_path / "config.json"
    config.write_text(
        '{"model": {"num_layers": 2, "hidden": 16, "num_heads": 2, "ffn_dim": 24,'
        ' "conv_kernel": 3, "input_dim": 8, "num_classes": 4},'
        ' "task": {"num_classes": 4, "seq_len": 16, "feature_dim": 8},'
        ' "trainer": {"total_steps": 200, "warmup_steps": 20, "batch_size": 4, "teacher_steps": 50}}')
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        rc = cli_main(["prune", "--target-sparsity", "0.4", "--config", str(config),
                       "--out", str(out), "--seed", "3"])
        ok &= rc == 0
        outs.append(out)
    identical = []
    for artifact in ("prune_metrics.csv", "masks.cpk", "student.cpk", "binary_masks.cpk", "teacher.cpk"):
        identical.append((outs[0] / artifact).read_bytes() == (outs[1] / artifact).read_bytes())
    ok &= all(identical)
    _finish(8, ok, f"schedule exact; rerun artifacts bit-identical: {identical}", 300)


def test_prune_train_default_warmup_example(teacher_path):
    # module-level contract: at the documented defaults (10% ramp), the
    # achieved *expected* sparsity lands within 0.02 of a 0.5 target
    res = workers.sparsity_run((teacher_path, 0.5, "parameters", 5000, 500, 0))
    err = abs(res["achieved_expected"] - 0.5)
    print(f"\n[module example] 5k steps / 500 warmup: expected sparsity "
          f"{res['achieved_expected']:.4f} (err {err:.4f})", flush=True)
    assert err <= 0.02


def test_criterion_9_accounting_self_consistency(teacher_path):
    _start(9)
    from maskforge.model_io import load_dense_model
    model = load_dense_model(teacher_path)
    ok = True
    for seed in range(50):
        r = np.random.default_rng(900 + seed)
        vals = {fam: (r.random(shape) > r.uniform(0.1, 0.6)).astype(np.float64)
                for fam, shape in mask_shapes(TOY).items()}
        vals["hid_global"][0] = 1.0
        bm = BinaryMaskSet.from_gate_values(vals, TOY.num_layers)
        exact_total, _ = exact_size(bm, TOY)
        expected_total, _ = expected_size(vals, TOY)
        extracted = extract(model, bm).num_encoder_parameters()
        ok &= round(expected_total.item()) == exact_total == extracted
    _finish(9, ok, "expected_size@binary == exact_size == extracted count for 50 mask sets", 60)
