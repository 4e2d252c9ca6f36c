"""AdamW optimization, dense teacher training, and the prune-train loop.

The prune-train loop runs three AdamW optimizers per step off one
backward pass: model weights and the KD transform at 3e-4, mask logits
at 1e-2, and the Lagrange multipliers at 1e-2 with gradient *ascent*
(equivalently, a negative learning rate). Weight decay touches weight
matrices only, never mask logits, multipliers, biases, or norm scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .accounting import SparsityBudget, expected_flops, expected_size
from .autodiff import Tensor
from .data import TaskSpec, generate_batch
from .kernels import adamw_update
from .masks import HardConcreteMaskSet, init_alpha
from .model import ConformerConfig, ConformerEncoderModel, forward, init_model
from .objective import KDState, LagrangianState, kd_loss, lagrangian_penalty, sparsity_schedule, total_loss


class NonFiniteGradientError(RuntimeError):
    pass


METRICS_HEADER = "step,task_loss,kd_loss,reg_loss,expected_sparsity,target_sparsity,lambda1,lambda2"


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam over a fixed parameter group."""

    params: list  # (name, Tensor, decay: bool)
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    maximize: bool = False
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(p.data.size, dtype=p.data.dtype) for _, p, _ in self.params]
            self.v = [np.zeros(p.data.size, dtype=p.data.dtype) for _, p, _ in self.params]

    def step(self) -> None:
        adamw_step(self)

    def zero_grad(self) -> None:
        for _, p, _ in self.params:
            p.grad = None


def adamw_step(state: AdamWState) -> None:
    """One in-place update with bias correction; rejects non-finite gradients."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for (name, p, decay), m, v in zip(state.params, state.m, state.v):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = np.ascontiguousarray(g).reshape(-1)
        ok = adamw_update(flat, gflat, m, v, state.lr, state.beta1, state.beta2, state.eps,
                          c1, c2, state.weight_decay if decay else 0.0, state.maximize)
        if not ok:
            raise NonFiniteGradientError(f"adamw_step: non-finite gradient for {name}")


@dataclass
class TrainerConfig:
    total_steps: int = 5000
    warmup_steps: int = 500
    batch_size: int = 8
    seed: int = 0
    teacher_steps: int = 2000
    lr_model: float = 3e-4
    lr_masks: float = 1e-2
    lr_lagrangian: float = 1e-2
    weight_decay: float = 0.01
    enable_kd: bool = True
    head_only_pruning: bool = False
    disable_hidden_masks: bool = False
    kd_per_layer: bool = False

    def validate(self) -> "TrainerConfig":
        if self.warmup_steps > self.total_steps:
            raise ValueError("TrainerConfig: warmup_steps must be <= total_steps")
        if self.warmup_steps < 1 or self.batch_size < 1:
            raise ValueError("TrainerConfig: warmup_steps and batch_size must be >= 1")
        return self

    def mask_trainable(self) -> dict[str, bool]:
        if self.head_only_pruning:
            keep = {"head"}
        else:
            keep = {"head", "ffn1", "ffn2", "conv", "hid_local", "hid_global"}
            if self.disable_hidden_masks:
                keep -= {"hid_local", "hid_global"}
        return {f: f in keep for f in ("head", "ffn1", "ffn2", "conv", "hid_local", "hid_global")}


def train_dense(model_config: ConformerConfig, task: TaskSpec, cfg: TrainerConfig,
                steps: int | None = None, model: ConformerEncoderModel | None = None):
    """Train the unmasked teacher on the synthetic task; returns (model, loss curve)."""
    cfg.validate()
    steps = cfg.teacher_steps if steps is None else steps
    if model is None:
        model = init_model(model_config, seed=cfg.seed)
    opt = AdamWState(params=list(model.parameters()), lr=cfg.lr_model, weight_decay=cfg.weight_decay)
    curve = []
    for step in range(steps):
        x, y = generate_batch(task, cfg.batch_size, step, stream="train")
        _, logits = forward(model, x, masks=None)
        loss = ad.cross_entropy_with_logits(logits, y)
        val = loss.item()
        if not math.isfinite(val):
            raise RuntimeError(f"train_dense: non-finite loss {val} at step {step}")
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
        curve.append(val)
    return model, curve


def finetune_masked(model: ConformerEncoderModel, gate_arrays: dict[str, np.ndarray],
                    task: TaskSpec, cfg: TrainerConfig, steps: int):
    """Task-only fine-tuning with fixed gates (used after one-shot pruning)."""
    gates = {fam: ad.constant(a.astype(np.float32)) for fam, a in gate_arrays.items()}
    opt = AdamWState(params=list(model.parameters()), lr=cfg.lr_model, weight_decay=cfg.weight_decay)
    curve = []
    for step in range(steps):
        x, y = generate_batch(task, cfg.batch_size, step, stream="finetune")
        _, logits = forward(model, x, masks=gates)
        loss = ad.cross_entropy_with_logits(logits, y)
        if not math.isfinite(loss.item()):
            raise RuntimeError(f"finetune_masked: non-finite loss at step {step}")
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
        curve.append(loss.item())
    return model, curve


@dataclass
class PruneResult:
    model: ConformerEncoderModel
    masks: HardConcreteMaskSet
    kd: KDState | None
    lagrangian: LagrangianState
    metrics: list[dict]

    def metrics_csv(self) -> str:
        lines = [METRICS_HEADER]
        for row in self.metrics:
            lines.append(
                f"{row['step']},{row['task_loss']!r},{row['kd_loss']!r},{row['reg_loss']!r},"
                f"{row['expected_sparsity']!r},{row['target_sparsity']!r},{row['lambda1']!r},{row['lambda2']!r}"
            )
        return "\n".join(lines) + "\n"


def prune_train(teacher: ConformerEncoderModel, task: TaskSpec, cfg: TrainerConfig,
                budget: SparsityBudget) -> PruneResult:
    """Jointly learn masks and weights under the scheduled sparsity budget.

    Per step: fresh-noise mask sample, student forward, no-grad teacher
    forward (when KD is on), one backward pass, then the three optimizer
    updates. The metrics log has one row per step.
    """
    cfg.validate()
    config = teacher.config
    student = teacher.clone()
    teacher_ro = teacher.detached()
    masks = init_alpha(config, seed=cfg.seed, trainable=cfg.mask_trainable())
    kd = KDState.identity(config.hidden, config.num_layers, per_layer=cfg.kd_per_layer) if cfg.enable_kd else None
    lag = LagrangianState.zeros()

    model_params = list(student.parameters())
    if kd is not None:
        model_params += [(n, t, True) for n, t in kd.tensors()]
    opt_model = AdamWState(params=model_params, lr=cfg.lr_model, weight_decay=cfg.weight_decay)
    opt_masks = AdamWState(params=[(n, t, False) for n, t in masks.trainable_tensors()], lr=cfg.lr_masks)
    opt_lag = AdamWState(params=[(n, t, False) for n, t in lag.tensors()], lr=cfg.lr_lagrangian, maximize=True)

    noise_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x6E6F69])))
    metrics = []
    for step in range(cfg.total_steps):
        s_target = sparsity_schedule(step, cfg.warmup_steps, budget.target_sparsity)
        x, y = generate_batch(task, cfg.batch_size, step, stream="prune")

        noise = masks.sample_noise(noise_rng)
        gates = masks.gates("stochastic", noise)
        student_hiddens, logits = forward(student, x, masks=gates)
        task_term = ad.cross_entropy_with_logits(logits, y)

        if budget.budget_mode == "parameters":
            current, _ = expected_size(masks, config)
        else:
            current = expected_flops(masks, config, budget.seq_len)
        current_frac = ad.scale(current, 1.0 / budget.full_size)
        reg_term = lagrangian_penalty(current_frac, 1.0 - s_target, lag)

        if kd is not None:
            with ad.no_grad():
                teacher_hiddens, _ = forward(teacher_ro, x, masks=None, need_logits=False)
            kd_term = kd_loss(student_hiddens, teacher_hiddens, kd)
        else:
            kd_term = ad.constant(np.zeros((), dtype=np.float32))

        loss = total_loss(task_term, reg_term, kd_term)
        if not math.isfinite(loss.item()):
            raise RuntimeError(f"prune_train: non-finite loss at step {step}")
        ad.backward(loss)
        opt_model.step()
        opt_masks.step()
        opt_lag.step()
        opt_model.zero_grad()
        opt_masks.zero_grad()
        opt_lag.zero_grad()

        metrics.append({
            "step": step,
            "task_loss": task_term.item(),
            "kd_loss": kd_term.item(),
            "reg_loss": reg_term.item(),
            "expected_sparsity": 1.0 - current_frac.item(),
            "target_sparsity": s_target,
            "lambda1": lag.lam1.item(),
            "lambda2": lag.lam2.item(),
        })
    return PruneResult(model=student, masks=masks, kd=kd, lagrangian=lag, metrics=metrics)


def achieved_expected_sparsity(masks: HardConcreteMaskSet, config: ConformerConfig,
                               budget: SparsityBudget) -> float:
    if budget.budget_mode == "parameters":
        total, _ = expected_size(masks, config)
    else:
        total = expected_flops(masks, config, budget.seq_len)
    return 1.0 - total.item() / budget.full_size


def evaluate(model, masks, feats: np.ndarray, labels: np.ndarray, batch_size: int = 32):
    """Frame accuracy and mean task loss; ``model`` may be dense or extracted."""
    if feats.shape[0] == 0:
        raise ValueError("evaluate: empty dataset")
    from .extraction import CompactModel, forward_compact  # local import to avoid a cycle

    n = feats.shape[0]
    correct = 0
    total_frames = 0
    loss_sum = 0.0
    with ad.no_grad():
        for lo in range(0, n, batch_size):
            xb = feats[lo : lo + batch_size]
            yb = labels[lo : lo + batch_size]
            if isinstance(model, CompactModel):
                _, logits = forward_compact(model, xb)
                logits_t = ad.constant(logits)
            else:
                _, logits_t = forward(model, xb, masks=masks, mode="deterministic")
            loss = ad.cross_entropy_with_logits(logits_t, yb)
            pred = logits_t.data.argmax(axis=-1)
            correct += int((pred == yb).sum())
            total_frames += yb.size
            loss_sum += loss.item() * yb.size
    return correct / total_frames, loss_sum / total_frames
