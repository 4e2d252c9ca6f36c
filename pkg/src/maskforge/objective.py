"""Training objective: task loss + Lagrangian sparsity penalty + layerwise KD.

The sparsity constraint is imposed on retained *fractions* (current and
target both divided by the dense size) so the multiplier learning rate
is independent of model scale. The combined loss weights the penalty
with a fixed factor of 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LagrangianState:
    """Two trainable multipliers, unconstrained in sign."""

    lam1: Tensor
    lam2: Tensor

    @classmethod
    def zeros(cls, dtype=np.float32) -> "LagrangianState":
        return cls(
            lam1=Tensor(np.zeros((), dtype=dtype), requires_grad=True),
            lam2=Tensor(np.zeros((), dtype=dtype), requires_grad=True),
        )

    def tensors(self):
        return [("lambda1", self.lam1), ("lambda2", self.lam2)]


@dataclass
class KDState:
    """Learned feature transform(s) applied to teacher hidden states.

    A single matrix is shared across layers by default; ``per_layer``
    keeps one per encoder layer (ablation surface).
    """

    w_layer: list[Tensor]
    per_layer: bool = False

    @classmethod
    def identity(cls, hidden: int, num_layers: int, per_layer: bool = False, dtype=np.float32) -> "KDState":
        n = num_layers if per_layer else 1
        mats = [Tensor(np.eye(hidden, dtype=dtype), requires_grad=True) for _ in range(n)]
        return cls(w_layer=mats, per_layer=per_layer)

    def transform_for(self, layer: int) -> Tensor:
        return self.w_layer[layer] if self.per_layer else self.w_layer[0]

    def tensors(self):
        return [(f"w_layer{idx}", t) for idx, t in enumerate(self.w_layer)]


def lagrangian_penalty(current: Tensor, target: float, lag: LagrangianState) -> Tensor:
    """lam1*(current - target) + lam2*(current - target)^2, all scalars.

    ``current`` must already be normalized to retained-fraction scale.
    """
    v = ad.scale(current, 1.0, -float(target))
    return ad.add(ad.mul(lag.lam1, v), ad.mul(lag.lam2, ad.mul(v, v)))


def kd_loss(student_hiddens: list[Tensor], teacher_hiddens: list[Tensor], kd: KDState) -> Tensor:
    """Mean over layers of MSE(student, W_layer @ teacher features).

    Teacher hidden states are treated as constants; gradient reaches the
    student weights, the masks, and ``W_layer`` only.
    """
    if len(student_hiddens) != len(teacher_hiddens):
        raise ad.ShapeError(
            f"kd_loss: {len(student_hiddens)} student layers vs {len(teacher_hiddens)} teacher layers"
        )
    total = None
    for i, (hs, ht) in enumerate(zip(student_hiddens, teacher_hiddens)):
        if hs.data.shape != ht.data.shape:
            raise ad.ShapeError(f"kd_loss: layer {i} shapes {hs.data.shape} vs {ht.data.shape}")
        ht = ht.detach()
        term = ad.mse(hs, ad.matmul(ht, kd.transform_for(i)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(student_hiddens))


def total_loss(task: Tensor, reg: Tensor, kd: Tensor) -> Tensor:
    """task + 1.0 * reg + kd (the penalty weight is fixed at 1)."""
    return ad.add(ad.add(task, reg), kd)


def sparsity_schedule(step: int, warmup_steps: int, s_final: float) -> float:
    """Linear ramp from 0 to ``s_final`` over ``warmup_steps``, then flat."""
    if step < 0:
        raise ValueError(f"sparsity_schedule: negative step {step}")
    if warmup_steps < 1:
        raise ValueError(f"sparsity_schedule: warmup_steps must be >= 1, got {warmup_steps}")
    if not (0.0 <= s_final < 1.0):
        raise ValueError(f"sparsity_schedule: target {s_final} outside [0,1)")
    return min(1.0, step / warmup_steps) * s_final
