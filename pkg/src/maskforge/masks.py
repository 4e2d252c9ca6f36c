"""Stochastic binary gates via the hard concrete distribution.

A gate is a stretched, clamped sigmoid of logistic noise around a
learnable logit ``alpha``: values land in [0,1] with point masses at
exactly 0 and 1, so expected-L0 (the probability of a nonzero gate) is
differentiable while sampled gates can switch units fully off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STRETCH_LO = -0.1
STRETCH_HI = 1.1
# log(-lo/hi) = -log(11); gates are open with probability sigmoid(alpha + log 11)
LOG_RATIO = math.log(-STRETCH_LO / STRETCH_HI)
U_EPS = 1e-6

FAMILIES = ("head", "ffn1", "ffn2", "conv", "hid_local", "hid_global")


def sample_mask(alpha: Tensor, u: Tensor) -> Tensor:
    """Sample gates from uniform noise ``u``; differentiable in ``alpha``.

    t = sigmoid(logit(u) + alpha); z = clamp(t*(hi-lo) + lo, 0, 1).
    """
    if alpha.data.shape != u.data.shape:
        raise ad.ShapeError(f"sample_mask: alpha {alpha.data.shape} vs noise {u.data.shape}")
    un = np.clip(u.data, U_EPS, 1.0 - U_EPS)
    noise_logit = ad.constant(np.log(un / (1.0 - un)), dtype=alpha.data.dtype)
    t = ad.sigmoid(ad.add(noise_logit, alpha))
    return ad.clamp(ad.scale(t, STRETCH_HI - STRETCH_LO, STRETCH_LO), 0.0, 1.0)


def deterministic_mask(alpha: Tensor) -> Tensor:
    """Noise-free gate value (u = 0.5); used at evaluation time."""
    t = ad.sigmoid(alpha)
    return ad.clamp(ad.scale(t, STRETCH_HI - STRETCH_LO, STRETCH_LO), 0.0, 1.0)


def expected_l0(alpha: Tensor) -> Tensor:
    """P(gate != 0) elementwise: sigmoid(alpha + log 11)."""
    return ad.sigmoid(ad.scale(alpha, 1.0, -LOG_RATIO))


@dataclass
class HardConcreteMaskSet:
    """All mask logits for one encoder: one vector per prunable family.

    Shapes follow the model configuration: head (L,H), ffn1/ffn2 (L,f),
    conv (L,), hid_local (L,d), hid_global (d,). Families left out of
    ``trainable`` contribute constant all-ones gates (ablation surface).
    """

    alpha: dict[str, Tensor]
    num_layers: int
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for fam in FAMILIES:
            self.trainable.setdefault(fam, True)

    def trainable_tensors(self) -> list[tuple[str, Tensor]]:
        return [(f, self.alpha[f]) for f in FAMILIES if self.trainable[f]]

    def sample_noise(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {
            f: rng.uniform(0.0, 1.0, size=self.alpha[f].data.shape).astype(np.float32)
            for f in FAMILIES
            if self.trainable[f]
        }

    def gates(self, mode: str = "deterministic", noise: dict[str, np.ndarray] | None = None) -> dict[str, Tensor]:
        """Gate tensors per family, graph-connected to the trainable alphas.

        mode 'stochastic' needs ``noise`` (one uniform array per trainable
        family, from :meth:`sample_noise` or recorded for reproducibility);
        'deterministic' is the noise-free value.
        """
        out = {}
        for fam in FAMILIES:
            a = self.alpha[fam]
            if not self.trainable[fam]:
                out[fam] = ad.constant(np.ones_like(a.data))
            elif mode == "stochastic":
                if noise is None or fam not in noise:
                    raise ValueError(f"gates: stochastic mode needs noise for family {fam!r}")
                out[fam] = sample_mask(a, ad.constant(noise[fam], dtype=a.data.dtype))
            elif mode == "deterministic":
                out[fam] = deterministic_mask(a)
            else:
                raise ValueError(f"gates: unknown mode {mode!r}")
        return out

    def expected(self) -> dict[str, Tensor]:
        """Expected-L0 per family (frozen families count as fully retained)."""
        out = {}
        for fam in FAMILIES:
            a = self.alpha[fam]
            if self.trainable[fam]:
                out[fam] = expected_l0(a)
            else:
                out[fam] = ad.constant(np.ones_like(a.data))
        return out

    def astype(self, dtype) -> "HardConcreteMaskSet":
        alpha = {f: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for f, t in self.alpha.items()}
        return HardConcreteMaskSet(alpha=alpha, num_layers=self.num_layers, trainable=dict(self.trainable))


def mask_shapes(config) -> dict[str, tuple]:
    return {
        "head": (config.num_layers, config.num_heads),
        "ffn1": (config.num_layers, config.ffn_dim),
        "ffn2": (config.num_layers, config.ffn_dim),
        "conv": (config.num_layers,),
        "hid_local": (config.num_layers, config.hidden),
        "hid_global": (config.hidden,),
    }


def init_alpha(config, mean: float = 2.0, std: float = 0.1, seed: int = 0,
               trainable: dict[str, bool] | None = None) -> HardConcreteMaskSet:
    """Draw every alpha i.i.d. Normal(mean, std) from a seeded stream.

    The default mean of 2.0 opens every gate with probability ~0.988,
    a near-dense start.
    """
    if std < 0:
        raise ValueError("init_alpha: std must be nonnegative")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6D61736B])))
    alpha = {}
    for fam, shape in mask_shapes(config).items():
        a = rng.normal(mean, std, size=shape).astype(np.float32) if std > 0 else np.full(shape, mean, dtype=np.float32)
        alpha[fam] = Tensor(a, requires_grad=True)
    return HardConcreteMaskSet(alpha=alpha, num_layers=config.num_layers, trainable=dict(trainable or {}))


def monte_carlo_open_fraction(alpha_value: float, num_samples: int, seed: int = 0) -> float:
    """Empirical P(gate > 0): the independent oracle for expected_l0."""
    rng = np.random.Generator(np.random.PCG64(seed))
    u = np.clip(rng.uniform(0.0, 1.0, size=num_samples), U_EPS, 1.0 - U_EPS)
    t = 1.0 / (1.0 + np.exp(-(np.log(u / (1.0 - u)) + alpha_value)))
    z = np.clip(t * (STRETCH_HI - STRETCH_LO) + STRETCH_LO, 0.0, 1.0)
    return float(np.mean(z > 0))
