"""Differentiable model-size and FLOPs accounting from gate expectations.

The per-module retained-parameter counts are derived from the actual
architecture so that the polynomial, evaluated at binary gate values,
equals the extracted model's enumerated parameter count exactly:

- an FFN channel costs one input row and one output column over the
  layer's retained hidden dims (2*E_g) plus its input bias;
- a head costs 4*head_dim columns/rows over retained hidden dims plus
  3*head_dim projection biases (the output projection has no bias);
- the conv module's internal channels are tied one-to-one to retained
  hidden dims: 3*E_g^2 pointwise weights, k*E_g depthwise taps, and
  (bias + norm) terms linear in E_g;
- per-module pre-norm parameters are owned by the hidden gates (and by
  the conv gate for the conv sub-block).

Totals cover encoder layers only; the input projection and classifier
are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masks import HardConcreteMaskSet, mask_shapes
from .model import MODULE_ORDER, ConformerConfig


@dataclass
class SparsityBudget:
    target_sparsity: float
    budget_mode: str = "parameters"  # parameters | flops
    full_size: float = 0.0
    seq_len: int = 64

    def __post_init__(self):
        if not (0.0 <= self.target_sparsity < 1.0):
            raise ValueError(f"SparsityBudget: target sparsity {self.target_sparsity} outside [0,1)")
        if self.budget_mode not in ("parameters", "flops"):
            raise ValueError(f"SparsityBudget: unknown budget mode {self.budget_mode!r}")

    @classmethod
    def for_config(cls, config: ConformerConfig, target_sparsity: float, budget_mode: str = "parameters", seq_len: int = 64):
        if budget_mode == "parameters":
            full = float(dense_size(config))
        else:
            full = float(dense_flops(config, seq_len))
        return cls(target_sparsity=target_sparsity, budget_mode=budget_mode, full_size=full, seq_len=seq_len)

    def target_size(self) -> float:
        return (1.0 - self.target_sparsity) * self.full_size


@dataclass
class SizeBreakdown:
    """Per (layer, module) retained counts plus per-layer hidden counts."""

    per_layer: np.ndarray  # (L, 4) in MODULE_ORDER
    hidden_counts: np.ndarray  # (L,) retained hidden dims per layer
    total: float

    def module_total(self, layer: int, module: str) -> float:
        return float(self.per_layer[layer, MODULE_ORDER.index(module)])


def _validate_values(values: dict[str, np.ndarray], config: ConformerConfig) -> None:
    shapes = mask_shapes(config)
    for fam, shape in shapes.items():
        if fam not in values:
            raise ValueError(f"mask values missing family {fam!r}")
        if values[fam].shape != shape:
            raise ValueError(f"mask family {fam!r}: shape {values[fam].shape} does not match config {shape}")


def _module_counts(values: dict[str, np.ndarray], config: ConformerConfig):
    """(L,4) per-module counts and (L,) E_g from gate values/expectations."""
    dh, k = config.head_dim, config.conv_kernel
    e_g = (values["hid_local"] * values["hid_global"][None, :]).sum(axis=1)
    c1 = values["ffn1"].sum(axis=1)
    c2 = values["ffn2"].sum(axis=1)
    heads = values["head"].sum(axis=1)
    conv = values["conv"]
    ffn1 = c1 * (2.0 * e_g + 1.0) + 3.0 * e_g
    ffn2 = c2 * (2.0 * e_g + 1.0) + 3.0 * e_g
    attn = 4.0 * dh * e_g * heads + 3.0 * dh * heads + 2.0 * e_g
    cnn = conv * (3.0 * e_g * e_g + (k + 8.0) * e_g)
    return np.stack([ffn1, attn, cnn, ffn2], axis=1), e_g


def size_from_gate_values(values: dict[str, np.ndarray], config: ConformerConfig) -> SizeBreakdown:
    """Evaluate the size polynomial at explicit gate values (0..1)."""
    _validate_values(values, config)
    per_layer, e_g = _module_counts(values, config)
    return SizeBreakdown(per_layer=per_layer, hidden_counts=e_g, total=float(per_layer.sum()))


def _mask_values(masks) -> dict[str, np.ndarray]:
    if isinstance(masks, HardConcreteMaskSet):
        return {fam: t.data.astype(np.float64) for fam, t in masks.expected().items()}
    if isinstance(masks, dict):
        return {fam: np.asarray(v, dtype=np.float64) for fam, v in masks.items()}
    return {fam: np.asarray(v, dtype=np.float64) for fam, v in masks.gate_arrays().items()}  # BinaryMaskSet


def expected_size(masks, config: ConformerConfig):
    """Differentiable expected retained parameter count.

    Returns (total Tensor, SizeBreakdown). ``masks`` may be a
    HardConcreteMaskSet (expectations of the gates), a BinaryMaskSet, or
    a dict of raw gate-value arrays.
    """
    breakdown = size_from_gate_values(_mask_values(masks), config)
    if isinstance(masks, HardConcreteMaskSet):
        e = masks.expected()
    else:
        vals = _mask_values(masks)
        e = {fam: ad.constant(v.astype(np.float32)) for fam, v in vals.items()}
    dh, k = config.head_dim, config.conv_kernel
    e_hd = ad.mul(e["hid_local"], e["hid_global"])
    e_g = ad.sum_(e_hd, axis=1)
    c1 = ad.sum_(e["ffn1"], axis=1)
    c2 = ad.sum_(e["ffn2"], axis=1)
    heads = ad.sum_(e["head"], axis=1)
    ffn1 = ad.add(ad.mul(c1, ad.scale(e_g, 2.0, 1.0)), ad.scale(e_g, 3.0))
    ffn2 = ad.add(ad.mul(c2, ad.scale(e_g, 2.0, 1.0)), ad.scale(e_g, 3.0))
    attn = ad.add(ad.scale(ad.mul(e_g, heads), 4.0 * dh), ad.add(ad.scale(heads, 3.0 * dh), ad.scale(e_g, 2.0)))
    cnn = ad.mul(e["conv"], ad.add(ad.scale(ad.mul(e_g, e_g), 3.0), ad.scale(e_g, float(k + 8))))
    total = ad.sum_(ad.add(ad.add(ffn1, attn), ad.add(cnn, ffn2)))
    return total, breakdown


def exact_size(binary_masks, config: ConformerConfig):
    """Integer retained count for binary masks; equals the extracted model's count."""
    values = _mask_values(binary_masks)
    retention = {}
    for fam, v in values.items():
        r = (v > 0).astype(np.int64)
        if not np.all((v == 0) | (v == 1)) and not _has_fold_scales(binary_masks):
            raise ValueError(f"exact_size: family {fam!r} has non-binary values and no fold scales")
        retention[fam] = r
    _validate_values({f: v.astype(np.float64) for f, v in retention.items()}, config)
    per_layer, e_g = _module_counts({f: v.astype(np.float64) for f, v in retention.items()}, config)
    per_layer = np.rint(per_layer).astype(np.int64)
    breakdown = SizeBreakdown(per_layer=per_layer, hidden_counts=np.rint(e_g).astype(np.int64), total=int(per_layer.sum()))
    return int(per_layer.sum()), breakdown


def _has_fold_scales(masks) -> bool:
    return hasattr(masks, "fold_scales")


def dense_size(config: ConformerConfig) -> int:
    ones = {fam: np.ones(s) for fam, s in mask_shapes(config).items()}
    return int(round(size_from_gate_values(ones, config).total))


def flops_from_gate_values(values: dict[str, np.ndarray], config: ConformerConfig, seq_len: int) -> float:
    """Per-sequence multiply-add count x2 at explicit gate values."""
    _validate_values(values, config)
    dh, k, T = config.head_dim, config.conv_kernel, seq_len
    e_g = (values["hid_local"] * values["hid_global"][None, :]).sum(axis=1)
    c12 = values["ffn1"].sum(axis=1) + values["ffn2"].sum(axis=1)
    heads = values["head"].sum(axis=1)
    conv = values["conv"]
    per_layer = (
        4.0 * T * e_g * c12
        + 8.0 * T * dh * e_g * heads
        + 4.0 * T * T * dh * heads
        + conv * (6.0 * T * e_g * e_g + 2.0 * T * k * e_g)
    )
    return float(per_layer.sum())


def expected_flops(masks, config: ConformerConfig, seq_len: int) -> Tensor:
    """Differentiable expected per-sequence FLOPs of the encoder layers.

    Counts matmul and depthwise-conv multiply-adds (x2), matching the
    forward-instrumentation oracle; a zero-length sequence costs zero.
    """
    if isinstance(masks, HardConcreteMaskSet):
        e = masks.expected()
    else:
        e = {fam: ad.constant(v.astype(np.float32)) for fam, v in _mask_values(masks).items()}
    dh, k, T = config.head_dim, config.conv_kernel, float(seq_len)
    e_g = ad.sum_(ad.mul(e["hid_local"], e["hid_global"]), axis=1)
    c12 = ad.add(ad.sum_(e["ffn1"], axis=1), ad.sum_(e["ffn2"], axis=1))
    heads = ad.sum_(e["head"], axis=1)
    ffn = ad.scale(ad.mul(e_g, c12), 4.0 * T)
    proj = ad.scale(ad.mul(e_g, heads), 8.0 * T * dh)
    attn = ad.scale(heads, 4.0 * T * T * dh)
    cnn = ad.mul(e["conv"], ad.add(ad.scale(ad.mul(e_g, e_g), 6.0 * T), ad.scale(e_g, 2.0 * T * k)))
    return ad.sum_(ad.add(ad.add(ffn, proj), ad.add(attn, cnn)))


def dense_flops(config: ConformerConfig, seq_len: int) -> float:
    ones = {fam: np.ones(s) for fam, s in mask_shapes(config).items()}
    return flops_from_gate_values(ones, config, seq_len)


def report_distribution(binary_masks, config: ConformerConfig) -> list[dict]:
    """Per-layer, per-module remaining ratios plus hidden-dim counts.

    Rows are dicts with keys layer, module, dense_params, retained_params,
    ratio; module 'hidden_local' rows carry retained hidden-dim counts.
    """
    total, breakdown = exact_size(binary_masks, config)
    ones = {fam: np.ones(s) for fam, s in mask_shapes(config).items()}
    dense = size_from_gate_values(ones, config)
    rows = []
    for i in range(config.num_layers):
        for m, module in enumerate(MODULE_ORDER):
            d = dense.per_layer[i, m]
            r = breakdown.per_layer[i, m]
            rows.append({
                "layer": i,
                "module": module,
                "dense_params": int(round(d)),
                "retained_params": int(r),
                "ratio": float(r / d) if d else 1.0,
            })
        rows.append({
            "layer": i,
            "module": "hidden_local",
            "dense_params": config.hidden,
            "retained_params": int(breakdown.hidden_counts[i]),
            "ratio": float(breakdown.hidden_counts[i] / config.hidden),
        })
    return rows


def write_report_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("layer,module,dense_params,retained_params,ratio\n")
        for r in rows:
            fh.write(f"{r['layer']},{r['module']},{r['dense_params']},{r['retained_params']},{r['ratio']:.6f}\n")


def sparsity_of(total, full_size: float) -> float:
    return 1.0 - float(total) / float(full_size)
