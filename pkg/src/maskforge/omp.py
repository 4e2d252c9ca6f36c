"""One-shot magnitude pruning over the same structured units.

Scores are L2 norms of the weights a unit owns, normalized by the
unit's weight count by default so a whole conv module competes fairly
with a single FFN channel. Units are removed lowest score first, with
the remaining budget recomputed after every removal, until the exact
retained size meets the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accounting import SparsityBudget, exact_size, flops_from_gate_values
from .extraction import BinaryMaskSet
from .masks import FAMILIES
from .model import ConformerEncoderModel

# deterministic tie order: layer index, then module, then unit index
_FAMILY_ORDER = {"ffn1": 0, "head": 1, "conv": 2, "ffn2": 3, "hid_local": 4, "hid_global": 5}


@dataclass(frozen=True)
class Unit:
    family: str
    layer: int  # -1 for the global hidden family
    index: int

    def sort_key(self):
        return (self.layer if self.layer >= 0 else 10**6, _FAMILY_ORDER[self.family], self.index)


def enumerate_units(config) -> list[Unit]:
    units = []
    for i in range(config.num_layers):
        units += [Unit("ffn1", i, c) for c in range(config.ffn_dim)]
        units += [Unit("head", i, j) for j in range(config.num_heads)]
        units.append(Unit("conv", i, 0))
        units += [Unit("ffn2", i, c) for c in range(config.ffn_dim)]
        units += [Unit("hid_local", i, d) for d in range(config.hidden)]
    units += [Unit("hid_global", -1, d) for d in range(config.hidden)]
    return units


def _owned_weights(model: ConformerEncoderModel, unit: Unit) -> list[np.ndarray]:
    cfg = model.config
    P = model.params
    d, dh, D = cfg.hidden, cfg.head_dim, cfg.hidden
    i, n = unit.layer, unit.index
    pre = f"layer{i}."
    if unit.family in ("ffn1", "ffn2"):
        f = unit.family
        return [P[pre + f + ".w_in"].data[:, n], P[pre + f + ".w_out"].data[n, :],
                P[pre + f + ".b_in"].data[n : n + 1]]
    if unit.family == "head":
        sl = slice(n * dh, (n + 1) * dh)
        return [P[pre + "attn.w_q"].data[:, sl], P[pre + "attn.w_k"].data[:, sl],
                P[pre + "attn.w_v"].data[:, sl], P[pre + "attn.w_o"].data[sl, :],
                P[pre + "attn.b_q"].data[sl], P[pre + "attn.b_k"].data[sl], P[pre + "attn.b_v"].data[sl]]
    if unit.family == "conv":
        return [P[pre + "conv.w_pw1"].data, P[pre + "conv.b_pw1"].data,
                P[pre + "conv.w_dw"].data, P[pre + "conv.b_dw"].data,
                P[pre + "conv.w_pw2"].data, P[pre + "conv.b_pw2"].data]
    if unit.family == "hid_local":
        out = []
        for f in ("ffn1", "ffn2"):
            out += [P[pre + f + ".w_in"].data[n, :], P[pre + f + ".w_out"].data[:, n],
                    P[pre + f + ".b_out"].data[n : n + 1]]
        out += [P[pre + "attn.w_q"].data[n, :], P[pre + "attn.w_k"].data[n, :],
                P[pre + "attn.w_v"].data[n, :], P[pre + "attn.w_o"].data[:, n]]
        out += [P[pre + "conv.w_pw1"].data[n, :], P[pre + "conv.w_pw1"].data[:, n],
                P[pre + "conv.w_pw1"].data[:, D + n], P[pre + "conv.w_dw"].data[n, :],
                P[pre + "conv.w_pw2"].data[n, :], P[pre + "conv.w_pw2"].data[:, n],
                P[pre + "conv.b_pw2"].data[n : n + 1], P[pre + "conv.b_dw"].data[n : n + 1]]
        return out
    if unit.family == "hid_global":
        out = []
        for i in range(cfg.num_layers):
            out += _owned_weights(model, Unit("hid_local", i, n))
        return out
    raise ValueError(f"unknown unit family {unit.family!r}")


def group_importance(model: ConformerEncoderModel, normalized: bool = True) -> dict[Unit, float]:
    """Per-unit L2 norm of owned weights, optionally divided by weight count."""
    scores = {}
    for unit in enumerate_units(model.config):
        chunks = _owned_weights(model, unit)
        sq = sum(float(np.sum(np.square(c, dtype=np.float64))) for c in chunks)
        count = sum(c.size for c in chunks)
        norm = float(np.sqrt(sq))
        scores[unit] = norm / count if normalized else norm
    return scores


def omp_prune(model: ConformerEncoderModel, budget: SparsityBudget, normalized: bool = True) -> BinaryMaskSet:
    """Greedy one-shot removal of lowest-importance units down to the budget."""
    config = model.config
    bin_masks = BinaryMaskSet.all_ones(config)
    scores = group_importance(model, normalized=normalized)
    order = sorted(scores.items(), key=lambda kv: (kv[1],) + kv[0].sort_key())

    def current_size() -> float:
        if budget.budget_mode == "parameters":
            return float(exact_size(bin_masks, config)[0])
        vals = {f: np.asarray(bin_masks.retention[f], dtype=np.float64) for f in FAMILIES}
        return flops_from_gate_values(vals, config, budget.seq_len)

    target = budget.target_size()
    pos = 0
    while current_size() > target:
        while pos < len(order):
            unit, _ = order[pos]
            pos += 1
            r = bin_masks.retention[unit.family]
            if unit.family == "hid_global":
                if r.sum() <= 1:
                    continue  # keep the model non-degenerate
                if r[unit.index] == 1:
                    break
            elif unit.family == "conv":
                if r[unit.layer] == 1:
                    break
            elif r[unit.layer, unit.index] == 1:
                break
        else:
            raise ValueError("omp_prune: budget infeasible for this granularity")
        if unit.family == "hid_global":
            bin_masks.retention[unit.family][unit.index] = 0
            bin_masks.fold_scales[unit.family][unit.index] = 0.0
        elif unit.family == "conv":
            bin_masks.retention[unit.family][unit.layer] = 0
            bin_masks.fold_scales[unit.family][unit.layer] = 0.0
        else:
            bin_masks.retention[unit.family][unit.layer, unit.index] = 0
            bin_masks.fold_scales[unit.family][unit.layer, unit.index] = 0.0
    return bin_masks
