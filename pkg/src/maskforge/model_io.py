"""Save/load helpers layered on the CPK1 container.

Dense models, compact (extracted) models, and mask sets all share the
container; structural metadata that is not a float tensor (configs,
layer geometry) lives in a JSON sidecar with the same stem.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .extraction import BinaryMaskSet, CompactAttn, CompactConv, CompactFfn, CompactLayer, CompactModel
from .masks import FAMILIES, HardConcreteMaskSet
from .model import ConformerConfig, ConformerEncoderModel, init_model


def _sidecar(path) -> Path:
    return Path(path).with_suffix(Path(path).suffix + ".json")


def save_dense_model(model: ConformerEncoderModel, path) -> None:
    save_checkpoint({f"model.{n}": t.data for n, t in model.params.items()}, path)
    with open(_sidecar(path), "w", encoding="utf-8") as fh:
        json.dump({"kind": "dense", "config": dataclasses.asdict(model.config)}, fh, indent=2)
        fh.write("\n")


def load_dense_model(path) -> ConformerEncoderModel:
    with open(_sidecar(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("kind") != "dense":
        raise ValueError(f"{path}: not a dense model checkpoint")
    config = ConformerConfig(**meta["config"]).validate()
    model = init_model(config, seed=0)
    arrays = load_checkpoint(path)
    model.load_state_arrays({n[len("model."):]: a for n, a in arrays.items()})
    return model


def save_masks(masks: HardConcreteMaskSet, path) -> None:
    named = {f"alpha.{fam}": masks.alpha[fam].data for fam in FAMILIES}
    for fam in FAMILIES:
        named[f"trainable.{fam}"] = np.asarray(1.0 if masks.trainable[fam] else 0.0, dtype=np.float32)
    save_checkpoint(named, path)


def load_masks(path, num_layers: int) -> HardConcreteMaskSet:
    from .autodiff import Tensor

    arrays = load_checkpoint(path)
    alpha = {fam: Tensor(arrays[f"alpha.{fam}"], requires_grad=True) for fam in FAMILIES}
    trainable = {fam: bool(arrays[f"trainable.{fam}"] > 0.5) for fam in FAMILIES}
    return HardConcreteMaskSet(alpha=alpha, num_layers=num_layers, trainable=trainable)


def save_binary_masks(bin_masks: BinaryMaskSet, path) -> None:
    save_checkpoint(bin_masks.to_arrays(), path)


def load_binary_masks(path, num_layers: int) -> BinaryMaskSet:
    return BinaryMaskSet.from_arrays(load_checkpoint(path), num_layers)


def is_binary_mask_file(path) -> bool:
    arrays = load_checkpoint(path)
    return any(k.startswith("bin.retention.") for k in arrays)


_FFN_KEYS = ("norm_g", "norm_b", "w_in", "b_in", "w_out", "b_out")
_ATTN_KEYS = ("norm_g", "norm_b", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o")
_CONV_KEYS = ("norm_g", "norm_b", "w_pw1", "b_pw1", "w_dw", "b_dw", "w_pw2", "b_pw2", "ln_g", "ln_b")


def save_compact_model(cm: CompactModel, path) -> None:
    named = {
        "pos_scale": cm.pos_scale,
        "in_w": cm.in_w, "in_b": cm.in_b,
        "final_g": cm.final_g, "final_b": cm.final_b,
        "cls_w": cm.cls_w, "cls_b": cm.cls_b,
    }
    meta_layers = []
    for i, layer in enumerate(cm.layers):
        for key in _FFN_KEYS:
            named[f"layer{i}.ffn1.{key}"] = getattr(layer.ffn1, key)
            named[f"layer{i}.ffn2.{key}"] = getattr(layer.ffn2, key)
        for key in _ATTN_KEYS:
            named[f"layer{i}.attn.{key}"] = getattr(layer.attn, key)
        if layer.conv is not None:
            for key in _CONV_KEYS:
                named[f"layer{i}.conv.{key}"] = getattr(layer.conv, key)
        meta_layers.append({
            "hid_idx": [int(v) for v in layer.hid_idx],
            "num_heads": layer.attn.num_heads,
            "has_conv": layer.conv is not None,
        })
    save_checkpoint(named, path)
    meta = {
        "kind": "compact",
        "d_stream": cm.d_stream, "d_virtual": cm.d_virtual, "head_dim": cm.head_dim,
        "conv_kernel": cm.conv_kernel, "input_dim": cm.input_dim, "num_classes": cm.num_classes,
        "ln_eps": cm.ln_eps, "pos_dims": [int(v) for v in cm.pos_dims], "layers": meta_layers,
    }
    with open(_sidecar(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_compact_model(path) -> CompactModel:
    with open(_sidecar(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("kind") != "compact":
        raise ValueError(f"{path}: not a compact model checkpoint")
    arrays = load_checkpoint(path)
    layers = []
    for i, lm in enumerate(meta["layers"]):
        ffn1 = CompactFfn(**{k: arrays[f"layer{i}.ffn1.{k}"] for k in _FFN_KEYS})
        ffn2 = CompactFfn(**{k: arrays[f"layer{i}.ffn2.{k}"] for k in _FFN_KEYS})
        attn = CompactAttn(**{k: arrays[f"layer{i}.attn.{k}"] for k in _ATTN_KEYS}, num_heads=lm["num_heads"])
        conv = CompactConv(**{k: arrays[f"layer{i}.conv.{k}"] for k in _CONV_KEYS}) if lm["has_conv"] else None
        layers.append(CompactLayer(hid_idx=np.asarray(lm["hid_idx"], dtype=np.int64),
                                   ffn1=ffn1, attn=attn, conv=conv, ffn2=ffn2))
    return CompactModel(
        d_stream=meta["d_stream"], d_virtual=meta["d_virtual"], head_dim=meta["head_dim"],
        conv_kernel=meta["conv_kernel"], input_dim=meta["input_dim"], num_classes=meta["num_classes"],
        pos_dims=np.asarray(meta["pos_dims"], dtype=np.int64),
        pos_scale=arrays["pos_scale"], in_w=arrays["in_w"], in_b=arrays["in_b"],
        final_g=arrays["final_g"], final_b=arrays["final_b"],
        cls_w=arrays["cls_w"], cls_b=arrays["cls_b"], layers=layers, ln_eps=meta["ln_eps"],
    )


def load_any_model(path):
    with open(_sidecar(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return load_dense_model(path) if meta.get("kind") == "dense" else load_compact_model(path)
