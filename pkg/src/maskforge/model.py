"""Toy Conformer encoder with gate-injection points for structured pruning.

Each block is macaron-style: half-step FFN, multi-head self-attention,
a convolution module, and a second half-step FFN, each pre-normalized
and residual. Gates multiply exactly where extraction later slices:

- layer gate ``g_i = hid_local[i] * hid_global`` scales every module's
  read (after the pre-norm) and write (before the residual add);
- head gates scale per-head attention context;
- FFN channel gates scale the post-activation intermediate;
- the conv gate scales the whole conv branch, and ``g_i`` additionally
  zeroes the conv's internal channels around its layer norm so a dead
  hidden dim leaves no trace in the norm statistics;
- the embedding output and the classifier input are scaled by the
  global hidden gate.

Positions are sinusoidal absolute encodings added after the input
projection (no relative attention), and the conv module normalizes with
layer norm, so forwards are batch-size independent and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masks import HardConcreteMaskSet


@dataclass(frozen=True)
class ConformerConfig:
    num_layers: int = 4
    hidden: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    conv_kernel: int = 3
    input_dim: int = 16
    num_classes: int = 8

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    def validate(self) -> "ConformerConfig":
        for name in ("num_layers", "hidden", "num_heads", "ffn_dim", "conv_kernel", "input_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConformerConfig: {name} must be >= 1")
        if self.hidden % self.num_heads != 0:
            raise ValueError(f"ConformerConfig: hidden {self.hidden} not divisible by {self.num_heads} heads")
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"ConformerConfig: conv kernel {self.conv_kernel} must be odd")
        return self


MODULE_ORDER = ("ffn1", "attn", "cnn", "ffn2")


def sinusoid_positions(T: int, dim_indices: np.ndarray, total_dim: int, dtype=np.float32) -> np.ndarray:
    """Absolute sinusoidal encodings for the given original dim indices.

    ``total_dim`` fixes the frequency table, so a sliced model reproduces
    the dense model's encoding values at its retained dims.
    """
    t = np.arange(T, dtype=np.float64)[:, None]
    j = np.asarray(dim_indices, dtype=np.int64)[None, :]
    freq = np.power(10000.0, -2.0 * (j // 2) / total_dim)
    phase = t * freq
    pe = np.where(j % 2 == 0, np.sin(phase), np.cos(phase))
    return pe.astype(dtype)


class ConformerEncoderModel:
    """Dense encoder weights, one flat name -> Tensor registry."""

    def __init__(self, config: ConformerConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self):
        """Yield (name, tensor, decay) with weight decay on matrices only."""
        for name, t in self.params.items():
            yield name, t, t.data.ndim == 2 and ".norm" not in name and ".ln" not in name

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def astype(self, dtype) -> "ConformerEncoderModel":
        params = {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return ConformerEncoderModel(self.config, params)

    def clone(self) -> "ConformerEncoderModel":
        return self.astype(next(iter(self.params.values())).data.dtype)

    def detached(self) -> "ConformerEncoderModel":
        params = {n: Tensor(t.data.copy(), requires_grad=False) for n, t in self.params.items()}
        return ConformerEncoderModel(self.config, params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            if n not in arrays:
                raise KeyError(f"checkpoint missing parameter {n}")
            if arrays[n].shape != t.data.shape:
                raise ValueError(f"parameter {n}: checkpoint shape {arrays[n].shape} != {t.data.shape}")
            t.data = arrays[n].astype(t.data.dtype)


def _uniform(rng, fan_in, shape):
    s = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(np.float32)


def init_model(config: ConformerConfig, seed: int = 0) -> ConformerEncoderModel:
    """Seeded scaled-uniform init (scale 1/sqrt(fan_in)); zero biases, unit norms."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6D6F64])))
    d, f, k, H = config.hidden, config.ffn_dim, config.conv_kernel, config.num_heads
    p: dict[str, np.ndarray] = {}
    p["in_proj.w"] = _uniform(rng, config.input_dim, (config.input_dim, d))
    p["in_proj.b"] = np.zeros(d, dtype=np.float32)
    for i in range(config.num_layers):
        pre = f"layer{i}."
        for ffn in ("ffn1", "ffn2"):
            p[pre + ffn + ".norm.g"] = np.ones(d, dtype=np.float32)
            p[pre + ffn + ".norm.b"] = np.zeros(d, dtype=np.float32)
            p[pre + ffn + ".w_in"] = _uniform(rng, d, (d, f))
            p[pre + ffn + ".b_in"] = np.zeros(f, dtype=np.float32)
            p[pre + ffn + ".w_out"] = _uniform(rng, f, (f, d))
            p[pre + ffn + ".b_out"] = np.zeros(d, dtype=np.float32)
        p[pre + "attn.norm.g"] = np.ones(d, dtype=np.float32)
        p[pre + "attn.norm.b"] = np.zeros(d, dtype=np.float32)
        for m in ("q", "k", "v"):
            p[pre + f"attn.w_{m}"] = _uniform(rng, d, (d, d))
            p[pre + f"attn.b_{m}"] = np.zeros(d, dtype=np.float32)
        p[pre + "attn.w_o"] = _uniform(rng, d, (d, d))
        p[pre + "conv.norm.g"] = np.ones(d, dtype=np.float32)
        p[pre + "conv.norm.b"] = np.zeros(d, dtype=np.float32)
        p[pre + "conv.w_pw1"] = _uniform(rng, d, (d, 2 * d))
        p[pre + "conv.b_pw1"] = np.zeros(2 * d, dtype=np.float32)
        p[pre + "conv.w_dw"] = _uniform(rng, k, (d, k))
        p[pre + "conv.b_dw"] = np.zeros(d, dtype=np.float32)
        p[pre + "conv.w_pw2"] = _uniform(rng, d, (d, d))
        p[pre + "conv.b_pw2"] = np.zeros(d, dtype=np.float32)
        p[pre + "conv.ln.g"] = np.ones(d, dtype=np.float32)
        p[pre + "conv.ln.b"] = np.zeros(d, dtype=np.float32)
    p["final_norm.g"] = np.ones(d, dtype=np.float32)
    p["final_norm.b"] = np.zeros(d, dtype=np.float32)
    p["classifier.w"] = _uniform(rng, d, (d, config.num_classes))
    p["classifier.b"] = np.zeros(config.num_classes, dtype=np.float32)
    return ConformerEncoderModel(config, {n: Tensor(a, requires_grad=True) for n, a in p.items()})


def _ones_gates(config: ConformerConfig, dtype) -> dict[str, Tensor]:
    L, H, f, d = config.num_layers, config.num_heads, config.ffn_dim, config.hidden
    shapes = {"head": (L, H), "ffn1": (L, f), "ffn2": (L, f), "conv": (L,), "hid_local": (L, d), "hid_global": (d,)}
    return {fam: ad.constant(np.ones(s, dtype=dtype)) for fam, s in shapes.items()}


def resolve_gates(model, masks, mode: str = "stochastic", noise=None) -> dict[str, Tensor] | None:
    """Normalize the ``masks`` argument of forward into gate tensors.

    Returns None for the ungated (all-ones) path: multiplying by exact
    1.0 is a bit-level no-op, so skipping the gate ops entirely keeps
    the all-ones forward identical to the unmasked one.
    """
    if masks is None:
        return None
    if isinstance(masks, HardConcreteMaskSet):
        return masks.gates(mode=mode, noise=noise)
    if isinstance(masks, dict):
        return masks
    dtype = model.params["in_proj.w"].data.dtype
    gate_arrays = masks.gate_arrays()  # BinaryMaskSet
    return {fam: ad.constant(a.astype(dtype)) for fam, a in gate_arrays.items()}


def _fold(param: Tensor, gate) -> Tensor:
    return param if gate is None else ad.mul(param, gate)


def forward(model: ConformerEncoderModel, x, masks=None, mode: str = "stochastic", noise=None,
            need_logits: bool = True):
    """Run the encoder; returns (per-layer hidden states, frame logits).

    ``x`` is (B, T, F) features; ``masks`` may be None (all-ones),
    a HardConcreteMaskSet (sampled per ``mode``/``noise``), a
    BinaryMaskSet, or a prebuilt dict of gate tensors.

    Gates multiply parameter-sized tensors wherever that is exactly
    equivalent (norm affines for module reads, projection columns for
    module writes, output rows for channel/head gates); the only
    activation-sized gate left is the conv-internal zeroing that the
    conv layer norm's statistics need to see.
    """
    cfg = model.config
    P = model.params
    gates = resolve_gates(model, masks, mode=mode, noise=noise)
    if not isinstance(x, Tensor):
        x = ad.constant(np.asarray(x, dtype=P["in_proj.w"].data.dtype))
    if x.data.ndim != 3 or x.data.shape[-1] != cfg.input_dim:
        raise ad.ShapeError(f"forward: expected (B,T,{cfg.input_dim}) input, got {x.data.shape}")
    B, T, _ = x.data.shape
    dh = cfg.head_dim
    hg = None if gates is None else gates["hid_global"]

    pe = ad.constant(sinusoid_positions(T, np.arange(cfg.hidden), cfg.hidden, P["in_proj.w"].data.dtype))
    with ad.flops_scope("embed"):
        h = ad.linear(x, _fold(P["in_proj.w"], hg), _fold(P["in_proj.b"], hg))
    h = ad.add(h, _fold(pe, hg))

    hiddens = []
    for i in range(cfg.num_layers):
        pre = f"layer{i}."
        if gates is None:
            g_i = g_half = z_f1 = z_f2 = z_head = g_conv = None
        else:
            g_i = ad.mul(ad.slice_(gates["hid_local"], (i,)), hg)
            g_half = ad.scale(g_i, 0.5)
            z_f1 = ad.reshape(ad.slice_(gates["ffn1"], (i,)), (cfg.ffn_dim, 1))
            z_f2 = ad.reshape(ad.slice_(gates["ffn2"], (i,)), (cfg.ffn_dim, 1))
            z_head = ad.reshape(ad.slice_(gates["head"], (i,)), (cfg.num_heads, 1, 1))
            g_conv = ad.mul(g_i, ad.slice_(gates["conv"], (i,)))
        with ad.flops_scope(f"layer{i}"):
            # first macaron FFN; the 0.5 and all gates fold into w_out/b_out
            xin = ad.layer_norm(h, _fold(P[pre + "ffn1.norm.g"], g_i), _fold(P[pre + "ffn1.norm.b"], g_i))
            a = ad.swish(ad.linear(xin, P[pre + "ffn1.w_in"], P[pre + "ffn1.b_in"]))
            if gates is None:
                y = ad.scale(ad.linear(a, P[pre + "ffn1.w_out"], P[pre + "ffn1.b_out"]), 0.5)
            else:
                y = ad.linear(a, ad.mul(ad.mul(P[pre + "ffn1.w_out"], z_f1), g_half),
                              ad.mul(P[pre + "ffn1.b_out"], g_half))
            h = ad.add(h, y)

            # attention; head gates fold into w_o rows, hidden gates into its
            # columns. No output bias, so all-heads-pruned contributes zero.
            xin = ad.layer_norm(h, _fold(P[pre + "attn.norm.g"], g_i), _fold(P[pre + "attn.norm.b"], g_i))
            inv_dh = 1.0 / math.sqrt(dh)  # folded into the query projection
            q = ad.linear(xin, ad.scale(P[pre + "attn.w_q"], inv_dh), ad.scale(P[pre + "attn.b_q"], inv_dh))
            k = ad.linear(xin, P[pre + "attn.w_k"], P[pre + "attn.b_k"])
            v = ad.linear(xin, P[pre + "attn.w_v"], P[pre + "attn.b_v"])
            q = ad.transpose(ad.reshape(q, (B, T, cfg.num_heads, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (B, T, cfg.num_heads, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (B, T, cfg.num_heads, dh)), (0, 2, 1, 3))
            scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
            ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, cfg.hidden))
            w_o = P[pre + "attn.w_o"]
            if gates is not None:
                w_o = ad.reshape(ad.mul(ad.reshape(w_o, (cfg.num_heads, dh, cfg.hidden)), z_head),
                                 (cfg.hidden, cfg.hidden))
                w_o = ad.mul(w_o, g_i)
            h = ad.add(h, ad.matmul(ctx, w_o))

            # conv module: pointwise/GLU, depthwise, layer norm, pointwise.
            # g_i zeroes the depthwise output so dead channels vanish from the
            # norm statistics; the post-norm gate folds into the norm affine.
            xin = ad.layer_norm(h, _fold(P[pre + "conv.norm.g"], g_i), _fold(P[pre + "conv.norm.b"], g_i))
            u = ad.glu(ad.linear(xin, P[pre + "conv.w_pw1"], P[pre + "conv.b_pw1"]), axis=-1)
            w = ad.depthwise_conv1d(u, P[pre + "conv.w_dw"], P[pre + "conv.b_dw"])
            if gates is not None:
                w = ad.mul(w, g_i)
            w = ad.layer_norm(w, _fold(P[pre + "conv.ln.g"], g_i), _fold(P[pre + "conv.ln.b"], g_i))
            y = ad.linear(ad.swish(w), _fold(P[pre + "conv.w_pw2"], g_conv), _fold(P[pre + "conv.b_pw2"], g_conv))
            h = ad.add(h, y)

            # second macaron FFN
            xin = ad.layer_norm(h, _fold(P[pre + "ffn2.norm.g"], g_i), _fold(P[pre + "ffn2.norm.b"], g_i))
            a = ad.swish(ad.linear(xin, P[pre + "ffn2.w_in"], P[pre + "ffn2.b_in"]))
            if gates is None:
                y = ad.scale(ad.linear(a, P[pre + "ffn2.w_out"], P[pre + "ffn2.b_out"]), 0.5)
            else:
                y = ad.linear(a, ad.mul(ad.mul(P[pre + "ffn2.w_out"], z_f2), g_half),
                              ad.mul(P[pre + "ffn2.b_out"], g_half))
            h = ad.add(h, y)
        hiddens.append(h)

    if not need_logits:
        return hiddens, None
    n = ad.layer_norm(h, _fold(P["final_norm.g"], hg), _fold(P["final_norm.b"], hg))
    with ad.flops_scope("classifier"):
        logits = ad.linear(n, P["classifier.w"], P["classifier.b"])
    return hiddens, logits


def layer_hidden_states(model: ConformerEncoderModel, x, masks=None, mode: str = "stochastic", noise=None):
    hiddens, _ = forward(model, x, masks=masks, mode=mode, noise=noise, need_logits=False)
    return hiddens
