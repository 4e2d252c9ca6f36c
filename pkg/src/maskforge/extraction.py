"""Turn learned masks into a physically smaller, equivalent model.

A unit is retained iff its noise-free gate value is positive
(equivalently alpha > -log 11, i.e. the gate is open with probability
above one half). Fractional gate values of retained units are *folded*
into adjacent weights rather than rounded, so the sliced model computes
exactly what the masked model computed:

- layer hidden gates fold into module input rows and output columns;
- FFN channel gates fold into the output-projection rows;
- head gates fold into the attention output-projection rows;
- the conv gate and hidden gates fold into the conv's depthwise
  weights/bias, its internal norm affine, and its final pointwise;
- the global hidden gate folds into the input projection, the
  positional-encoding scale, and the classifier rows.

Layer norms in the sliced model keep the original width as their
statistics divisor (pruned positions held exact zeros), which is what
makes removal lossless rather than approximate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .accounting import dense_flops, exact_size
from .kernels import depthwise_conv1d_forward
from .masks import FAMILIES, HardConcreteMaskSet, mask_shapes
from .model import ConformerConfig, ConformerEncoderModel, sinusoid_positions


@dataclass
class BinaryMaskSet:
    """0/1 retention per unit plus the retained units' fold scales."""

    retention: dict[str, object]  # per family: (L,.) int array, or list of 1-d arrays
    fold_scales: dict[str, object]
    num_layers: int

    def __post_init__(self):
        for fam in FAMILIES:
            rows = self.retention[fam], self.fold_scales[fam]
            if isinstance(rows[0], list):  # per-layer lists (already-compact geometry)
                pairs = zip(rows[0], rows[1])
            else:
                pairs = [(np.asarray(rows[0]), np.asarray(rows[1]))]
            for r, s in pairs:
                r, s = np.asarray(r), np.asarray(s)
                if not np.all((r == 0) | (r == 1)):
                    raise ValueError(f"BinaryMaskSet: family {fam!r} retention is not binary")
                if np.any((r == 1) & ((s <= 0) | (s > 1))) or np.any((r == 0) & (s != 0)):
                    raise ValueError(f"BinaryMaskSet: family {fam!r} fold scales inconsistent with retention")

    def gate_arrays(self) -> dict[str, np.ndarray]:
        return {
            fam: (np.asarray(self.retention[fam]) * np.asarray(self.fold_scales[fam])).astype(np.float32)
            for fam in FAMILIES
        }

    @classmethod
    def all_ones(cls, config: ConformerConfig) -> "BinaryMaskSet":
        shapes = mask_shapes(config)
        return cls(
            retention={f: np.ones(s, dtype=np.int64) for f, s in shapes.items()},
            fold_scales={f: np.ones(s, dtype=np.float32) for f, s in shapes.items()},
            num_layers=config.num_layers,
        )

    @classmethod
    def from_gate_values(cls, values: dict[str, np.ndarray], num_layers: int) -> "BinaryMaskSet":
        retention = {f: (np.asarray(v) > 0).astype(np.int64) for f, v in values.items()}
        fold = {f: np.where(retention[f] == 1, np.asarray(v), 0.0).astype(np.float32) for f, v in values.items()}
        return cls(retention=retention, fold_scales=fold, num_layers=num_layers)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for fam in FAMILIES:
            out[f"bin.retention.{fam}"] = np.asarray(self.retention[fam], dtype=np.float32)
            out[f"bin.fold.{fam}"] = np.asarray(self.fold_scales[fam], dtype=np.float32)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], num_layers: int) -> "BinaryMaskSet":
        retention = {f: arrays[f"bin.retention.{f}"].astype(np.int64) for f in FAMILIES}
        fold = {f: arrays[f"bin.fold.{f}"].astype(np.float32) for f in FAMILIES}
        return cls(retention=retention, fold_scales=fold, num_layers=num_layers)


_TRIM_ORDER = {"ffn1": 0, "head": 1, "conv": 2, "ffn2": 3, "hid_local": 4, "hid_global": 5}


def binarize_and_fold(masks: HardConcreteMaskSet, budget=None, config: ConformerConfig | None = None,
                      round_scales_to_one: bool = False) -> BinaryMaskSet:
    """Threshold the noise-free gates at zero and record fold scales.

    With ``budget`` (and ``config``), borderline retained units are
    dropped smallest-gate-first until the exact size meets the budget.
    ``round_scales_to_one`` snaps retained units to hard 1.0 gates
    instead of preserving the masked forward exactly.
    """
    values = {}
    for fam in FAMILIES:
        a = masks.alpha[fam].data
        if masks.trainable[fam]:
            sig = 1.0 / (1.0 + np.exp(-a.astype(np.float64)))
            values[fam] = np.clip(sig * 1.2 - 0.1, 0.0, 1.0)
        else:
            values[fam] = np.ones_like(a, dtype=np.float64)
    bin_masks = BinaryMaskSet.from_gate_values(values, masks.num_layers)
    if round_scales_to_one:
        bin_masks.fold_scales = {f: np.asarray(r, dtype=np.float32).copy()
                                 for f, r in bin_masks.retention.items()}

    if budget is not None:
        if config is None:
            raise ValueError("binarize_and_fold: trimming needs the model config")
        from .accounting import flops_from_gate_values

        def current_size(b: BinaryMaskSet) -> float:
            vals = {f: np.asarray(b.retention[f], dtype=np.float64) for f in FAMILIES}
            if budget.budget_mode == "parameters":
                return float(exact_size(b, config)[0])
            return flops_from_gate_values(vals, config, budget.seq_len)

        units = []
        for fam in FAMILIES:
            if not masks.trainable[fam]:
                continue
            r = bin_masks.retention[fam]
            for flat in np.flatnonzero(r):
                z = float(np.asarray(bin_masks.fold_scales[fam]).reshape(-1)[flat])
                units.append((z, _TRIM_ORDER[fam], int(flat), fam))
        units.sort()
        target = budget.target_size()
        for z, _, flat, fam in units:
            if current_size(bin_masks) <= target:
                break
            r = bin_masks.retention[fam].reshape(-1)
            if fam == "hid_global" and r.sum() <= 1:
                continue  # never empty the residual stream
            r[flat] = 0
            bin_masks.fold_scales[fam].reshape(-1)[flat] = 0.0
    return bin_masks


# ---------------------------------------------------------------------------
# Compact model


@dataclass
class CompactFfn:
    norm_g: np.ndarray
    norm_b: np.ndarray
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def arrays(self):
        return [self.norm_g, self.norm_b, self.w_in, self.b_in, self.w_out, self.b_out]


@dataclass
class CompactAttn:
    norm_g: np.ndarray
    norm_b: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    num_heads: int

    def arrays(self):
        return [self.norm_g, self.norm_b, self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o]


@dataclass
class CompactConv:
    norm_g: np.ndarray
    norm_b: np.ndarray
    w_pw1: np.ndarray
    b_pw1: np.ndarray
    w_dw: np.ndarray
    b_dw: np.ndarray
    w_pw2: np.ndarray
    b_pw2: np.ndarray
    ln_g: np.ndarray
    ln_b: np.ndarray

    def arrays(self):
        return [self.norm_g, self.norm_b, self.w_pw1, self.b_pw1, self.w_dw, self.b_dw,
                self.w_pw2, self.b_pw2, self.ln_g, self.ln_b]


@dataclass
class CompactLayer:
    hid_idx: np.ndarray  # positions into the stream, strictly increasing
    ffn1: CompactFfn
    attn: CompactAttn
    conv: CompactConv | None
    ffn2: CompactFfn

    def num_parameters(self) -> int:
        n = sum(a.size for a in self.ffn1.arrays() + self.attn.arrays() + self.ffn2.arrays())
        if self.conv is not None:
            n += sum(a.size for a in self.conv.arrays())
        return n


@dataclass
class CompactModel:
    """Structurally sliced encoder; inference-only, pure numpy forward."""

    d_stream: int
    d_virtual: int  # original width: layer-norm divisor and posenc frequency table
    head_dim: int
    conv_kernel: int
    input_dim: int
    num_classes: int
    pos_dims: np.ndarray  # original dim index of each stream dim
    pos_scale: np.ndarray  # global-gate fold applied to positional encodings
    in_w: np.ndarray
    in_b: np.ndarray
    final_g: np.ndarray
    final_b: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray
    layers: list
    ln_eps: float = 1e-5

    def num_encoder_parameters(self) -> int:
        return sum(layer.num_parameters() for layer in self.layers)

    def num_parameters(self) -> int:
        outer = sum(a.size for a in (self.in_w, self.in_b, self.final_g, self.final_b, self.cls_w, self.cls_b))
        return outer + self.num_encoder_parameters()


def to_compact(model: ConformerEncoderModel) -> CompactModel:
    """View the dense model as a compact model with full indices."""
    cfg = model.config
    P = {n: t.data.copy() for n, t in model.params.items()}
    d = cfg.hidden
    layers = []
    for i in range(cfg.num_layers):
        pre = f"layer{i}."
        layers.append(CompactLayer(
            hid_idx=np.arange(d, dtype=np.int64),
            ffn1=CompactFfn(P[pre + "ffn1.norm.g"], P[pre + "ffn1.norm.b"], P[pre + "ffn1.w_in"],
                            P[pre + "ffn1.b_in"], P[pre + "ffn1.w_out"], P[pre + "ffn1.b_out"]),
            attn=CompactAttn(P[pre + "attn.norm.g"], P[pre + "attn.norm.b"], P[pre + "attn.w_q"],
                             P[pre + "attn.b_q"], P[pre + "attn.w_k"], P[pre + "attn.b_k"],
                             P[pre + "attn.w_v"], P[pre + "attn.b_v"], P[pre + "attn.w_o"], cfg.num_heads),
            conv=CompactConv(P[pre + "conv.norm.g"], P[pre + "conv.norm.b"], P[pre + "conv.w_pw1"],
                             P[pre + "conv.b_pw1"], P[pre + "conv.w_dw"], P[pre + "conv.b_dw"],
                             P[pre + "conv.w_pw2"], P[pre + "conv.b_pw2"], P[pre + "conv.ln.g"],
                             P[pre + "conv.ln.b"]),
            ffn2=CompactFfn(P[pre + "ffn2.norm.g"], P[pre + "ffn2.norm.b"], P[pre + "ffn2.w_in"],
                            P[pre + "ffn2.b_in"], P[pre + "ffn2.w_out"], P[pre + "ffn2.b_out"]),
        ))
    return CompactModel(
        d_stream=d, d_virtual=d, head_dim=cfg.head_dim, conv_kernel=cfg.conv_kernel,
        input_dim=cfg.input_dim, num_classes=cfg.num_classes,
        pos_dims=np.arange(d, dtype=np.int64), pos_scale=np.ones(d, dtype=np.float32),
        in_w=P["in_proj.w"], in_b=P["in_proj.b"], final_g=P["final_norm.g"], final_b=P["final_norm.b"],
        cls_w=P["classifier.w"], cls_b=P["classifier.b"], layers=layers,
    )


def _fam_row(mask_entry, i):
    return np.asarray(mask_entry[i])


def extract(model, bin_masks: BinaryMaskSet) -> CompactModel:
    """Slice pruned rows/columns out and fold fractional gates into weights."""
    cm = to_compact(model) if isinstance(model, ConformerEncoderModel) else model

    g_ret = np.asarray(bin_masks.retention["hid_global"]).astype(bool)
    g_fold = np.asarray(bin_masks.fold_scales["hid_global"]).astype(np.float32)
    if g_ret.shape != (cm.d_stream,):
        raise ValueError(f"extract: global mask shape {g_ret.shape} does not match stream width {cm.d_stream}")
    if not g_ret.any():
        raise ValueError("extract: zero retained global hidden dims (degenerate model)")
    new_pos = np.full(cm.d_stream, -1, dtype=np.int64)
    new_pos[g_ret] = np.arange(int(g_ret.sum()))

    out = CompactModel(
        d_stream=int(g_ret.sum()), d_virtual=cm.d_virtual, head_dim=cm.head_dim,
        conv_kernel=cm.conv_kernel, input_dim=cm.input_dim, num_classes=cm.num_classes,
        pos_dims=cm.pos_dims[g_ret], pos_scale=(cm.pos_scale * g_fold)[g_ret],
        in_w=(cm.in_w * g_fold[None, :])[:, g_ret], in_b=(cm.in_b * g_fold)[g_ret],
        final_g=cm.final_g[g_ret], final_b=cm.final_b[g_ret],
        cls_w=(cm.cls_w * g_fold[:, None])[g_ret], cls_b=cm.cls_b.copy(), layers=[],
        ln_eps=cm.ln_eps,
    )

    for i, layer in enumerate(cm.layers):
        idx = layer.hid_idx
        l_ret = _fam_row(bin_masks.retention["hid_local"], i).astype(bool)
        l_fold = _fam_row(bin_masks.fold_scales["hid_local"], i).astype(np.float32)
        keep = l_ret[idx] & g_ret[idx]
        sel = np.flatnonzero(keep)
        g_vals = (l_fold[idx] * g_fold[idx])[sel].astype(np.float32)
        hid_idx = new_pos[idx[sel]]

        def slice_ffn(ffn, fam):
            c_ret = _fam_row(bin_masks.retention[fam], i).astype(bool)
            c_fold = _fam_row(bin_masks.fold_scales[fam], i).astype(np.float32)
            cs = np.flatnonzero(c_ret)
            return CompactFfn(
                norm_g=ffn.norm_g[sel], norm_b=ffn.norm_b[sel],
                w_in=ffn.w_in[sel][:, cs] * g_vals[:, None],
                b_in=ffn.b_in[cs],
                w_out=ffn.w_out[cs][:, sel] * c_fold[cs][:, None] * g_vals[None, :],
                b_out=ffn.b_out[sel] * g_vals,
            )

        h_ret = _fam_row(bin_masks.retention["head"], i).astype(bool)
        h_fold = _fam_row(bin_masks.fold_scales["head"], i).astype(np.float32)
        js = np.flatnonzero(h_ret)
        dh = cm.head_dim
        cols = np.concatenate([np.arange(j * dh, (j + 1) * dh) for j in js]) if js.size else np.zeros(0, dtype=np.int64)
        rowscale = np.repeat(h_fold[js], dh).astype(np.float32)
        attn = CompactAttn(
            norm_g=layer.attn.norm_g[sel], norm_b=layer.attn.norm_b[sel],
            w_q=layer.attn.w_q[sel][:, cols] * g_vals[:, None], b_q=layer.attn.b_q[cols],
            w_k=layer.attn.w_k[sel][:, cols] * g_vals[:, None], b_k=layer.attn.b_k[cols],
            w_v=layer.attn.w_v[sel][:, cols] * g_vals[:, None], b_v=layer.attn.b_v[cols],
            w_o=layer.attn.w_o[cols][:, sel] * rowscale[:, None] * g_vals[None, :],
            num_heads=int(js.size),
        )

        conv = None
        if layer.conv is not None and int(_fam_row(bin_masks.retention["conv"], i).reshape(-1)[0]) == 1:
            zc = float(_fam_row(bin_masks.fold_scales["conv"], i).reshape(-1)[0])
            n_old = idx.size
            cols2 = np.concatenate([sel, n_old + sel])
            conv = CompactConv(
                norm_g=layer.conv.norm_g[sel], norm_b=layer.conv.norm_b[sel],
                w_pw1=layer.conv.w_pw1[sel][:, cols2] * g_vals[:, None],
                b_pw1=layer.conv.b_pw1[cols2],
                w_dw=layer.conv.w_dw[sel] * g_vals[:, None],
                b_dw=layer.conv.b_dw[sel] * g_vals,
                w_pw2=layer.conv.w_pw2[sel][:, sel] * (g_vals * zc)[None, :],
                b_pw2=layer.conv.b_pw2[sel] * g_vals * zc,
                ln_g=layer.conv.ln_g[sel] * g_vals,
                ln_b=layer.conv.ln_b[sel] * g_vals,
            )

        out.layers.append(CompactLayer(
            hid_idx=hid_idx,
            ffn1=slice_ffn(layer.ffn1, "ffn1"),
            attn=attn,
            conv=conv,
            ffn2=slice_ffn(layer.ffn2, "ffn2"),
        ))
    return out


# ---------------------------------------------------------------------------
# Pure-numpy inference for the compact model (matches the graph ops bit-level)


def _sigmoid_np(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _ln_stats(h: np.ndarray, virtual: int, eps: float):
    mu = np.sum(h, axis=-1, keepdims=True, dtype=np.float64) / virtual
    ex2 = np.sum(np.multiply(h, h, dtype=np.float64), axis=-1, keepdims=True) / virtual
    var = np.maximum(ex2 - mu * mu, 0.0)
    inv = (1.0 / np.sqrt(var + eps)).astype(h.dtype)
    return mu.astype(h.dtype), inv


def _pre_norm_gather(h, sel_slice, norm_g, norm_b, virtual, eps):
    mu, inv = _ln_stats(h, virtual, eps)
    xh = (sel_slice - mu) * inv
    return xh * norm_g + norm_b


def forward_compact(cm: CompactModel, x: np.ndarray):
    """Returns (per-layer hidden states in stream coords, frame logits)."""
    x = np.asarray(x, dtype=np.float32)
    B, T, F = x.shape
    if F != cm.input_dim:
        raise ValueError(f"forward_compact: expected feature dim {cm.input_dim}, got {F}")
    pe = sinusoid_positions(T, cm.pos_dims, cm.d_virtual) * cm.pos_scale
    h = x @ cm.in_w + cm.in_b + pe

    hiddens = []
    for layer in cm.layers:
        idx = layer.hid_idx
        sel = h[..., idx]

        m = _pre_norm_gather(h, sel, layer.ffn1.norm_g, layer.ffn1.norm_b, cm.d_virtual, cm.ln_eps)
        a = m @ layer.ffn1.w_in + layer.ffn1.b_in
        a = a * _sigmoid_np(a)
        y = a @ layer.ffn1.w_out + layer.ffn1.b_out
        h[..., idx] += np.float32(0.5) * y

        sel = h[..., idx]
        m = _pre_norm_gather(h, sel, layer.attn.norm_g, layer.attn.norm_b, cm.d_virtual, cm.ln_eps)
        nh, dh = layer.attn.num_heads, cm.head_dim
        if nh > 0 and idx.size > 0:
            q = (m @ layer.attn.w_q + layer.attn.b_q).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            k = (m @ layer.attn.w_k + layer.attn.b_k).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            v = (m @ layer.attn.w_v + layer.attn.b_v).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            scores = (q @ k.transpose(0, 1, 3, 2)) * np.float32(1.0 / np.sqrt(dh))
            z = scores - scores.max(axis=-1, keepdims=True)
            e = np.exp(z)
            attn = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, nh * dh)
            h[..., idx] += ctx @ layer.attn.w_o

        if layer.conv is not None and idx.size > 0:
            sel = h[..., idx]
            m = _pre_norm_gather(h, sel, layer.conv.norm_g, layer.conv.norm_b, cm.d_virtual, cm.ln_eps)
            u = m @ layer.conv.w_pw1 + layer.conv.b_pw1
            half = u.shape[-1] // 2
            u = u[..., :half] * _sigmoid_np(u[..., half:])
            w = depthwise_conv1d_forward(np.ascontiguousarray(u), layer.conv.w_dw, layer.conv.b_dw)
            mu, inv = _ln_stats(w, cm.d_virtual, cm.ln_eps)
            w = ((w - mu) * inv) * layer.conv.ln_g + layer.conv.ln_b
            w = w * _sigmoid_np(w)
            h[..., idx] += w @ layer.conv.w_pw2 + layer.conv.b_pw2

        sel = h[..., idx]
        m = _pre_norm_gather(h, sel, layer.ffn2.norm_g, layer.ffn2.norm_b, cm.d_virtual, cm.ln_eps)
        a = m @ layer.ffn2.w_in + layer.ffn2.b_in
        a = a * _sigmoid_np(a)
        y = a @ layer.ffn2.w_out + layer.ffn2.b_out
        h[..., idx] += np.float32(0.5) * y

        hiddens.append(h.copy())

    mu, inv = _ln_stats(h, cm.d_virtual, cm.ln_eps)
    n = ((h - mu) * inv) * cm.final_g + cm.final_b
    logits = n @ cm.cls_w + cm.cls_b
    return hiddens, logits


def scatter_to_virtual(cm: CompactModel, arr: np.ndarray) -> np.ndarray:
    """Embed stream-coordinate activations back into the original width."""
    out = np.zeros(arr.shape[:-1] + (cm.d_virtual,), dtype=arr.dtype)
    out[..., cm.pos_dims] = arr
    return out


def compact_flops(cm: CompactModel, seq_len: int) -> float:
    """Per-sequence multiply-adds x2 of the compact encoder layers."""
    T, dh, k = seq_len, cm.head_dim, cm.conv_kernel
    total = 0.0
    for layer in cm.layers:
        n = layer.hid_idx.size
        c12 = layer.ffn1.b_in.size + layer.ffn2.b_in.size
        heads = layer.attn.num_heads
        total += 4.0 * T * n * c12 + 8.0 * T * dh * n * heads + 4.0 * T * T * dh * heads
        if layer.conv is not None:
            total += 6.0 * T * n * n + 2.0 * T * k * n
    return total


def benchmark_forward(model, batch: np.ndarray, repeats: int = 5) -> dict:
    """Median wall-clock per forward (after one warmup) plus a FLOPs estimate."""
    if repeats < 3:
        raise ValueError("benchmark_forward: repeats must be >= 3")
    batch = np.asarray(batch, dtype=np.float32)
    B, T, _ = batch.shape
    if isinstance(model, CompactModel):
        def run():
            forward_compact(model, batch)
        flops = compact_flops(model, T) * B
    else:
        from . import autodiff as ad
        from .model import forward as dense_forward

        def run():
            with ad.no_grad():
                dense_forward(model, batch, masks=None)
        flops = dense_flops(model.config, T) * B
    run()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    med = float(np.median(times))
    return {
        "median_s": med,
        "mean_s": float(np.mean(times)),
        "variance_s2": float(np.var(times)),
        "times_s": times,
        "flops_per_forward": float(flops),
    }
