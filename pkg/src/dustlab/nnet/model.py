"""Miniature transformer encoder for frame sequences, in plain numpy.

Architecture: strided 1-D convolution front-end (subsampling), sinusoidal
positional encodings, a stack of post-norm transformer blocks, and a linear
output head producing per-frame logits over the label alphabet plus blank.

Everything is float64 and hand-differentiated; forward() is a pure function
of (params, features, mode), which is what makes seeded-dropout decoding
reproducible enough to build an agreement filter on.

Dropout is applied at three sites per block - after the attention output
projection, after the ReLU of the first feed-forward layer, and after the
second feed-forward layer - with all masks drawn from one generator seeded
per forward pass, in a fixed order.  Attention probabilities themselves are
never dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

_CONV_KERNEL = 3
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    vocab_size: int  # labels + 1 blank, blank is the last column
    subsample_stride: int = 2
    n_blocks: int = 2
    d_model: int = 32
    n_heads: int = 2
    ff_dim: int = 64
    dropout_p: float = 0.1

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.subsample_stride < 1:
            raise ValueError("subsample_stride must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must include at least one label and blank")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "vocab_size": self.vocab_size,
            "subsample_stride": self.subsample_stride,
            "n_blocks": self.n_blocks,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "ff_dim": self.ff_dim,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class DropoutMode:
    """OFF (p=0) or a seeded stochastic realization with probability p."""

    p: float = 0.0
    seed: int = 0

    @classmethod
    def off(cls) -> "DropoutMode":
        return cls(p=0.0, seed=0)

    @classmethod
    def seeded(cls, seed: int, p: float) -> "DropoutMode":
        return cls(p=float(p), seed=int(seed))

    @property
    def active(self) -> bool:
        return self.p > 0.0


@dataclass(eq=False)
class Params:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: ModelConfig, seed: int) -> Params:
    """Fresh parameters: scaled-gaussian weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    t: Dict[str, np.ndarray] = {}

    def w(name: str, shape: Tuple[int, ...], fan_in: int) -> None:
        t[name] = rng.normal(0.0, fan_in ** -0.5, size=shape)

    def zeros(name: str, shape: Tuple[int, ...]) -> None:
        t[name] = np.zeros(shape)

    d, ff, v = config.d_model, config.ff_dim, config.vocab_size
    w("conv.w", (_CONV_KERNEL * config.input_dim, d), _CONV_KERNEL * config.input_dim)
    zeros("conv.b", (d,))
    for i in range(config.n_blocks):
        pre = f"block{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"{pre}.attn.{proj}", (d, d), d)
        for bias in ("bq", "bk", "bv", "bo"):
            zeros(f"{pre}.attn.{bias}", (d,))
        t[f"{pre}.ln1.g"] = np.ones(d)
        zeros(f"{pre}.ln1.b", (d,))
        w(f"{pre}.ff.w1", (d, ff), d)
        zeros(f"{pre}.ff.b1", (ff,))
        w(f"{pre}.ff.w2", (ff, d), ff)
        zeros(f"{pre}.ff.b2", (d,))
        t[f"{pre}.ln2.g"] = np.ones(d)
        zeros(f"{pre}.ln2.b", (d,))
    w("out.w", (d, v), d)
    zeros("out.b", (v,))
    return Params(config, t)


def subsampled_length(n_frames: int, stride: int = 2) -> int:
    # pad-1 stride-2 kernel-3 convolution: ceil division
    return (n_frames + stride - 1) // stride


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


def _dropout_mask(rng: np.random.Generator, shape: Tuple[int, ...], p: float) -> np.ndarray:
    # Inverted dropout: surviving units scaled by 1/(1-p) so expectation is
    # unchanged.
    return (rng.random(shape) >= p) / (1.0 - p)


def _layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layernorm_bwd(dy: np.ndarray, cache):
    xhat, inv, g = cache
    D = xhat.shape[-1]
    dxhat = dy * g
    dx = (
        inv
        / D
        * (D * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    )
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    T, d = x.shape
    return x.reshape(T, n_heads, d // n_heads).transpose(1, 0, 2)  # (H, T, dh)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    H, T, dh = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * dh)


def forward_cached(params: Params, features: np.ndarray, mode: DropoutMode):
    """Logits (frames' x vocab) plus every intermediate needed by backward()."""
    cfg = params.config
    t = params.tensors
    x_in = np.asarray(features, dtype=np.float64)
    if x_in.ndim != 2 or x_in.shape[1] != cfg.input_dim:
        raise ValueError(
            f"features must be (frames, {cfg.input_dim}), got {x_in.shape}"
        )
    T = x_in.shape[0]
    rng = np.random.default_rng(mode.seed) if mode.active else None

    # --- convolution front-end (pad 1, kernel 3, stride configurable) ---
    Tp = subsampled_length(T, cfg.subsample_stride)
    xpad = np.vstack([np.zeros((1, cfg.input_dim)), x_in, np.zeros((1, cfg.input_dim))])
    rows = np.arange(Tp)[:, None] * cfg.subsample_stride + np.arange(_CONV_KERNEL)[None, :]
    win = xpad[rows].reshape(Tp, _CONV_KERNEL * cfg.input_dim)
    conv_pre = win @ t["conv.w"] + t["conv.b"]
    h = np.maximum(conv_pre, 0.0)
    x = h + positional_encoding(Tp, cfg.d_model)

    cache: Dict[str, object] = {
        "T": T,
        "rows": rows,
        "win": win,
        "conv_pre": conv_pre,
        "blocks": [],
    }
    scale = (cfg.d_model // cfg.n_heads) ** -0.5

    for i in range(cfg.n_blocks):
        pre = f"block{i}"
        bc: Dict[str, object] = {"x_in": x}
        q = x @ t[f"{pre}.attn.wq"] + t[f"{pre}.attn.bq"]
        k = x @ t[f"{pre}.attn.wk"] + t[f"{pre}.attn.bk"]
        v = x @ t[f"{pre}.attn.wv"] + t[f"{pre}.attn.bv"]
        qh, kh, vh = (_split_heads(a, cfg.n_heads) for a in (q, k, v))
        att = np.einsum("hid,hjd->hij", qh, kh) * scale
        att -= att.max(axis=-1, keepdims=True)
        p_att = np.exp(att)
        p_att /= p_att.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hij,hjd->hid", p_att, vh)
        ctxf = _merge_heads(ctx)
        ao = ctxf @ t[f"{pre}.attn.wo"] + t[f"{pre}.attn.bo"]
        if rng is not None:
            m1 = _dropout_mask(rng, ao.shape, mode.p)
            ao = ao * m1
        else:
            m1 = None
        r1 = x + ao
        x1, ln1_cache = _layernorm_fwd(r1, t[f"{pre}.ln1.g"], t[f"{pre}.ln1.b"])

        ff_pre = x1 @ t[f"{pre}.ff.w1"] + t[f"{pre}.ff.b1"]
        ff_h = np.maximum(ff_pre, 0.0)
        if rng is not None:
            m2 = _dropout_mask(rng, ff_h.shape, mode.p)
            ff_h = ff_h * m2
        else:
            m2 = None
        ff_o = ff_h @ t[f"{pre}.ff.w2"] + t[f"{pre}.ff.b2"]
        if rng is not None:
            m3 = _dropout_mask(rng, ff_o.shape, mode.p)
            ff_o = ff_o * m3
        else:
            m3 = None
        r2 = x1 + ff_o
        x2, ln2_cache = _layernorm_fwd(r2, t[f"{pre}.ln2.g"], t[f"{pre}.ln2.b"])

        bc.update(
            qh=qh, kh=kh, vh=vh, p_att=p_att, ctxf=ctxf, m1=m1,
            ln1=ln1_cache, x1=x1, ff_pre=ff_pre, ff_h=ff_h, m2=m2, m3=m3,
            ln2=ln2_cache,
        )
        cache["blocks"].append(bc)
        x = x2

    cache["x_final"] = x
    logits = x @ t["out.w"] + t["out.b"]
    return logits, cache


def forward(params: Params, features: np.ndarray, mode: DropoutMode = DropoutMode.off()) -> np.ndarray:
    logits, _ = forward_cached(params, features, mode)
    return logits


def backward(params: Params, cache: Dict[str, object], dlogits: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every tensor, given d(loss)/d(logits)."""
    cfg = params.config
    t = params.tensors
    g: Dict[str, np.ndarray] = {}
    x_final = cache["x_final"]
    g["out.w"] = x_final.T @ dlogits
    g["out.b"] = dlogits.sum(axis=0)
    dx = dlogits @ t["out.w"].T
    scale = (cfg.d_model // cfg.n_heads) ** -0.5

    for i in reversed(range(cfg.n_blocks)):
        pre = f"block{i}"
        bc = cache["blocks"][i]
        dr2, g[f"{pre}.ln2.g"], g[f"{pre}.ln2.b"] = _layernorm_bwd(dx, bc["ln2"])
        dx1 = dr2.copy()
        dff_o = dr2
        if bc["m3"] is not None:
            dff_o = dff_o * bc["m3"]
        g[f"{pre}.ff.w2"] = bc["ff_h"].T @ dff_o
        g[f"{pre}.ff.b2"] = dff_o.sum(axis=0)
        dff_h = dff_o @ t[f"{pre}.ff.w2"].T
        if bc["m2"] is not None:
            dff_h = dff_h * bc["m2"]
        dff_pre = dff_h * (bc["ff_pre"] > 0)
        g[f"{pre}.ff.w1"] = bc["x1"].T @ dff_pre
        g[f"{pre}.ff.b1"] = dff_pre.sum(axis=0)
        dx1 += dff_pre @ t[f"{pre}.ff.w1"].T

        dr1, g[f"{pre}.ln1.g"], g[f"{pre}.ln1.b"] = _layernorm_bwd(dx1, bc["ln1"])
        dxb = dr1.copy()
        dao = dr1
        if bc["m1"] is not None:
            dao = dao * bc["m1"]
        g[f"{pre}.attn.wo"] = bc["ctxf"].T @ dao
        g[f"{pre}.attn.bo"] = dao.sum(axis=0)
        dctxf = dao @ t[f"{pre}.attn.wo"].T
        dctx = _split_heads(dctxf, cfg.n_heads)
        p_att, qh, kh, vh = bc["p_att"], bc["qh"], bc["kh"], bc["vh"]
        dp = np.einsum("hid,hjd->hij", dctx, vh)
        dvh = np.einsum("hij,hid->hjd", p_att, dctx)
        datt = (dp - (dp * p_att).sum(-1, keepdims=True)) * p_att
        dqh = np.einsum("hij,hjd->hid", datt, kh) * scale
        dkh = np.einsum("hij,hid->hjd", datt, qh) * scale
        dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
        x_in = bc["x_in"]
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            g[f"{pre}.attn.{name}"] = x_in.T @ dmat
        for name, dmat in (("bq", dq), ("bk", dk), ("bv", dv)):
            g[f"{pre}.attn.{name}"] = dmat.sum(axis=0)
        dxb += dq @ t[f"{pre}.attn.wq"].T
        dxb += dk @ t[f"{pre}.attn.wk"].T
        dxb += dv @ t[f"{pre}.attn.wv"].T
        dx = dxb

    # positional encoding is additive: gradient passes straight through
    dh = dx
    dconv_pre = dh * (cache["conv_pre"] > 0)
    g["conv.w"] = cache["win"].T @ dconv_pre
    g["conv.b"] = dconv_pre.sum(axis=0)
    return g
