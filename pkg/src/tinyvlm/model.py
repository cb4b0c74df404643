"""Decoder-only language model with a single projected image token.

Architecture: token embeddings (the position holding the image token is
replaced by the projected image feature), pre-norm RMS-normalized causal
self-attention with rotary position encoding, gated SiLU feed-forward, a
final RMS norm, and an untied LM head. The multimodal projector is
linear -> exact (erf) GeLU -> linear.

Everything is plain numpy; the backward pass is hand-derived and verified
against finite differences in the test suite. Arrays carry the dtype of the
parameter set (float32 by default, float64 for high-precision tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy.special import erf, ndtri

from . import kernels

NORM_EPS = 1e-6
ROPE_BASE = 10000.0
INIT_STD = 0.02
INIT_TRUNC = 2.0  # in units of sigma


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_len: int
    feat_dim: int
    img_token_id: int = 4
    seed: int = 0

    def __post_init__(self):
        dims = (self.n_layers, self.d_model, self.n_heads, self.d_ff,
                self.vocab_size, self.max_len, self.feat_dim)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all config dimensions must be positive: {self}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dim must be even for the rotary position encoding")
        if not 0 <= self.img_token_id < self.vocab_size:
            raise ValueError(f"img_token_id {self.img_token_id} outside vocab")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def paper_config(seed: int = 0) -> ModelConfig:
    """The 6-layer, 768-wide, 30k-vocab configuration used at full scale."""
    return ModelConfig(6, 768, 12, 2048, 30000, 150, 1024, img_token_id=4, seed=seed)


def shape_manifest(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) table; the single source of truth for layouts."""
    d, f = cfg.d_model, cfg.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embed.weight", (cfg.vocab_size, d)),
        ("proj.w1", (cfg.feat_dim, d)),
        ("proj.b1", (d,)),
        ("proj.w2", (d, d)),
        ("proj.b2", (d,)),
    ]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "attn_norm.gain", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.wk", (d, d)),
            (p + "attn.wv", (d, d)),
            (p + "attn.wo", (d, d)),
            (p + "ffn_norm.gain", (d,)),
            (p + "ffn.w_gate", (d, f)),
            (p + "ffn.w_up", (d, f)),
            (p + "ffn.w_down", (f, d)),
        ]
    shapes += [
        ("final_norm.gain", (d,)),
        ("lm_head.weight", (d, cfg.vocab_size)),
    ]
    return shapes


@dataclass
class ParameterSet:
    """Named, shaped, flat-ordered collection of all trainable tensors."""

    tensors: dict[str, np.ndarray]
    config: ModelConfig

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.tensors.items()}, self.config)

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: v.astype(dtype) for k, v in self.tensors.items()}, self.config)

    def validate_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.isfinite(t).all():
                raise ValueError(f"tensor {name} contains non-finite values")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init_model(cfg: ModelConfig, dtype=np.float32) -> ParameterSet:
    """Deterministic init: weights ~ N(0, 0.02^2) truncated at 2 sigma
    (inverse-CDF sampling, so no rejection loop), biases zero, gains one."""
    rng = np.random.default_rng(cfg.seed)
    lo = 0.5 * (1.0 + math.erf(-INIT_TRUNC / math.sqrt(2.0)))
    hi = 0.5 * (1.0 + math.erf(INIT_TRUNC / math.sqrt(2.0)))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in shape_manifest(cfg):
        if name.endswith(".gain"):
            t = np.ones(shape, dtype=np.float64)
        elif name.endswith((".b1", ".b2")):
            t = np.zeros(shape, dtype=np.float64)
        else:
            u = rng.uniform(lo, hi, size=shape)
            t = ndtri(u) * INIT_STD
        tensors[name] = t.astype(dtype)
    return ParameterSet(tensors, cfg)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI)
    return cdf + x * pdf


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def rmsnorm(x, gain):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(NORM_EPS))
    return x * inv * gain, inv


def rmsnorm_grad(dy, x, gain, inv):
    d = x.shape[-1]
    dgain = (dy * x * inv).reshape(-1, d).sum(axis=0)
    inner = (dy * gain * x).sum(axis=-1, keepdims=True)
    dx = dy * gain * inv - x * (inv ** 3) * (inner / d)
    return dx, dgain


def rope_tables(T: int, head_dim: int, dtype):
    half = head_dim // 2
    freqs = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(T, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x, cos, sin):
    # x: [B, H, T, hd]; rotate the two halves of the head dimension
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate((x1 * cos - x2 * sin, x1 * sin + x2 * cos), axis=-1)


def rope_unapply(dy, cos, sin):
    half = dy.shape[-1] // 2
    d1, d2 = dy[..., :half], dy[..., half:]
    return np.concatenate((d1 * cos + d2 * sin, -d1 * sin + d2 * cos), axis=-1)


def project_image(params: ParameterSet, feature: np.ndarray, activation: str = "gelu") -> np.ndarray:
    """linear -> GeLU -> linear map from feature space into the model width.

    ``activation="identity"`` is a test hook for linearity checks.
    """
    feature = np.asarray(feature)
    if feature.shape[-1] != params.config.feat_dim:
        raise ValueError(
            f"feature length {feature.shape[-1]} != feat_dim {params.config.feat_dim}"
        )
    if not np.isfinite(feature).all():
        raise ValueError("image feature contains non-finite values")
    feature = feature.astype(params.dtype, copy=False)
    h = feature @ params["proj.w1"] + params["proj.b1"]
    if activation == "gelu":
        a = gelu(h)
    elif activation == "identity":
        a = h
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return a @ params["proj.w2"] + params["proj.b2"]


# ---------------------------------------------------------------------------
# batched forward / backward
# ---------------------------------------------------------------------------

def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * hd)


def _flat_grad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def forward_batch(
    params: ParameterSet,
    token_ids: np.ndarray,
    features: Optional[np.ndarray] = None,
    want_cache: bool = False,
):
    """Run the model over [B, T] token ids; returns logits [B, T, vocab].

    ``features`` is [B, feat_dim]; row b is consumed only where row b contains
    the image token (at most one occurrence per row).
    """
    cfg = params.config
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise ValueError(f"token_ids must be [batch, seq], got shape {ids.shape}")
    B, T = ids.shape
    if T > cfg.max_len:
        raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    img_mask = ids == cfg.img_token_id
    per_row = img_mask.sum(axis=1)
    if (per_row > 1).any():
        bad = int(np.nonzero(per_row > 1)[0][0])
        raise ValueError(f"row {bad} contains {int(per_row[bad])} image tokens; at most one allowed")
    dtype = params.dtype

    x = params["embed.weight"][ids]  # [B, T, d]
    proj_cache = None
    if img_mask.any():
        if features is None:
            raise ValueError("image token present but no features supplied")
        feats = np.asarray(features).astype(dtype, copy=False)
        if feats.shape != (B, cfg.feat_dim):
            raise ValueError(f"features must be [batch, {cfg.feat_dim}], got {feats.shape}")
        rows = np.nonzero(per_row == 1)[0]
        cols = np.argmax(img_mask[rows], axis=1)
        fsel = feats[rows]
        h1 = fsel @ params["proj.w1"] + params["proj.b1"]
        act = gelu(h1)
        out = act @ params["proj.w2"] + params["proj.b2"]
        x[rows, cols] = out
        proj_cache = (rows, cols, fsel, h1, act)

    H, hd = cfg.n_heads, cfg.head_dim
    scale = dtype.type(1.0 / math.sqrt(hd))
    cos, sin = rope_tables(T, hd, dtype)
    layer_caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        n1, r1 = rmsnorm(x, params[p + "attn_norm.gain"])
        q = _split_heads(n1 @ params[p + "attn.wq"], H)
        k = _split_heads(n1 @ params[p + "attn.wk"], H)
        v = _split_heads(n1 @ params[p + "attn.wv"], H)
        qr = rope_apply(q, cos, sin)
        kr = rope_apply(k, cos, sin)
        scores = (qr @ kr.swapaxes(-1, -2)) * scale
        probs = kernels.causal_softmax(scores)
        ctx = _merge_heads(probs @ v)
        ao = ctx @ params[p + "attn.wo"]
        x_attn = x + ao
        n2, r2 = rmsnorm(x_attn, params[p + "ffn_norm.gain"])
        gpre = n2 @ params[p + "ffn.w_gate"]
        upre = n2 @ params[p + "ffn.w_up"]
        sg = silu(gpre)
        hmid = sg * upre
        x_new = x_attn + hmid @ params[p + "ffn.w_down"]
        if want_cache:
            layer_caches.append(
                dict(x=x, n1=n1, r1=r1, qr=qr, kr=kr, v=v, probs=probs, ctx=ctx,
                     x_attn=x_attn, n2=n2, r2=r2, gpre=gpre, upre=upre, sg=sg, hmid=hmid)
            )
        x = x_new

    nf, rf = rmsnorm(x, params["final_norm.gain"])
    logits = nf @ params["lm_head.weight"]
    if not want_cache:
        return logits, None
    cache = dict(
        ids=ids, img_mask=img_mask, proj=proj_cache, layers=layer_caches,
        x_final=x, nf=nf, rf=rf, cos=cos, sin=sin, scale=scale,
    )
    return logits, cache


def backward_batch(params: ParameterSet, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss/d logits."""
    cfg = params.config
    grads = {name: np.zeros(shape, dtype=params.dtype) for name, shape in shape_manifest(cfg)}
    H = cfg.n_heads
    cos, sin, scale = cache["cos"], cache["sin"], cache["scale"]

    grads["lm_head.weight"] += _flat_grad(cache["nf"], dlogits)
    dnf = dlogits @ params["lm_head.weight"].T
    dx, dgf = rmsnorm_grad(dnf, cache["x_final"], params["final_norm.gain"], cache["rf"])
    grads["final_norm.gain"] += dgf

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]
        # feed-forward branch
        dhmid = dx @ params[p + "ffn.w_down"].T
        grads[p + "ffn.w_down"] += _flat_grad(c["hmid"], dx)
        dsg = dhmid * c["upre"]
        dupre = dhmid * c["sg"]
        dgpre = dsg * silu_grad(c["gpre"])
        grads[p + "ffn.w_gate"] += _flat_grad(c["n2"], dgpre)
        grads[p + "ffn.w_up"] += _flat_grad(c["n2"], dupre)
        dn2 = dgpre @ params[p + "ffn.w_gate"].T + dupre @ params[p + "ffn.w_up"].T
        dx_attn, dg2 = rmsnorm_grad(dn2, c["x_attn"], params[p + "ffn_norm.gain"], c["r2"])
        grads[p + "ffn_norm.gain"] += dg2
        dx_attn = dx_attn + dx  # residual
        # attention branch
        dctx = dx_attn @ params[p + "attn.wo"].T
        grads[p + "attn.wo"] += _flat_grad(c["ctx"], dx_attn)
        dctx_h = _split_heads(dctx, H)
        dprobs = dctx_h @ c["v"].swapaxes(-1, -2)
        dv = c["probs"].swapaxes(-1, -2) @ dctx_h
        dscores = kernels.causal_softmax_grad(c["probs"], dprobs)
        dqr = (dscores @ c["kr"]) * scale
        dkr = (dscores.swapaxes(-1, -2) @ c["qr"]) * scale
        dq = _merge_heads(rope_unapply(dqr, cos, sin))
        dk = _merge_heads(rope_unapply(dkr, cos, sin))
        dv = _merge_heads(dv)
        grads[p + "attn.wq"] += _flat_grad(c["n1"], dq)
        grads[p + "attn.wk"] += _flat_grad(c["n1"], dk)
        grads[p + "attn.wv"] += _flat_grad(c["n1"], dv)
        dn1 = dq @ params[p + "attn.wq"].T + dk @ params[p + "attn.wk"].T + dv @ params[p + "attn.wv"].T
        dx_res, dg1 = rmsnorm_grad(dn1, c["x"], params[p + "attn_norm.gain"], c["r1"])
        grads[p + "attn_norm.gain"] += dg1
        dx = dx_res + dx_attn

    # split dx between the embedding table and the projector
    ids = cache["ids"]
    if cache["proj"] is not None:
        rows, cols, fsel, h1, act = cache["proj"]
        dout = dx[rows, cols]
        grads["proj.b2"] += dout.sum(axis=0)
        grads["proj.w2"] += act.T @ dout
        dact = dout @ params["proj.w2"].T
        dh1 = dact * gelu_grad(h1)
        grads["proj.b1"] += dh1.sum(axis=0)
        grads["proj.w1"] += fsel.T @ dh1
        dx = dx.copy()
        dx[rows, cols] = 0.0
    flat_ids = ids.reshape(-1)
    np.add.at(grads["embed.weight"], flat_ids, dx.reshape(-1, cfg.d_model))
    return grads


# ---------------------------------------------------------------------------
# single-sequence API and scoring
# ---------------------------------------------------------------------------

def forward(params: ParameterSet, token_ids, image_feature=None) -> np.ndarray:
    """Logits [T, vocab_size] for one sequence with at most one image token."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    feats = None
    if image_feature is not None:
        feats = np.asarray(image_feature, dtype=params.dtype).reshape(1, -1)
    logits, _ = forward_batch(params, ids, feats)
    return logits[0]


def sequence_logprob(params: ParameterSet, token_ids, image_feature, start: int) -> float:
    """Sum over positions t >= start of log P(token_t | tokens_<t)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    T = ids.shape[0]
    if not 1 <= start < T:
        raise ValueError(f"start {start} outside scoring range for length {T}")
    logits = forward(params, ids, image_feature).astype(np.float64)
    total = 0.0
    for t in range(start, T):
        row = logits[t - 1]
        mx = row.max()
        lse = mx + math.log(np.exp(row - mx).sum())
        total += float(row[ids[t]]) - lse
    return total


def sentence_logprob(params: ParameterSet, token_ids, image_feature=None) -> float:
    """Score every position after the leading BOS (and image token, if present).

    No length normalization is applied.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.shape[0] < 2:
        raise ValueError("sequence too short to score (need >= 2 tokens)")
    start = 1
    if ids.shape[0] > 2 and ids[1] == params.config.img_token_id:
        start = 2
    return sequence_logprob(params, ids, image_feature, start)
