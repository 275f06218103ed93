"""Image-text fusion: simple baselines, stacked attention and the global image weight variants.

All functions are batched over a leading axis: ``v_T``/``v_I`` are [B, d] and
spatial features ``v_spI`` are [B, m, d]. Weight matrices are stored
input-major ([d, k] rather than [k, d]) so rows can be multiplied directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .encoders import _glorot
from .tensor import Tensor

FUSION_KINDS = ("text", "image", "concat", "sum_prod_concat", "san", "global_weight", "global_weight_attention")


@dataclass
class FusionOutput:
    joint: Tensor  # v_IT, [B, h]
    attention: np.ndarray | None = None  # [B, m] or [B, m+1]
    image_weight: np.ndarray | None = None  # [B]


def _check_dims(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


def init_fusion(rng: np.random.Generator, kind: str, d: int = 64, k: int = 64, m: int = 49,
                layers: int = 1, prefix: str = "fuse") -> dict[str, Tensor]:
    if kind not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {kind!r}")
    if k < 1:
        raise ValueError("attention hidden size k must be >= 1")
    f32 = T.DEFAULT_DTYPE
    p: dict[str, Tensor] = {}

    def attention_block(suffix: str, regions: int) -> None:
        p[f"{prefix}.W_IA{suffix}"] = Tensor(_glorot(rng, d, k, (d, k)), requires_grad=True)
        p[f"{prefix}.W_TA{suffix}"] = Tensor(_glorot(rng, d, k, (d, k)), requires_grad=True)
        p[f"{prefix}.b_A{suffix}"] = Tensor(np.zeros(k, f32), requires_grad=True)
        p[f"{prefix}.W_Aa{suffix}"] = Tensor(_glorot(rng, k, 1, (k,)), requires_grad=True)
        p[f"{prefix}.b_a{suffix}"] = Tensor(np.zeros(regions, f32), requires_grad=True)

    def fallback_block() -> None:
        p[f"{prefix}.W_TT"] = Tensor(_glorot(rng, d, d, (d, d)), requires_grad=True)
        p[f"{prefix}.b_T"] = Tensor(np.zeros(d, f32), requires_grad=True)

    if kind == "san":
        attention_block("", m)
        if layers == 2:
            attention_block(".2", m)
        elif layers != 1:
            raise ValueError("stacked attention supports 1 or 2 layers")
    elif kind == "global_weight":
        p[f"{prefix}.W_IA"] = Tensor(_glorot(rng, d, k, (d, k)), requires_grad=True)
        p[f"{prefix}.W_TA"] = Tensor(_glorot(rng, d, k, (d, k)), requires_grad=True)
        p[f"{prefix}.b_A"] = Tensor(np.zeros(k, f32), requires_grad=True)
        p[f"{prefix}.W_Aa"] = Tensor(_glorot(rng, k, 1, (k,)), requires_grad=True)
        p[f"{prefix}.b_Aa"] = Tensor(np.zeros((), f32), requires_grad=True)
        fallback_block()
    elif kind == "global_weight_attention":
        attention_block("", m + 1)
        fallback_block()
    return p


def fallback_text(v_T, params: Mapping[str, Tensor], prefix: str = "fuse") -> Tensor:
    """v_T' = tanh(W_TT' v_T + b_T'): the text-derived stand-in for image content."""
    w = params[f"{prefix}.W_TT"]
    v_T = T.as_tensor(v_T)
    if v_T.shape[-1] != w.shape[0]:
        raise ValueError(f"fallback_text: v_T dim {v_T.shape[-1]} != {w.shape[0]}")
    return T.tanh(v_T @ w + params[f"{prefix}.b_T"])


def fuse_concat(v_T, v_I) -> Tensor:
    v_T, v_I = T.as_tensor(v_T), T.as_tensor(v_I)
    _check_dims(v_T, v_I, "fuse_concat")
    return T.concat([v_T, v_I], axis=-1)


def fuse_sum_prod_concat(v_T, v_I) -> Tensor:
    v_T, v_I = T.as_tensor(v_T), T.as_tensor(v_I)
    _check_dims(v_T, v_I, "fuse_sum_prod_concat")
    return T.concat([v_T + v_I, v_T * v_I], axis=-1)


def joint_embed(v_T, v_img) -> Tensor:
    """[v_T + ṽ_I ‖ v_T * ṽ_I]."""
    v_T, v_img = T.as_tensor(v_T), T.as_tensor(v_img)
    _check_dims(v_T, v_img, "joint_embed")
    return T.concat([v_T + v_img, v_T * v_img], axis=-1)


def _attend(rows: Tensor, query: Tensor, params: Mapping[str, Tensor], prefix: str, suffix: str,
            mask=None) -> tuple[Tensor, Tensor]:
    """One attention hop: rows [B, r, d], query [B, d] -> (weights [B, r], attended [B, d])."""
    W_IA = params[f"{prefix}.W_IA{suffix}"]
    if rows.shape[-1] != W_IA.shape[0] or query.shape[-1] != W_IA.shape[0]:
        raise ValueError(f"attention: rows {rows.shape} / query {query.shape} do not match d={W_IA.shape[0]}")
    bias = params[f"{prefix}.b_a{suffix}"]
    if bias.shape[0] != rows.shape[-2]:
        raise ValueError(f"attention: bias has {bias.shape[0]} slots but there are {rows.shape[-2]} rows")
    q = query @ params[f"{prefix}.W_TA{suffix}"] + params[f"{prefix}.b_A{suffix}"]
    h = T.tanh(rows @ W_IA + T.reshape(q, (q.shape[0], 1, q.shape[1])))
    logits = h @ params[f"{prefix}.W_Aa{suffix}"] + bias
    alpha = T.softmax(logits, axis=-1, mask=mask)
    B, r = alpha.shape
    attended = T.reshape(T.reshape(alpha, (B, 1, r)) @ rows, (B, rows.shape[-1]))
    return alpha, attended


def san_attend(v_spI, v_T, params: Mapping[str, Tensor], layers: int = 1,
               prefix: str = "fuse") -> tuple[Tensor, Tensor]:
    """Stacked attention. Returns (α_I [B, m], ṽ_I [B, d]) from the last hop.

    The second hop queries with u = v_T + ṽ_I(hop 1) using its own parameters.
    """
    v_spI, v_T = T.as_tensor(v_spI), T.as_tensor(v_T)
    alpha, attended = _attend(v_spI, v_T, params, prefix, "")
    if layers == 2:
        alpha, attended = _attend(v_spI, v_T + attended, params, prefix, ".2")
    elif layers != 1:
        raise ValueError("layers must be 1 or 2")
    return alpha, attended


def global_weight_fuse(v_I, v_T, params: Mapping[str, Tensor], prefix: str = "fuse") -> FusionOutput:
    """Scalar image gate α mixing v_I with the text fall-back before the joint embedding."""
    v_I, v_T = T.as_tensor(v_I), T.as_tensor(v_T)
    _check_dims(v_T, v_I, "global_weight_fuse")
    h = T.tanh(v_I @ params[f"{prefix}.W_IA"] + v_T @ params[f"{prefix}.W_TA"] + params[f"{prefix}.b_A"])
    alpha = T.sigmoid(h @ params[f"{prefix}.W_Aa"] + params[f"{prefix}.b_Aa"])  # [B]
    a = T.reshape(alpha, (alpha.shape[0], 1))
    v_img = a * v_I + (1.0 - a) * fallback_text(v_T, params, prefix)
    return FusionOutput(joint_embed(v_T, v_img), None, alpha.data.copy())


def global_weight_attention_fuse(v_spI, v_T, params: Mapping[str, Tensor], prefix: str = "fuse",
                                 drop_fallback: bool = False) -> FusionOutput:
    """Attention over m regions plus the fall-back row; region mass is the global image weight.

    ``drop_fallback`` masks the extra row out of the softmax (its weight is forced to 0).
    """
    v_spI, v_T = T.as_tensor(v_spI), T.as_tensor(v_T)
    B, m, _ = v_spI.shape
    fb = fallback_text(v_T, params, prefix)
    rows = T.concat([v_spI, T.reshape(fb, (B, 1, fb.shape[-1]))], axis=1)
    mask = None
    if drop_fallback:
        mask = np.ones((B, m + 1), dtype=bool)
        mask[:, m] = False
    alpha, v_img = _attend(rows, v_T, params, prefix, "", mask=mask)
    weights = alpha.data.copy()
    return FusionOutput(joint_embed(v_T, v_img), weights, weights[:, :m].sum(axis=1))


def reported_image_weight(out: FusionOutput) -> np.ndarray | None:
    """Per-sample image weight for reports.

    Scalar gate: α itself. Attention variant: the mean region weight scaled by
    (m+1), i.e. mass * (m+1) / m, so uniform attention reads 1.0 ("balanced" as in
    VQA-style fusion) and the value lies in [0, (m+1)/m].
    """
    if out.image_weight is None:
        return None
    if out.attention is None:
        return out.image_weight
    slots = out.attention.shape[1]
    return out.image_weight * slots / (slots - 1)
