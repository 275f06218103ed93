"""Task heads and their losses: multi-label classifier, expert scorer, 5-way matching head."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoders import _glorot
from .tensor import Tensor

PROB_CLAMP = 1e-7
N_CANDIDATES = 5


def init_classifier(rng: np.random.Generator, h: int, n_categories: int, prefix: str = "cls") -> dict[str, Tensor]:
    if n_categories < 2:
        raise ValueError("need at least two categories")
    return {
        f"{prefix}.w": Tensor(_glorot(rng, h, n_categories, (h, n_categories)), requires_grad=True),
        f"{prefix}.b": Tensor(np.zeros(n_categories, T.DEFAULT_DTYPE), requires_grad=True),
    }


def classify(v_IT, params: Mapping[str, Tensor], prefix: str = "cls") -> Tensor:
    """Independent per-category sigmoid probabilities, [B, C]."""
    w = params[f"{prefix}.w"]
    v_IT = T.as_tensor(v_IT)
    if v_IT.shape[-1] != w.shape[0]:
        raise ValueError(f"classify: input dim {v_IT.shape[-1]} != {w.shape[0]}")
    return T.sigmoid(v_IT @ w + params[f"{prefix}.b"])


def multi_hot(golds: Sequence[Sequence[int]], n_categories: int) -> np.ndarray:
    y = np.zeros((len(golds), n_categories), dtype=T.DEFAULT_DTYPE)
    for i, g in enumerate(golds):
        g = list(g)
        if g and (min(g) < 0 or max(g) >= n_categories):
            raise ValueError(f"gold category out of range 0..{n_categories - 1}: {g}")
        y[i, g] = 1.0
    return y


def bce_multilabel_loss(probs, gold: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over categories (and over the batch, if any)."""
    probs = T.as_tensor(probs)
    if probs.shape[-1] == 0:
        raise ValueError("empty category space")
    y = np.asarray(gold, dtype=probs.dtype)
    if y.shape != probs.shape:
        raise ValueError(f"gold shape {y.shape} != probs shape {probs.shape}")
    p = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -T.mean(ll)


# ---------------------------------------------------------------- expert retrieval


def init_expert_pool(rng: np.random.Generator, n_experts: int, h: int, prefix: str = "ret") -> dict[str, Tensor]:
    if n_experts < 1:
        raise ValueError("expert pool is empty")
    return {
        f"{prefix}.E": Tensor(rng.normal(0.0, 1.0 / np.sqrt(h), size=(n_experts, h)).astype(T.DEFAULT_DTYPE),
                              requires_grad=True),
        f"{prefix}.M": Tensor(_glorot(rng, h, h, (h, h)), requires_grad=True),
    }


def score_experts(v_IT, params: Mapping[str, Tensor], prefix: str = "ret") -> Tensor:
    """score[b, i] = e_i^T M v_IT[b] for every expert in the pool -> [B, |E|]."""
    E, M = params[f"{prefix}.E"], params[f"{prefix}.M"]
    if E.shape[0] == 0:
        raise ValueError("expert pool is empty")
    v_IT = T.as_tensor(v_IT)
    if v_IT.shape[-1] != M.shape[1]:
        raise ValueError(f"score_experts: joint dim {v_IT.shape[-1]} != matching matrix {M.shape}")
    return v_IT @ T.swapaxes(E @ M, 0, 1)


def rank_experts(scores: np.ndarray, expert_ids: Sequence[int]) -> np.ndarray:
    """Expert ids ordered by descending score, ties by ascending id."""
    ids = np.asarray(expert_ids)
    order = np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))
    return ids[order]


def retrieval_loss(scores, answerers: Sequence[Sequence[int]], n_neg: int, rng: np.random.Generator) -> Tensor:
    """Sampled-softmax listwise loss.

    ``scores`` is [B, P] (or [P] for a single question); ``answerers[b]`` lists
    pool column indices of the relevant experts. Each positive competes against
    ``n_neg`` negatives drawn without replacement from the non-relevant pool
    (all of them if fewer remain); the loss is averaged over all positives.
    """
    scores = T.as_tensor(scores)
    if scores.ndim == 1:
        scores = T.reshape(scores, (1, -1))
        answerers = [answerers]
    B, P = scores.shape
    if len(answerers) != B:
        raise ValueError("one answerer list per score row required")
    rows: list[list[int]] = []
    for b, pos in enumerate(answerers):
        pos = sorted(set(int(p) for p in pos))
        if not pos:
            raise ValueError("question without relevant experts; filter it upstream")
        if pos[0] < 0 or pos[-1] >= P:
            raise ValueError("answerer index outside the pool")
        negatives = np.setdiff1d(np.arange(P), pos, assume_unique=True)
        for p in pos:
            if n_neg >= len(negatives):
                neg = negatives
            else:
                neg = rng.choice(negatives, size=n_neg, replace=False)
            rows.append([b * P + p] + [b * P + int(n) for n in neg])
    width = max(len(r) for r in rows)
    idx = np.zeros((len(rows), width), dtype=np.int64)
    keep = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        idx[i, : len(r)] = r
        idx[i, len(r):] = r[0]
        keep[i, : len(r)] = True
    flat = T.reshape(scores, (B * P,))
    cand = T.reshape(T.take(flat, idx.reshape(-1), axis=0), idx.shape)
    logp = T.log_softmax(cand, axis=-1, mask=None if keep.all() else keep)
    first = T.take(logp, np.zeros((len(rows), 1), dtype=np.int64), axis=1)
    return -T.mean(first)


# ---------------------------------------------------------------- auxiliary matching


def init_aux_head(rng: np.random.Generator, h: int, channels: int = 32, prefix: str = "aux") -> dict[str, Tensor]:
    if channels < 1:
        raise ValueError("aux head needs at least one channel")
    return {
        f"{prefix}.conv1.w": Tensor(_glorot(rng, h, channels, (h, channels)), requires_grad=True),
        f"{prefix}.conv1.b": Tensor(np.zeros(channels, T.DEFAULT_DTYPE), requires_grad=True),
        f"{prefix}.conv2.w": Tensor(_glorot(rng, channels, 1, (channels,)), requires_grad=True),
        f"{prefix}.conv2.b": Tensor(np.zeros((), T.DEFAULT_DTYPE), requires_grad=True),
    }


def aux_scores(joint, params: Mapping[str, Tensor], prefix: str = "aux") -> Tensor:
    """Two kernel-1 convolutions along the candidate axis: [B, 5, h] -> scores [B, 5]."""
    joint = T.as_tensor(joint)
    if joint.ndim != 3 or joint.shape[1] != N_CANDIDATES:
        raise ValueError(f"aux head needs exactly {N_CANDIDATES} candidates per anchor, got shape {joint.shape}")
    hidden = T.tanh(joint @ params[f"{prefix}.conv1.w"] + params[f"{prefix}.conv1.b"])
    return hidden @ params[f"{prefix}.conv2.w"] + params[f"{prefix}.conv2.b"]


def aux_match(joint, params: Mapping[str, Tensor], prefix: str = "aux") -> Tensor:
    return T.softmax(aux_scores(joint, params, prefix), axis=-1)


def aux_loss(joint, answer: np.ndarray, params: Mapping[str, Tensor], prefix: str = "aux") -> Tensor:
    """Cross-entropy of the 5-way matching softmax against the true candidate index."""
    logp = T.log_softmax(aux_scores(joint, params, prefix), axis=-1)
    pick = T.take(logp, np.asarray(answer, dtype=np.int64).reshape(-1, 1), axis=1)
    return -T.mean(pick)
