"""Finite-difference harness over every primitive op and the fusion / head compositions.

Each case builds a scalar function of a few small random inputs. The scalar is a
fixed random projection of the op output, so no two output entries share a
gradient by symmetry.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import encoders, fusion, heads
from . import tensor as T

TOLERANCE = {"float32": 1e-3, "float64": 1e-6}
B, D, K, M = 2, 4, 3, 3  # batch, feature dim, attention hidden size, regions


@dataclass
class Case:
    name: str
    inputs: dict[str, np.ndarray]
    fn: Callable[[dict[str, T.Tensor]], T.Tensor]


def _project(out: T.Tensor, rng_seed: int) -> T.Tensor:
    r = np.random.default_rng(rng_seed).normal(size=out.shape)
    return T.sum_(out * r.astype(out.dtype))


def _away_from(x: np.ndarray, points: Sequence[float], gap: float = 0.05) -> np.ndarray:
    """Nudge entries away from kinks so central differences stay on one side."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap)
    return x


def _distinct(x: np.ndarray, gap: float = 0.05) -> np.ndarray:
    """Spread values so no two entries lie within ``gap`` (keeps max/argmax stable under perturbation)."""
    flat = x.reshape(-1).copy()
    order = np.argsort(flat)
    flat[order] = np.sort(flat) + gap * np.arange(flat.size)
    return flat.reshape(x.shape)


def _with_pad_row(rest: T.Tensor) -> T.Tensor:
    return T.concat([T.Tensor(np.zeros((1, rest.shape[1]), rest.dtype)), rest], axis=0)


def _pool_margin(text: dict[str, np.ndarray], ids: np.ndarray, lengths: np.ndarray) -> float:
    """Smallest gap between the largest and second-largest valid conv output, over all filters."""
    ids = encoders.window_padded(ids, lengths)
    emb = np.vstack([np.zeros((1, text["text.emb"].shape[1])), text["text.emb"]])[ids]
    gap = np.inf
    for n in encoders.NGRAM_SIZES:
        h = T.conv1d(emb, text[f"text.conv{n}.w"], text[f"text.conv{n}.b"], n).data
        valid = np.arange(h.shape[1])[None, :] < lengths[:, None]
        for b in range(h.shape[0]):
            top = np.sort(h[b, valid[b]], axis=0)
            if top.shape[0] > 1:
                gap = min(gap, float(np.min(top[-1] - top[-2])))
    return gap


def _glorot(rng, *shape):
    fan = shape[0] + (shape[1] if len(shape) > 1 else 1)
    return rng.normal(0.0, np.sqrt(2.0 / fan), size=shape)


def _fusion_params(rng, kind: str, layers: int = 1) -> dict[str, np.ndarray]:
    p = fusion.init_fusion(rng, kind, d=D, k=K, m=M, layers=layers)
    # biases start at zero; randomise them so their gradients are exercised too
    return {k: v.data.astype(np.float64) + (rng.normal(0, 0.3, v.shape) if v.data.ndim <= 1 else 0.0)
            for k, v in p.items()}


def primitive_cases(seed: int) -> list[Case]:
    rng = np.random.default_rng([seed, 1])
    n = rng.normal
    mask = rng.random((B, 5)) > 0.3
    mask[:, 0] = True
    ids = rng.integers(0, 6, size=(B, 4))
    take_idx = rng.integers(0, 5, size=(B, 3))
    s = seed
    return [
        Case("add", {"a": n(size=(B, 3)), "b": n(size=(3,))}, lambda t: _project(T.add(t["a"], t["b"]), s)),
        Case("sub", {"a": n(size=(B, 3)), "b": n(size=(B, 1))}, lambda t: _project(T.sub(t["a"], t["b"]), s)),
        Case("neg", {"a": n(size=(B, 3))}, lambda t: _project(T.neg(t["a"]), s)),
        Case("mul", {"a": n(size=(B, 3)), "b": n(size=(B, 3))}, lambda t: _project(T.mul(t["a"], t["b"]), s)),
        Case("matmul", {"a": n(size=(B, 3)), "b": n(size=(3, 4))}, lambda t: _project(T.matmul(t["a"], t["b"]), s)),
        Case("matmul_batched", {"a": n(size=(B, 2, 3)), "b": n(size=(3,))},
             lambda t: _project(T.matmul(t["a"], t["b"]), s)),
        Case("matmul_bmm", {"a": n(size=(B, 2, 3)), "b": n(size=(B, 3, 2))},
             lambda t: _project(T.matmul(t["a"], t["b"]), s)),
        Case("tanh", {"a": n(size=(B, 4))}, lambda t: _project(T.tanh(t["a"]), s)),
        Case("sigmoid", {"a": n(size=(B, 4))}, lambda t: _project(T.sigmoid(t["a"]), s)),
        Case("relu", {"a": _away_from(n(size=(B, 4)), [0.0])}, lambda t: _project(T.relu(t["a"]), s)),
        Case("log", {"a": rng.uniform(0.5, 2.0, size=(B, 3))}, lambda t: _project(T.log(t["a"]), s)),
        Case("clip", {"a": _away_from(n(size=(B, 4)), [-0.5, 0.5])},
             lambda t: _project(T.clip(t["a"], -0.5, 0.5), s)),
        Case("softmax", {"a": n(size=(B, 5))}, lambda t: _project(T.softmax(t["a"]), s)),
        Case("softmax_masked", {"a": n(size=(B, 5))}, lambda t: _project(T.softmax(t["a"], mask=mask), s)),
        Case("log_softmax", {"a": n(size=(B, 5))}, lambda t: _project(T.log_softmax(t["a"]), s)),
        Case("log_softmax_masked", {"a": n(size=(B, 5))},
             lambda t: _project(T.take(T.log_softmax(t["a"], mask=mask), np.zeros((B, 1), np.int64), axis=1), s)),
        Case("concat", {"a": n(size=(B, 2)), "b": n(size=(B, 3))},
             lambda t: _project(T.concat([t["a"], t["b"]], axis=-1), s)),
        Case("max_over", {"a": _distinct(n(size=(B, 5, 2)))}, lambda t: _project(T.max_over(t["a"], axis=1), s)),
        Case("max_over_masked", {"a": _distinct(n(size=(B, 5, 2)))},
             lambda t: _project(T.max_over(t["a"], axis=1, mask=mask[:, :, None]), s)),
        Case("embedding", {"w": n(size=(6, 3))},
             lambda t: _project(T.embedding(t["w"], ids, padding_idx=None), s)),
        # the padding row is frozen by design, so only the other rows are inputs
        Case("embedding_padded", {"w": n(size=(5, 3))},
             lambda t: _project(T.embedding(_with_pad_row(t["w"]), ids), s)),
        Case("take", {"a": n(size=(B, 5))}, lambda t: _project(T.take(t["a"], take_idx, axis=1), s)),
        Case("conv1d", {"x": n(size=(B, 5, 2)), "w": n(size=(4, 3)), "b": n(size=(3,))},
             lambda t: _project(T.conv1d(t["x"], t["w"], t["b"], 2), s)),
        Case("sum", {"a": n(size=(B, 3))}, lambda t: _project(T.sum_(t["a"], axis=1), s)),
        Case("mean", {"a": n(size=(B, 3))}, lambda t: _project(T.mean(t["a"], axis=0), s)),
        Case("reshape", {"a": n(size=(B, 6))}, lambda t: _project(T.reshape(t["a"], (B, 2, 3)), s)),
        Case("swapaxes", {"a": n(size=(B, 3))}, lambda t: _project(T.swapaxes(t["a"], 0, 1), s)),
        Case("repeat", {"a": n(size=(B, 3))}, lambda t: _project(T.repeat(t["a"], 3, axis=0), s)),
    ]


def composition_cases(seed: int) -> list[Case]:
    rng = np.random.default_rng([seed, 2])
    n = rng.normal
    s = seed
    v_T, v_I, v_sp = np.tanh(n(size=(B, D))), np.tanh(n(size=(B, D))), np.tanh(n(size=(B, M, D)))
    cases = []

    # text CNN: redraw until every max-pool winner leads the runner-up by a clear margin
    vocab, E = 7, 2
    ids = np.array([[1, 2, 3, 4, 5], [6, 2, 5, 0, 0]])
    lengths = np.array([5, 3])
    while True:
        text = {k: v.data.astype(np.float64)
                for k, v in encoders.init_text_encoder(rng, vocab, E, (2, 2, 2), D).items()}
        text["text.emb"] = text.pop("text.emb")[1:]
        if _pool_margin(text, ids, lengths) > 0.05:
            break

    def encode(t):
        params = dict(t)
        params["text.emb"] = _with_pad_row(t["text.emb"])
        return _project(encoders.text_cnn_encode(ids, lengths, params), s)

    cases.append(Case("text_cnn_encode", text, encode))

    img = {"img.w": _glorot(rng, 5, D), "img.b": n(0, 0.3, size=(D,)), "x": n(size=(B, M, 5))}
    cases.append(Case("project_rows", img, lambda t: _project(encoders.project_rows(t["x"], t), s)))

    cases.append(Case("fuse_concat", {"v_T": v_T, "v_I": v_I},
                      lambda t: _project(fusion.fuse_concat(t["v_T"], t["v_I"]), s)))
    cases.append(Case("fuse_sum_prod_concat", {"v_T": v_T, "v_I": v_I},
                      lambda t: _project(fusion.fuse_sum_prod_concat(t["v_T"], t["v_I"]), s)))
    cases.append(Case("joint_embed", {"v_T": v_T, "v_img": v_I},
                      lambda t: _project(fusion.joint_embed(t["v_T"], t["v_img"]), s)))

    gw = _fusion_params(rng, "global_weight") | {"v_T": v_T, "v_I": v_I}
    cases.append(Case("fallback_text", dict(gw), lambda t: _project(fusion.fallback_text(t["v_T"], t), s)))
    cases.append(Case("global_weight_fuse", gw,
                      lambda t: _project(fusion.global_weight_fuse(t["v_I"], t["v_T"], t).joint, s)))

    for layers in (1, 2):
        san = _fusion_params(rng, "san", layers) | {"v_T": v_T, "v_sp": v_sp}
        cases.append(Case(f"san_attend_{layers}", san,
                          lambda t, L=layers: _project(
                              fusion.joint_embed(t["v_T"], fusion.san_attend(t["v_sp"], t["v_T"], t, L)[1]), s)))

    gwa = _fusion_params(rng, "global_weight_attention") | {"v_T": v_T, "v_sp": v_sp}
    for drop in (False, True):
        cases.append(Case("global_weight_attention" + ("_masked" if drop else ""), dict(gwa),
                          lambda t, dr=drop: _project(
                              fusion.global_weight_attention_fuse(t["v_sp"], t["v_T"], t, drop_fallback=dr).joint, s)))

    h = 2 * D
    joint = n(size=(B, h))
    cls = {"cls.w": _glorot(rng, h, 4), "cls.b": n(0, 0.3, size=(4,)), "joint": joint}
    gold = heads.multi_hot([[0, 2], [3]], 4)
    cases.append(Case("classify_bce", cls,
                      lambda t: heads.bce_multilabel_loss(heads.classify(t["joint"], t), gold)))

    ret = {"ret.E": n(0, 0.5, size=(6, h)), "ret.M": _glorot(rng, h, h), "joint": joint}
    answerers = [[1], [0, 4]]
    cases.append(Case("retrieval_loss", ret,
                      lambda t: heads.retrieval_loss(heads.score_experts(t["joint"], t), answerers, 3,
                                                     np.random.default_rng(s))))

    aux_params = {"aux.conv1.w": _glorot(rng, h, 3), "aux.conv1.b": n(0, 0.3, size=(3,)),
           "aux.conv2.w": _glorot(rng, 3), "joint": n(size=(B, 5, h))}
    answer = np.array([2, 4])
    # the output bias shifts all five scores equally, so its gradient is identically zero; held fixed here

    def aux(t):
        return heads.aux_loss(t["joint"], answer, dict(t) | {"aux.conv2.b": T.Tensor(np.array(0.1, t["joint"].dtype))})

    cases.append(Case("aux_loss", aux_params, aux))
    return cases


def all_cases(seed: int) -> list[Case]:
    return primitive_cases(seed) + composition_cases(seed)


def case_names() -> list[str]:
    return [c.name for c in all_cases(0)]


@dataclass
class HarnessRow:
    case: str
    dtype: str
    worst_input: str
    max_rel_error: float
    worst_seed: int
    passed: bool


def run_harness(seeds: Sequence[int] = range(100), max_coords: int | None = 4,
                only: Sequence[str] | None = None) -> tuple[list[HarnessRow], float]:
    """Check every case at float32 and float64 for each seed; returns the worst error per (case, dtype)."""
    t0 = time.perf_counter()
    worst: dict[tuple[str, str], tuple[float, str, int]] = {}
    for seed in seeds:
        for case in all_cases(seed):
            if only and case.name not in only:
                continue
            names = list(case.inputs)

            def f(ts, names=names, case=case):
                return case.fn(dict(zip(names, ts)))

            reports = T.grad_check_dtypes(f, [case.inputs[k] for k in names], ("float32", "float64"),
                                          epsilon=1e-3, names=names, max_coords=max_coords, order=4,
                                          rng=np.random.default_rng([seed, 3]))
            for dtype, rep in reports.items():
                for e in rep.entries:
                    key = (case.name, dtype)
                    if key not in worst or e.max_rel_error > worst[key][0]:
                        worst[key] = (e.max_rel_error, e.name, seed)
    rows = [HarnessRow(c, d, w[1], w[0], w[2], w[0] < TOLERANCE[d]) for (c, d), w in worst.items()]
    return rows, time.perf_counter() - t0
