"""Assembling encoders, fusion and heads into trainable task models."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import encoders, fusion, heads
from . import tensor as T
from .tensor import Tensor

TASKS = ("classification", "retrieval", "auxiliary")
SPATIAL_FUSIONS = ("san", "global_weight_attention")
IMAGE_FUSIONS = ("image", "concat", "sum_prod_concat", "global_weight") + SPATIAL_FUSIONS


@dataclass(frozen=True)
class Architecture:
    fusion: str = "global_weight_attention"
    san_layers: int = 1
    d: int = 64
    k: int = 64
    emb_dim: int = 32
    filters: tuple[int, int, int] = (32, 64, 64)
    d_img: int = 64
    regions: int = 49
    aux_channels: int = 32
    extra_fc: int = 0  # width of two extra FC layers after the joint embedding (0 = none)

    def __post_init__(self):
        if self.fusion not in fusion.FUSION_KINDS:
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @property
    def uses_image(self) -> bool:
        return self.fusion in IMAGE_FUSIONS

    @property
    def uses_text(self) -> bool:
        return self.fusion != "image"

    @property
    def spatial(self) -> bool:
        return self.fusion in SPATIAL_FUSIONS

    @property
    def joint_dim(self) -> int:
        return self.d if self.fusion in ("text", "image") else 2 * self.d

    @property
    def head_dim(self) -> int:
        return self.extra_fc or self.joint_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d


@dataclass
class Split:
    """One data split in model-ready arrays."""

    name: str
    ids: np.ndarray  # [n, Lmax] token ids, PAD-padded
    lengths: np.ndarray  # [n]
    labels: np.ndarray  # [n, C] multi-hot
    relevant: list[list[int]]  # pool column indices per sample
    feature_ids: np.ndarray  # [n]
    store: "encoders.FeatureStore | None" = None
    _spatial: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.lengths)

    @property
    def spatial(self) -> np.ndarray:
        if self._spatial is None:
            if self.store is None:
                raise ValueError(f"split {self.name!r} has no feature store")
            self._spatial = self.store.spatial(self.feature_ids)
        return self._spatial

    def token_batch(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lengths = self.lengths[rows]
        width = max(encoders.MIN_LEN, int(lengths.max()))
        return self.ids[rows, :width], lengths


class Model:
    """Parameters plus forward passes for one task.

    ``frozen`` names are excluded from updates; frozen text encoders are
    evaluated once per split and cached.
    """

    def __init__(self, arch: Architecture, task: str, params: dict[str, Tensor], vocab_size: int,
                 n_categories: int = 0, n_experts: int = 0):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.arch = arch
        self.task = task
        self.params = params
        self.vocab_size = vocab_size
        self.n_categories = n_categories
        self.n_experts = n_experts
        self.frozen: set[str] = set()
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    # ------------------------------------------------------------ construction

    @classmethod
    def build(cls, arch: Architecture, task: str, rng: np.random.Generator, vocab_size: int,
              n_categories: int = 0, n_experts: int = 0) -> "Model":
        p: dict[str, Tensor] = {}
        if arch.uses_text:
            p.update(encoders.init_text_encoder(rng, vocab_size, arch.emb_dim, arch.filters, arch.d, "text"))
        if arch.uses_image:
            p.update(encoders.init_image_projector(rng, arch.d_img, arch.d, "img"))
        p.update(fusion.init_fusion(rng, arch.fusion, arch.d, arch.k, arch.regions, arch.san_layers, "fuse"))
        if arch.extra_fc:
            w = arch.extra_fc
            p["fc1.w"] = Tensor(encoders._glorot(rng, arch.joint_dim, w, (arch.joint_dim, w)), requires_grad=True)
            p["fc1.b"] = Tensor(np.zeros(w, T.DEFAULT_DTYPE), requires_grad=True)
            p["fc2.w"] = Tensor(encoders._glorot(rng, w, w, (w, w)), requires_grad=True)
            p["fc2.b"] = Tensor(np.zeros(w, T.DEFAULT_DTYPE), requires_grad=True)
        if task == "classification":
            p.update(heads.init_classifier(rng, arch.head_dim, n_categories))
        elif task == "retrieval":
            p.update(heads.init_expert_pool(rng, n_experts, arch.head_dim))
        else:
            p.update(heads.init_aux_head(rng, arch.head_dim, arch.aux_channels))
        return cls(arch, task, p, vocab_size, n_categories, n_experts)

    def attach_aux_text(self, aux: "Model") -> None:
        """Add a frozen copy of ``aux``'s text encoder and a reduction layer back to d.

        The reduction starts as [I; 0] so the model initially reproduces its
        own-text behaviour.
        """
        d = self.arch.d
        for name, t in aux.params.items():
            if name.startswith("text."):
                new = "auxtext." + name[len("text."):]
                self.params[new] = Tensor(t.data.copy(), requires_grad=True)
                self.frozen.add(new)
        w = np.zeros((2 * d, d), dtype=T.DEFAULT_DTYPE)
        w[:d] = np.eye(d, dtype=T.DEFAULT_DTYPE)
        self.params["reduce.w"] = Tensor(w, requires_grad=True)
        self.params["reduce.b"] = Tensor(np.zeros(d, T.DEFAULT_DTYPE), requires_grad=True)

    @property
    def has_aux_text(self) -> bool:
        return "reduce.w" in self.params

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def freeze(self, prefix: str) -> None:
        self.frozen.update(k for k in self.params if k.startswith(prefix))

    def unfreeze(self, prefix: str) -> None:
        self.frozen.difference_update(k for k in self.params if k.startswith(prefix))
        self._cache = {k: v for k, v in self._cache.items() if k[1] != prefix.rstrip(".")}

    def n_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()

    # ------------------------------------------------------------ forward pieces

    def _encode(self, split: Split, rows: np.ndarray, prefix: str) -> Tensor:
        frozen = f"{prefix}.emb" in self.frozen
        if frozen:
            key = (split.name, prefix)
            cache = self._cache.get(key)
            if cache is None:
                cache = self._encode_all(split, prefix)
                self._cache[key] = cache
            return Tensor(cache[rows])
        ids, lengths = split.token_batch(rows)
        return encoders.text_cnn_encode(ids, lengths, self.params, prefix)

    def _encode_all(self, split: Split, prefix: str, batch: int = 512) -> np.ndarray:
        parts = []
        for lo in range(0, len(split), batch):
            rows = np.arange(lo, min(lo + batch, len(split)))
            ids, lengths = split.token_batch(rows)
            parts.append(encoders.text_cnn_encode(ids, lengths, self.params, prefix).data)
        return np.concatenate(parts, axis=0)

    def text_vectors(self, split: Split, rows: np.ndarray) -> Tensor:
        v = self._encode(split, rows, "text")
        if self.has_aux_text:
            a = self._encode(split, rows, "auxtext")
            v = T.concat([v, a], axis=-1) @ self.params["reduce.w"] + self.params["reduce.b"]
        return v

    def image_vectors(self, split: Split, rows: np.ndarray) -> Tensor:
        """Projected image input: [B, m, d] for attention fusions, [B, d] otherwise."""
        sp = split.spatial[rows]
        if self.arch.spatial:
            return encoders.project_rows(sp, self.params, "img")
        flat = sp.mean(axis=1, dtype=np.float64).astype(sp.dtype)
        return encoders.project_rows(flat, self.params, "img")

    def fuse(self, v_T: Tensor | None, v_img: Tensor | None, drop_fallback: bool = False) -> fusion.FusionOutput:
        kind = self.arch.fusion
        p = self.params
        if kind == "text":
            out = fusion.FusionOutput(v_T)
        elif kind == "image":
            out = fusion.FusionOutput(v_img)
        elif kind == "concat":
            out = fusion.FusionOutput(fusion.fuse_concat(v_T, v_img))
        elif kind == "sum_prod_concat":
            out = fusion.FusionOutput(fusion.fuse_sum_prod_concat(v_T, v_img))
        elif kind == "san":
            alpha, att = fusion.san_attend(v_img, v_T, p, self.arch.san_layers)
            out = fusion.FusionOutput(fusion.joint_embed(v_T, att), alpha.data.copy(), None)
        elif kind == "global_weight":
            out = fusion.global_weight_fuse(v_img, v_T, p)
        else:
            out = fusion.global_weight_attention_fuse(v_img, v_T, p, drop_fallback=drop_fallback)
        if self.arch.extra_fc:
            h = T.tanh(out.joint @ p["fc1.w"] + p["fc1.b"])
            out.joint = T.tanh(h @ p["fc2.w"] + p["fc2.b"])
        return out

    def joint(self, split: Split, rows: np.ndarray) -> fusion.FusionOutput:
        v_T = self.text_vectors(split, rows) if self.arch.uses_text else None
        v_img = self.image_vectors(split, rows) if self.arch.uses_image else None
        return self.fuse(v_T, v_img)

    # ------------------------------------------------------------ task outputs

    def classify(self, split: Split, rows: np.ndarray) -> tuple[Tensor, fusion.FusionOutput]:
        out = self.joint(split, rows)
        return heads.classify(out.joint, self.params), out

    def score(self, split: Split, rows: np.ndarray) -> tuple[Tensor, fusion.FusionOutput]:
        out = self.joint(split, rows)
        return heads.score_experts(out.joint, self.params), out

    def aux_joint(self, split: Split, anchors: np.ndarray, candidates: np.ndarray, direction: str) -> Tensor:
        """Joint embeddings [B, 5, h] of each anchor paired with its five candidates."""
        B = len(anchors)
        flat = candidates.reshape(-1)
        if direction == "image_to_text":
            v_T = self.text_vectors(split, flat) if self.arch.uses_text else None
            v_img = None
            if self.arch.uses_image:
                v_img = T.repeat(self.image_vectors(split, anchors), heads.N_CANDIDATES, axis=0)
        elif direction == "text_to_image":
            v_T = None
            if self.arch.uses_text:
                v_T = T.repeat(self.text_vectors(split, anchors), heads.N_CANDIDATES, axis=0)
            v_img = self.image_vectors(split, flat) if self.arch.uses_image else None
        else:
            raise ValueError(f"unknown matching direction {direction!r}")
        j = self.fuse(v_T, v_img).joint
        return T.reshape(j, (B, heads.N_CANDIDATES, j.shape[-1]))


def count_params(arch: Architecture, task: str, vocab_size: int, n_categories: int = 0, n_experts: int = 0,
                 aux_text: bool = False) -> int:
    """Parameter count of a model built from ``arch`` (plus an attached aux text encoder)."""
    model = Model.build(arch, task, np.random.default_rng(0), vocab_size, n_categories, n_experts)
    n = model.n_params()
    if aux_text:
        n += sum(v.size for k, v in model.params.items() if k.startswith("text."))
        n += 2 * arch.d * arch.d + arch.d
    return n


def match_param_budget(base: Architecture, target: int, mode: str, vocab_size: int, n_categories: int,
                       tol: float = 0.02, filter_scales: Sequence[float] = (2.0, 1.5, 1.0, 3.0)) -> Architecture:
    """Grow a stacked-attention architecture until its size is within ``tol`` of ``target``.

    ``big_att`` widens the text filters and the attention size k; ``big_fc``
    appends two FC layers and searches their width.
    """

    def size(a: Architecture) -> int:
        return count_params(a, "classification", vocab_size, n_categories)

    if mode == "big_fc":
        best = None
        for w in range(1, 8 * base.joint_dim + 1):
            a = replace(base, extra_fc=w)
            n = size(a)
            if best is None or abs(n - target) < abs(best[1] - target):
                best = (a, n)
            if n > target:
                break
    elif mode == "big_att":
        best = None
        for scale in filter_scales:
            filt = tuple(max(1, int(round(f * scale))) for f in base.filters)
            a0 = replace(base, filters=filt, k=1)
            n0 = size(a0)
            slope = size(replace(a0, k=2)) - n0
            k = max(1, int(round((target - n0) / slope)) + 1) if slope > 0 else 1
            a = replace(a0, k=k)
            n = size(a)
            if best is None or abs(n - target) < abs(best[1] - target):
                best = (a, n)
            if abs(n - target) <= tol * target:
                break
    else:
        raise ValueError(f"unknown budget mode {mode!r}")
    arch, n = best
    if abs(n - target) > tol * target:
        raise ValueError(f"could not match parameter budget {target} within {tol:.0%} (best {n})")
    return arch
