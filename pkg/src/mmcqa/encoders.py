"""Text CNN and image-feature encoders, plus the vocabulary and feature-file formats."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, UNK, URL = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<url>")
MAX_LEN = 256
MIN_LEN = 3
NGRAM_SIZES = (1, 2, 3)

_URL_RE = re.compile(r"(?:https?://|www\.)\S+")
_HTML_RE = re.compile(r"<[^>]+>|&[a-zA-Z]+;|&#\d+;")

Params = dict  # name -> Tensor


class FeatureStoreError(ValueError):
    pass


def whitespace_tokenizer(text: str) -> list[str]:
    return text.split()


def normalize_text(text: str) -> str:
    """Strip HTML markup/entities and replace URLs with the URL marker."""
    text = _HTML_RE.sub(" ", text)
    return _URL_RE.sub(f" {RESERVED[URL]} ", text)


class Vocabulary:
    """Token <-> id map. Ids 0, 1, 2 are PAD, UNK and URL."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = len(self.itos)
            self.itos.append(token)
            self.stoi[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str], tokenizer: Callable[[str], list[str]] = whitespace_tokenizer,
              min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenizer(normalize_text(text)):
                counts[tok] = counts.get(tok, 0) + 1
        vocab = cls()
        for tok in sorted(counts, key=lambda t: (-counts[t], t)):
            if counts[tok] >= min_count and tok not in RESERVED:
                vocab.add(tok)
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:3]) != RESERVED:
            raise ValueError(f"{path}: first three vocabulary lines must be {RESERVED}")
        vocab = cls()
        for tok in lines[3:]:
            vocab.add(tok)
        return vocab


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    length: int  # original (unpadded) length; 0 for empty text


def tokenize(text: str, vocab: Vocabulary,
             tokenizer: Callable[[str], list[str]] = whitespace_tokenizer,
             max_len: int = MAX_LEN) -> TokenSequence:
    words = tokenizer(normalize_text(text))[:max_len]
    ids = tuple(vocab.id(w) for w in words)
    if not ids:
        return TokenSequence((PAD,), 0)
    return TokenSequence(ids, len(ids))


def pad_batch(seqs: Sequence[Sequence[int]], min_len: int = MIN_LEN, max_len: int = MAX_LEN):
    """Right-pad id lists into ``ids`` [B, L] and return per-row real lengths (at least 1)."""
    lengths = np.array([max(1, min(len(s), max_len)) for s in seqs], dtype=np.int64)
    L = max(min_len, int(lengths.max()) if len(seqs) else min_len)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        n = min(len(s), max_len)
        ids[i, :n] = s[:n]
    return ids, lengths


# ---------------------------------------------------------------- text CNN


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape).astype(T.DEFAULT_DTYPE)


def init_text_encoder(rng: np.random.Generator, vocab_size: int, emb_dim: int = 32,
                      filters: Sequence[int] = (32, 64, 64), d: int = 64, prefix: str = "text") -> Params:
    if len(filters) != len(NGRAM_SIZES) or min(filters) <= 0:
        raise ValueError(f"need one positive filter count per n-gram size, got {filters}")
    emb = rng.normal(0.0, 0.5, size=(vocab_size, emb_dim)).astype(T.DEFAULT_DTYPE)
    emb[PAD] = 0.0
    p = {f"{prefix}.emb": Tensor(emb, requires_grad=True)}
    for n, f in zip(NGRAM_SIZES, filters):
        p[f"{prefix}.conv{n}.w"] = Tensor(_glorot(rng, n * emb_dim, f, (n * emb_dim, f)), requires_grad=True)
        p[f"{prefix}.conv{n}.b"] = Tensor(np.zeros(f, T.DEFAULT_DTYPE), requires_grad=True)
    total = sum(filters)
    p[f"{prefix}.proj.w"] = Tensor(_glorot(rng, total, d, (total, d)), requires_grad=True)
    p[f"{prefix}.proj.b"] = Tensor(np.zeros(d, T.DEFAULT_DTYPE), requires_grad=True)
    return p


def window_padded(ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Right-pad so every window that starts on a real token exists for the widest filter.

    Without this the set of pooled strides would depend on how much padding the
    batch happens to carry.
    """
    need = int(lengths.max(initial=0)) + max(NGRAM_SIZES) - 1
    if ids.shape[1] >= need:
        return ids
    return np.pad(ids, ((0, 0), (0, need - ids.shape[1])), constant_values=PAD)


def text_cnn_encode(ids: np.ndarray, lengths: np.ndarray, params: Mapping[str, Tensor],
                    prefix: str = "text") -> Tensor:
    """Batched text CNN: [B, L] ids -> v_T [B, d].

    Each n-gram width is convolved, max-pooled over strides that
    start on a real token, squashed with tanh, concatenated, then projected with tanh.
    """
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] < MIN_LEN:
        raise ValueError(f"ids must be [B, L>={MIN_LEN}], got {ids.shape}")
    ids = window_padded(ids, lengths)
    emb = params[f"{prefix}.emb"]
    x = T.embedding(emb, ids, padding_idx=PAD)
    pooled = []
    for n in NGRAM_SIZES:
        h = T.conv1d(x, params[f"{prefix}.conv{n}.w"], params[f"{prefix}.conv{n}.b"], n)
        valid = np.arange(h.shape[1])[None, :] < lengths[:, None]
        # tanh is monotone, so pooling first gives the same features at a fraction of the cost
        pooled.append(T.tanh(T.max_over(h, axis=1, mask=valid[:, :, None])))
    feats = T.concat(pooled, axis=-1)
    return T.tanh(feats @ params[f"{prefix}.proj.w"] + params[f"{prefix}.proj.b"])


def encode_sequence(seq: TokenSequence, params: Mapping[str, Tensor], prefix: str = "text") -> Tensor:
    """Single-sequence convenience wrapper around :func:`text_cnn_encode`; returns [d]."""
    ids, lengths = pad_batch([seq.tokens])
    vocab_size = params[f"{prefix}.emb"].shape[0]
    if ids.max() >= vocab_size:
        raise ValueError(f"token id {int(ids.max())} out of range for vocabulary of {vocab_size}")
    return T.reshape(text_cnn_encode(ids, lengths, params, prefix), (-1,))


# ---------------------------------------------------------------- image features

MAGIC = b"CQAF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class ImageFeatures:
    id: int
    flat: np.ndarray  # [D_img]
    spatial: np.ndarray  # [m, D_img]


def write_feature_file(path: str | Path, ids: Sequence[int], spatial: np.ndarray) -> None:
    """Write ``spatial`` [N, m, D_img] records (m = 1 for flat-only stores)."""
    spatial = np.ascontiguousarray(spatial, dtype="<f4")
    if spatial.ndim != 3 or spatial.shape[0] != len(ids):
        raise FeatureStoreError(f"expected [N, m, D] features for {len(ids)} ids, got {spatial.shape}")
    n, m, dim = spatial.shape
    rec = np.dtype([("id", "<u8"), ("x", "<f4", (m * dim,))])
    arr = np.empty(n, dtype=rec)
    arr["id"] = np.asarray(ids, dtype=np.uint64)
    arr["x"] = spatial.reshape(n, m * dim)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, m, dim))
        fh.write(arr.tobytes())


class FeatureStore:
    """Read-only view of a feature file, indexed by sample id.

    ``reads`` counts rows served, so callers can verify a variant never touches images.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        raw = self.path.read_bytes()
        if len(raw) < _HEADER.size:
            raise FeatureStoreError(f"{path}: truncated header")
        magic, version, count, m, dim = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise FeatureStoreError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FeatureStoreError(f"{path}: unsupported version {version}")
        if m < 1 or dim < 1:
            raise FeatureStoreError(f"{path}: invalid dims m={m}, D_img={dim}")
        rec = np.dtype([("id", "<u8"), ("x", "<f4", (m * dim,))])
        body = len(raw) - _HEADER.size
        if body != count * rec.itemsize:
            raise FeatureStoreError(
                f"{path}: corrupt records, header says {count} x (id + {m}x{dim} floats) "
                f"= {count * rec.itemsize} bytes, found {body}"
            )
        arr = np.frombuffer(raw, dtype=rec, count=count, offset=_HEADER.size)
        self.m, self.dim = m, dim
        self.ids = arr["id"].astype(np.int64)
        self._data = arr["x"].reshape(count, m, dim)
        self._index = {int(i): k for k, i in enumerate(self.ids)}
        if len(self._index) != count:
            raise FeatureStoreError(f"{path}: duplicate ids")
        self.reads = 0

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sid: int) -> bool:
        return int(sid) in self._index

    def rows(self, ids: Sequence[int]) -> np.ndarray:
        try:
            idx = [self._index[int(i)] for i in ids]
        except KeyError as exc:
            raise FeatureStoreError(f"{self.path}: missing id {exc.args[0]}") from None
        out = self._data[idx]
        if not np.all(np.isfinite(out)):
            raise FeatureStoreError(f"{self.path}: non-finite feature values")
        self.reads += len(idx)
        return out

    def spatial(self, ids: Sequence[int]) -> np.ndarray:
        return self.rows(ids).astype(T.DEFAULT_DTYPE)

    def flat(self, ids: Sequence[int]) -> np.ndarray:
        return self.rows(ids).mean(axis=1, dtype=np.float64).astype(T.DEFAULT_DTYPE)


def load_image_features(store: FeatureStore, sid: int) -> ImageFeatures:
    spatial = store.spatial([sid])[0]
    return ImageFeatures(int(sid), spatial.mean(axis=0, dtype=np.float64).astype(spatial.dtype), spatial)


def init_image_projector(rng: np.random.Generator, d_img: int = 64, d: int = 64, prefix: str = "img") -> Params:
    return {
        f"{prefix}.w": Tensor(_glorot(rng, d_img, d, (d_img, d)), requires_grad=True),
        f"{prefix}.b": Tensor(np.zeros(d, T.DEFAULT_DTYPE), requires_grad=True),
    }


def project_rows(x, params: Mapping[str, Tensor], prefix: str = "img") -> Tensor:
    """tanh(x W + b) on the last axis; works for flat [.., D_img] and spatial [.., m, D_img] inputs."""
    w = params[f"{prefix}.w"]
    x = T.as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"image feature dim {x.shape[-1]} != projector input dim {w.shape[0]}")
    return T.tanh(x @ w + params[f"{prefix}.b"])


def project_image(f: ImageFeatures, params: Mapping[str, Tensor], prefix: str = "img") -> tuple[Tensor, Tensor]:
    """Return (v_I [d], v_spI [m, d]) for a single sample."""
    return project_rows(f.flat, params, prefix), project_rows(f.spatial, params, prefix)


class ArrayFeatureStore:
    """In-memory stand-in for :class:`FeatureStore` (same ``spatial``/``flat``/``reads`` surface)."""

    def __init__(self, ids: Sequence[int], spatial: np.ndarray):
        spatial = np.asarray(spatial)
        if spatial.ndim != 3 or spatial.shape[0] != len(ids):
            raise FeatureStoreError(f"expected [N, m, D] features for {len(ids)} ids, got {spatial.shape}")
        self.ids = np.asarray(ids, dtype=np.int64)
        self.m, self.dim = spatial.shape[1:]
        self._data = spatial
        self._index = {int(i): k for k, i in enumerate(self.ids)}
        self.reads = 0

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sid: int) -> bool:
        return int(sid) in self._index

    rows = FeatureStore.rows
    spatial = FeatureStore.spatial
    flat = FeatureStore.flat

    @property
    def path(self) -> str:
        return "<memory>"
