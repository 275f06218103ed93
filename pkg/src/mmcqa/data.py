"""Question records, splits, expert pools, auxiliary matching sets and the synthetic corpus.

The synthetic generator mimics the properties of image-based CQA data that
matter here: long noisy texts, a fraction of texts with no topical words,
images that are sometimes pure placeholders, and a small number of image
regions that carry the question's categories. Every latent draw is kept in an
:class:`Oracle` so exact Bayes posteriors can be computed as ceilings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .encoders import Vocabulary, write_feature_file

CATEGORY_COUNT_PROBS = (0.15, 0.35, 0.50)  # P(|gold| = 1, 2, 3)
SECONDS_PER_DAY = 86_400


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class QuestionSample:
    id: int
    tokens: tuple[str, ...]
    feature_id: int
    categories: tuple[int, ...]
    answerers: tuple[int, ...] = ()
    timestamp: int = 0

    def __post_init__(self):
        if not self.categories:
            raise DataError(f"sample {self.id}: gold categories must be non-empty")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "tokens": self.text,
                "categories": list(self.categories),
                "answerers": list(self.answerers),
                "timestamp": self.timestamp,
                "feature_id": self.feature_id,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "QuestionSample":
        rec = json.loads(line)
        return cls(
            id=int(rec["id"]),
            tokens=tuple(rec["tokens"].split()),
            feature_id=int(rec["feature_id"]),
            categories=tuple(int(c) for c in rec["categories"]),
            answerers=tuple(int(a) for a in rec.get("answerers", ())),
            timestamp=int(rec.get("timestamp", 0)),
        )


def write_samples(path: str | Path, samples: Iterable[QuestionSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_samples(path: str | Path) -> list[QuestionSample]:
    with open(path, encoding="utf-8") as fh:
        return [QuestionSample.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- taxonomy


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    parent: int = -1


class Taxonomy:
    def __init__(self, categories: Iterable[Category]):
        self.categories = {c.id: c for c in categories}
        for c in self.categories.values():
            if c.parent != -1 and c.parent not in self.categories:
                raise DataError(f"category {c.id} has unknown parent {c.parent}")

    def __len__(self) -> int:
        return len(self.categories)

    def flatten(self, labels: Iterable[int]) -> tuple[int, ...]:
        """Add every ancestor of each label (a 'A > B' tag is labeled as both A and B)."""
        out: set[int] = set()
        for c in labels:
            if c not in self.categories:
                raise DataError(f"category {c} is not in the taxonomy")
            while c != -1 and c not in out:
                out.add(c)
                c = self.categories[c].parent
        return tuple(sorted(out))

    def save(self, path: str | Path) -> None:
        lines = [f"{c.id}\t{c.name}\t{c.parent}" for c in sorted(self.categories.values(), key=lambda c: c.id)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Taxonomy":
        cats = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                cid, name, parent = line.split("\t")
                cats.append(Category(int(cid), name, int(parent)))
        return cls(cats)


# ---------------------------------------------------------------- splits, pools, aux sets


def split_dataset(samples: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle into train/valid/test; train takes the rounding remainder."""
    n = len(samples)
    if n < 10:
        raise DataError(f"need at least 10 samples to split, got {n}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three fractions summing to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(math.floor(n * ratios[1]))
    n_test = int(math.floor(n * ratios[2]))
    n_train = n - n_valid - n_test
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return (
        pick(order[:n_train]),
        pick(order[n_train:n_train + n_valid]),
        pick(order[n_train + n_valid:]),
    )


def build_expert_pool(samples: Sequence[QuestionSample], window: tuple[int, int], threshold: int) -> list[int]:
    """Users with strictly more than ``threshold`` answers inside ``[start, end)``, sorted by id."""
    start, end = window
    if end <= start:
        raise DataError(f"empty time window {window}")
    counts: dict[int, int] = {}
    for s in samples:
        if start <= s.timestamp < end:
            for a in s.answerers:
                counts[a] = counts.get(a, 0) + 1
    return sorted(u for u, c in counts.items() if c > threshold)


def relevant_experts(sample: QuestionSample, pool_index: dict[int, int]) -> list[int]:
    """Pool column indices of the sample's answerers that are in the pool."""
    return sorted({pool_index[a] for a in sample.answerers if a in pool_index})


@dataclass(frozen=True)
class AuxSample:
    """One 5-way matching item; ``anchor`` and ``candidates`` are positions in the split."""

    anchor: int
    candidates: tuple[int, ...]
    answer: int
    direction: str  # "image_to_text" or "text_to_image"


def build_aux_datasets(samples: Sequence, seed: int) -> tuple[list[AuxSample], list[AuxSample]]:
    """Build D^IT (image anchor, 5 texts) and D^TI (text anchor, 5 images) over one split.

    Negatives are 4 other samples drawn uniformly without replacement; the true
    pair sits at a uniform position.
    """
    n_samples = len(samples)
    if n_samples < 5:
        raise DataError(f"need at least 5 samples for 5-way matching, got {n_samples}")
    rng = np.random.default_rng(seed)
    out = []
    for direction in ("image_to_text", "text_to_image"):
        items = []
        for i in range(n_samples):
            neg = rng.choice(n_samples - 1, size=4, replace=False)
            neg = neg + (neg >= i)  # skip the anchor itself
            pos = int(rng.integers(5))
            cand = [int(x) for x in neg]
            cand.insert(pos, i)
            items.append(AuxSample(i, tuple(cand), pos, direction))
        out.append(items)
    return out[0], out[1]


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class SyntheticConfig:
    n_categories: int = 12
    n_samples: int = 10_000
    seed: int = 7
    # text
    mean_length: int = 70
    topic_concentration: float = 0.15  # share of tokens drawn from the categories' topic words
    object_rate: float = 0.04  # share of tokens naming the pictured object
    topic_words_per_category: int = 30
    topic_pool: int = 240
    noise_vocab: int = 1500
    p_text_ambiguous: float = 0.3
    # image
    d_img: int = 64
    regions: int = 49
    signal_regions: int = 3
    noise_std: float = 1.0
    p_placeholder: float = 0.2
    n_objects: int = 48
    words_per_object: int = 2
    # experts
    n_experts: int = 150
    n_casual_users: int = 2000
    p_casual_answer: float = 0.3
    max_answers: int = 3
    affinity_sharpness: float = 3.0
    days: int = 365

    def validate(self) -> None:
        for name in ("topic_concentration", "object_rate", "p_text_ambiguous", "p_placeholder", "p_casual_answer"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must be in [0, 1], got {v}")
        if self.topic_concentration + self.object_rate > 1.0:
            raise DataError("topic_concentration + object_rate must not exceed 1")
        for name in ("n_categories", "n_samples", "mean_length", "topic_words_per_category", "topic_pool",
                     "noise_vocab", "d_img", "regions", "n_objects", "words_per_object", "n_experts", "days"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.n_categories < 3:
            raise DataError("need at least 3 categories (questions carry up to 3)")
        if self.topic_words_per_category > self.topic_pool:
            raise DataError("topic_words_per_category exceeds topic_pool")
        if not 1 <= self.signal_regions < self.regions:
            raise DataError("signal_regions must be in [1, regions)")
        if self.noise_std <= 0:
            raise DataError("noise_std must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def topic_word(i: int) -> str:
    return f"t{i:04d}"


def noise_word(i: int) -> str:
    return f"w{i:04d}"


def object_word(o: int, j: int) -> str:
    return f"o{o:03d}{chr(ord('a') + j)}"


@dataclass
class Oracle:
    """Generative parameters and per-sample latent draws of a synthetic corpus."""

    config: SyntheticConfig
    category_prototypes: np.ndarray  # [C, D]
    object_prototypes: np.ndarray  # [O, D]
    topic_dist: np.ndarray  # [C, topic_pool], rows sum to 1
    expert_affinity: np.ndarray  # [n_experts, C]
    expert_rate: np.ndarray  # [n_experts], base answering propensity
    objects: np.ndarray  # [N]
    text_ambiguous: np.ndarray  # [N] bool
    placeholder: np.ndarray  # [N] bool
    signal_positions: np.ndarray  # [N, signal_regions]
    object_position: np.ndarray  # [N]

    def save(self, path: str | Path) -> None:
        arrays = {k: v for k, v in dataclasses.asdict(self).items() if k != "config"}
        np.savez(path, config=json.dumps(self.config.to_dict()), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Oracle":
        with np.load(path) as z:
            cfg = SyntheticConfig(**json.loads(str(z["config"])))
            return cls(cfg, **{k: z[k] for k in z.files if k != "config"})

    # ------------------------------------------------------------ Bayes ceilings

    def category_subsets(self) -> list[tuple[int, ...]]:
        C = self.config.n_categories
        return [s for k in (1, 2, 3) for s in itertools.combinations(range(C), k)]

    def _log_prior(self, subsets) -> np.ndarray:
        C = self.config.n_categories
        return np.array([math.log(CATEGORY_COUNT_PROBS[len(s) - 1] / math.comb(C, len(s))) for s in subsets])

    def text_loglik(self, samples: Sequence[QuestionSample], subsets) -> np.ndarray:
        """log P(text | S) up to an S-independent constant, [N, |subsets|]."""
        cfg = self.config
        phi = np.stack([self.topic_dist[list(s)].mean(axis=0) for s in subsets])  # [S, W]
        with np.errstate(divide="ignore"):
            log_phi = np.log(phi)
        counts = np.zeros((len(samples), cfg.topic_pool))
        for i, s in enumerate(samples):
            for tok in s.tokens:
                if tok[0] == "t":
                    counts[i, int(tok[1:])] += 1
        out = np.zeros((len(samples), len(subsets)))
        has = counts.sum(axis=1) > 0
        if has.any():
            c = counts[has]
            # 0 * log 0 must count as 0, not nan
            with np.errstate(invalid="ignore"):  # 0 * -inf for words a subset cannot emit
                ll = np.where(c[:, None, :] > 0, c[:, None, :] * log_phi[None, :, :], 0.0).sum(axis=-1)
            out[has] = ll
        return out

    def image_loglik(self, spatial: np.ndarray, subsets, chunk: int = 500) -> np.ndarray:
        """log [P(image | S) / P(image | all noise)], [N, |subsets|].

        Sums exactly over placeholder-or-not, the positions of the signal rows
        and of the object row, and the object identity (DP over rows).
        """
        cfg = self.config
        s_count, m = cfg.signal_regions, cfg.regions
        var = cfg.noise_std**2
        mu = np.stack([self.category_prototypes[list(s)].mean(axis=0) for s in subsets])  # [S, D]
        mu_sq = (mu**2).sum(axis=1)
        q_sq = (self.object_prototypes**2).sum(axis=1)
        n_arr = math.log(math.comb(m, s_count) * (m - s_count))
        out = np.empty((spatial.shape[0], len(subsets)))
        for lo in range(0, spatial.shape[0], chunk):
            x = spatial[lo:lo + chunk].astype(np.float64)  # [n, m, D]
            log_a = (x @ mu.T - 0.5 * mu_sq) / var  # [n, m, S]
            log_b = logsumexp((x @ self.object_prototypes.T - 0.5 * q_sq) / var, axis=-1) - math.log(cfg.n_objects)
            n = x.shape[0]
            S = len(subsets)
            f = np.full((s_count + 1, 2, n, S), -np.inf)
            f[0, 0] = 0.0
            for r in range(m):
                a_r = log_a[:, r, :]
                b_r = log_b[:, r][:, None]
                g = f.copy()
                for k in range(1, s_count + 1):
                    g[k] = np.logaddexp(g[k], f[k - 1] + a_r)
                g[:, 1] = np.logaddexp(g[:, 1], f[:, 0] + b_r)
                f = g
            informative = f[s_count, 1] - n_arr
            p = cfg.p_placeholder
            if p >= 1.0:
                out[lo:lo + n] = 0.0
            elif p <= 0.0:
                out[lo:lo + n] = informative
            else:
                out[lo:lo + n] = np.logaddexp(math.log(p), math.log1p(-p) + informative)
        return out

    def category_posterior(self, samples: Sequence[QuestionSample], spatial: np.ndarray | None = None,
                           use_text: bool = True, use_image: bool = True) -> np.ndarray:
        """Exact marginal P(c in gold | evidence), [N, C]."""
        subsets = self.category_subsets()
        logp = np.tile(self._log_prior(subsets), (len(samples), 1))
        if use_text:
            logp = logp + self.text_loglik(samples, subsets)
        if use_image:
            if spatial is None:
                raise DataError("image evidence requested without features")
            logp = logp + self.image_loglik(spatial, subsets)
        logp -= logsumexp(logp, axis=1, keepdims=True)
        post = np.exp(logp)
        member = np.zeros((len(subsets), self.config.n_categories))
        for j, s in enumerate(subsets):
            member[j, list(s)] = 1.0
        return post @ member

    def expert_answer_probs(self, categories: Sequence[int]) -> np.ndarray:
        """Probability each synthetic expert is chosen for a question about ``categories``."""
        z = self.config.affinity_sharpness * self.expert_affinity[:, list(categories)].mean(axis=1)
        z = z + np.log(self.expert_rate)
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()


@dataclass
class SyntheticCorpus:
    config: SyntheticConfig
    samples: list[QuestionSample]
    spatial: np.ndarray  # [N, m, D_img], row order = samples order
    vocabulary: Vocabulary
    taxonomy: Taxonomy
    oracle: Oracle
    expert_ids: list[int] = field(default_factory=list)

    def save(self, directory: str | Path, config_hash: str | None = None) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "samples": d / "samples.jsonl",
            "features": d / "features.cqaf",
            "vocab": d / "vocab.txt",
            "taxonomy": d / "taxonomy.tsv",
            "oracle": d / "oracle.npz",
            "meta": d / "meta.json",
        }
        write_samples(paths["samples"], self.samples)
        write_feature_file(paths["features"], [s.feature_id for s in self.samples], self.spatial)
        self.vocabulary.save(paths["vocab"])
        self.taxonomy.save(paths["taxonomy"])
        self.oracle.save(paths["oracle"])
        meta = {"generator": self.config.to_dict(), "generator_hash": self.config.digest(),
                "seed": self.config.seed, "config_hash": config_hash}
        paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return paths


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticCorpus:
    """Draw a synthetic multimodal CQA corpus; bit-reproducible from ``cfg`` (including its seed)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    C, D, m = cfg.n_categories, cfg.d_img, cfg.regions

    cat_proto = rng.normal(0.0, 1.0, size=(C, D))
    obj_proto = rng.normal(0.0, 1.0, size=(cfg.n_objects, D))
    topic_dist = np.zeros((C, cfg.topic_pool))
    zipf = 1.0 / np.arange(1, cfg.topic_words_per_category + 1)
    zipf /= zipf.sum()
    for c in range(C):
        words = rng.choice(cfg.topic_pool, size=cfg.topic_words_per_category, replace=False)
        topic_dist[c, words] += zipf
    affinity = np.zeros((cfg.n_experts, C))
    for e in range(cfg.n_experts):
        fav = rng.choice(C, size=int(rng.integers(1, 3)), replace=False)
        affinity[e, fav] = 1.0
    expert_rate = rng.lognormal(0.0, 0.5, size=cfg.n_experts)
    topic_cdf = np.cumsum(topic_dist, axis=1)

    n = cfg.n_samples
    sizes = rng.choice(3, size=n, p=CATEGORY_COUNT_PROBS) + 1
    ambiguous = rng.random(n) < cfg.p_text_ambiguous
    placeholder = rng.random(n) < cfg.p_placeholder
    objects = rng.integers(cfg.n_objects, size=n)
    lengths = np.maximum(5, rng.poisson(cfg.mean_length, size=n))
    timestamps = np.sort(rng.integers(0, cfg.days * SECONDS_PER_DAY, size=n))
    n_answers = rng.integers(0, cfg.max_answers + 1, size=n)

    def oracle_probs(cats):
        z = cfg.affinity_sharpness * affinity[:, list(cats)].mean(axis=1) + np.log(expert_rate)
        p = np.exp(z - z.max())
        return p / p.sum()

    samples: list[QuestionSample] = []
    spatial = np.empty((n, m, D), dtype=np.float32)
    sig_pos = np.zeros((n, cfg.signal_regions), dtype=np.int64)
    obj_pos = np.zeros(n, dtype=np.int64)
    casual_base = 1_000_000
    p_noise = 1.0 - cfg.topic_concentration - cfg.object_rate
    slot_p = np.array([cfg.topic_concentration, cfg.object_rate, p_noise])
    for i in range(n):
        cats = tuple(sorted(int(c) for c in rng.choice(C, size=sizes[i], replace=False)))
        # text
        slots = rng.choice(3, size=lengths[i], p=slot_p)
        if ambiguous[i]:
            slots[slots == 0] = 2
        toks = np.empty(len(slots), dtype=object)
        topic_at = np.flatnonzero(slots == 0)
        which = np.asarray(cats)[rng.integers(len(cats), size=len(topic_at))]
        u = rng.random(len(topic_at))
        words = np.minimum((topic_cdf[which] < u[:, None]).sum(axis=1), cfg.topic_pool - 1)
        toks[topic_at] = [topic_word(int(w)) for w in words]
        obj_at = np.flatnonzero(slots == 1)
        toks[obj_at] = [object_word(int(objects[i]), int(j))
                        for j in rng.integers(cfg.words_per_object, size=len(obj_at))]
        noise_at = np.flatnonzero(slots == 2)
        toks[noise_at] = [noise_word(int(j)) for j in rng.integers(cfg.noise_vocab, size=len(noise_at))]
        # image
        img = rng.normal(0.0, cfg.noise_std, size=(m, D))
        perm = rng.permutation(m)
        sig_pos[i] = np.sort(perm[: cfg.signal_regions])
        obj_pos[i] = perm[cfg.signal_regions]
        if not placeholder[i]:
            img[sig_pos[i]] += cat_proto[list(cats)].mean(axis=0)
            img[obj_pos[i]] += obj_proto[objects[i]]
        spatial[i] = img
        # answerers
        answerers: list[int] = []
        if n_answers[i]:
            p = oracle_probs(cats)
            experts = rng.choice(cfg.n_experts, size=n_answers[i], replace=False, p=p)
            for e in experts:
                if rng.random() < cfg.p_casual_answer:
                    answerers.append(casual_base + int(rng.integers(cfg.n_casual_users)))
                else:
                    answerers.append(int(e))
        samples.append(QuestionSample(
            id=i, tokens=tuple(toks.tolist()), feature_id=i, categories=cats,
            answerers=tuple(sorted(set(answerers))), timestamp=int(timestamps[i]),
        ))

    vocab = Vocabulary()
    for j in range(cfg.topic_pool):
        vocab.add(topic_word(j))
    for o in range(cfg.n_objects):
        for j in range(cfg.words_per_object):
            vocab.add(object_word(o, j))
    for j in range(cfg.noise_vocab):
        vocab.add(noise_word(j))
    taxonomy = Taxonomy(Category(c, f"category-{c:02d}") for c in range(C))
    oracle = Oracle(cfg, cat_proto, obj_proto, topic_dist, affinity, expert_rate, objects, ambiguous, placeholder, sig_pos, obj_pos)
    return SyntheticCorpus(cfg, samples, spatial, vocab, taxonomy, oracle, list(range(cfg.n_experts)))


def bayes_top1_accuracy(oracle: Oracle, samples: Sequence[QuestionSample], spatial: np.ndarray | None,
                        use_text: bool = True, use_image: bool = True) -> float:
    post = oracle.category_posterior(samples, spatial, use_text, use_image)
    pred = post.argmax(axis=1)
    return float(np.mean([p in s.categories for p, s in zip(pred, samples)]))
