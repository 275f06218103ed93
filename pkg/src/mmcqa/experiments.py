"""Corpus loading, single runs and seed-averaged configuration grids."""

from __future__ import annotations

import dataclasses
import json
import logging
import multiprocessing as mp
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import pipeline as P
from . import report
from .data import DataError, SyntheticConfig, generate_synthetic, read_samples
from .encoders import ArrayFeatureStore, FeatureStore

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    samples: list
    store: object  # FeatureStore or ArrayFeatureStore
    n_categories: int
    placeholder: dict[int, bool] | None  # by sample id; known only for synthetic data
    generator_hash: str

    def placeholder_for(self, samples) -> np.ndarray | None:
        if self.placeholder is None:
            return None
        return np.array([self.placeholder[s.id] for s in samples], dtype=bool)


def generate_corpus(cfg: SyntheticConfig) -> Corpus:
    corpus = generate_synthetic(cfg)
    store = ArrayFeatureStore([s.feature_id for s in corpus.samples], corpus.spatial)
    flags = {s.id: bool(p) for s, p in zip(corpus.samples, corpus.oracle.placeholder)}
    return Corpus(corpus.samples, store, cfg.n_categories, flags, cfg.digest())


def load_corpus_dir(directory: str | Path) -> Corpus:
    """Read a corpus written by ``gen-data`` (samples, feature file, meta and oracle)."""
    d = Path(directory)
    for name in ("samples.jsonl", "features.cqaf", "meta.json"):
        if not (d / name).exists():
            raise DataError(f"{d}: missing {name}; run gen-data first")
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    samples = read_samples(d / "samples.jsonl")
    store = FeatureStore(d / "features.cqaf")
    placeholder = None
    if (d / "oracle.npz").exists():
        with np.load(d / "oracle.npz") as z:
            flags = z["placeholder"]
        placeholder = {s.id: bool(flags[s.id]) for s in samples}
    return Corpus(samples, store, int(meta["generator"]["n_categories"]), placeholder, meta["generator_hash"])


def run_one(cfg: P.RunConfig, corpus: Corpus, out_dir: str | Path | None = None,
            context_hash: str | None = None) -> tuple[P.RunResult, P.PreparedData]:
    data = P.prepare_data(corpus.samples, corpus.store, corpus.n_categories, cfg)
    return P.run_pipeline(cfg, data, out_dir, context_hash), data


@dataclass
class GridRun:
    label: str
    seed: int
    metrics: dict[str, float]
    config_hash: str


# forked workers read the corpus from here instead of unpickling it per task
_WORKER_CORPUS: Corpus | None = None


def _grid_task(task: tuple[str, P.RunConfig, int]) -> GridRun:
    label, cfg, seed = task
    cfg = cfg.with_seed(seed)
    log.info("grid: %s seed %d", label, seed)
    result, _ = run_one(cfg, _WORKER_CORPUS)
    return GridRun(label, seed, {k: float(v) for k, v in result.metrics.items()}, cfg.digest())


def run_grid(configs: Mapping[str, P.RunConfig], corpus: Corpus, seeds: Sequence[int],
             workers: int = 1) -> list[GridRun]:
    """Every (configuration, seed) pair; results come back in (configuration, seed) order."""
    global _WORKER_CORPUS
    tasks = [(label, cfg, int(s)) for label, cfg in configs.items() for s in seeds]
    _WORKER_CORPUS = corpus
    try:
        if workers <= 1 or len(tasks) == 1:
            return [_grid_task(t) for t in tasks]
        ctx = mp.get_context("fork")
        with ctx.Pool(min(workers, len(tasks)), initializer=_limit_worker_threads) as pool:
            return pool.map(_grid_task, tasks, chunksize=1)
    finally:
        _WORKER_CORPUS = None


def _limit_worker_threads() -> None:
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def summarize_grid(runs: Sequence[GridRun], metrics: Sequence[str] = ("top1_hit", "subset_exact", "mrr")) -> list[dict]:
    """One row per configuration: seed mean and sample std of each metric."""
    labels = list(dict.fromkeys(r.label for r in runs))
    rows = []
    for label in labels:
        sub = [r for r in runs if r.label == label]
        row = {"config": label, "n_seeds": len(sub), "seeds": " ".join(str(r.seed) for r in sub),
               "config_hash": sub[0].config_hash}
        for m in metrics:
            vals = [r.metrics[m] for r in sub if m in r.metrics]
            if vals:
                mean, std = report.summarize(vals)
                row[m] = round(mean, 6)
                row[f"{m}_std"] = round(std, 6)
        rows.append(row)
    return rows


def variant_configs(base: P.RunConfig, variants: Sequence[str] | None = None) -> dict[str, P.RunConfig]:
    """The plain model variants (no ablation flags), keyed by name."""
    clean = {f: False for f in P.ABLATION_FLAGS}
    names = list(variants) if variants else list(P.VARIANTS)
    return {v: dataclasses.replace(base, variant=v, **clean) for v in names}


def baseline_summary(corpus: Corpus, base: P.RunConfig, seeds: Sequence[int]) -> list[dict]:
    """Random and Weighted Random rows, seed-averaged like the model rows."""
    per: dict[str, dict[str, list[float]]] = {}
    for s in seeds:
        data = P.prepare_data(corpus.samples, corpus.store, corpus.n_categories, base.with_seed(int(s)))
        for name, vals in report.baseline_rows(data, int(s)).items():
            for k, v in vals.items():
                per.setdefault(name, {}).setdefault(k, []).append(v)
    rows = []
    for name, vals in per.items():
        row = {"config": name, "n_seeds": len(seeds), "seeds": " ".join(str(s) for s in seeds), "config_hash": ""}
        for k, v in vals.items():
            mean, std = report.summarize(v)
            row[k] = round(mean, 6)
            row[f"{k}_std"] = round(std, 6)
        rows.append(row)
    return rows
