"""K-nearest-neighbour spread of a tight and a loose synthetic corpus, per modality."""

from __future__ import annotations

import dataclasses

import numpy as np

from .data import SyntheticConfig, generate_synthetic
from .evaluation import knn_curve

MODALITIES = {"text": "jaccard-bow", "image": "euclidean-feature"}


def corpus_pair(base: SyntheticConfig, diag) -> dict[str, SyntheticConfig]:
    """Two generator settings that differ only in topic concentration and image noise."""
    common = {"n_samples": diag.n_samples}
    return {
        "tight": dataclasses.replace(base, topic_concentration=diag.tight_topic_concentration,
                                     noise_std=diag.tight_noise_std, **common),
        "loose": dataclasses.replace(base, topic_concentration=diag.loose_topic_concentration,
                                     noise_std=diag.loose_noise_std, **common),
    }


def diagnose(base: SyntheticConfig, diag, seed: int = 0) -> list[dict]:
    """Rows of (corpus, modality, n, K, mean_avg_dist).

    Texts are compared as token sets, images by their region-mean feature vector.
    Both corpora use the same subset seed, so subset sizes line up.
    """
    rows = []
    for name, cfg in corpus_pair(base, diag).items():
        corpus = generate_synthetic(cfg)
        items = {
            "text": [set(s.tokens) for s in corpus.samples],
            "image": corpus.spatial.mean(axis=1, dtype=np.float64),
        }
        for modality, metric in MODALITIES.items():
            for n, k, dist in knn_curve(items[modality], metric, diag.sizes, diag.ks, seed=seed):
                rows.append({"corpus": name, "modality": modality, "n": n, "K": k,
                             "mean_avg_dist": round(dist, 6)})
    return rows


def ordering_holds(rows: list[dict]) -> dict[tuple[str, int], bool]:
    """For each (modality, n): tight distance < loose distance at every K."""
    out = {}
    keys = {(r["modality"], r["n"]) for r in rows}
    for mod, n in sorted(keys):
        tight = {r["K"]: r["mean_avg_dist"] for r in rows if r["corpus"] == "tight" and (r["modality"], r["n"]) == (mod, n)}
        loose = {r["K"]: r["mean_avg_dist"] for r in rows if r["corpus"] == "loose" and (r["modality"], r["n"]) == (mod, n)}
        out[(mod, n)] = all(tight[k] < loose[k] for k in tight)
    return out
