"""Results emission: per-sample records, baseline rows and delimited tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import evaluation as ev
from .fusion import reported_image_weight
from .models import Model, Split
from .pipeline import PreparedData, RunResult, predict_probs, retrieval_rows

KNN_COLUMNS = ("modality", "n", "K", "mean_avg_dist")


def _round(x: float, nd: int = 6) -> float:
    return float(round(float(x), nd))


def sample_records(model: Model, split: Split, samples, placeholder: np.ndarray | None = None,
                   batch: int = 512) -> list[dict]:
    """One record per test question: prediction, gold, reported image weight and attention mass."""
    records = []
    for lo in range(0, len(split), batch):
        rows = np.arange(lo, min(lo + batch, len(split)))
        probs, out = model.classify(split, rows)
        weight = reported_image_weight(out)
        for j, r in enumerate(rows):
            s = samples[r]
            p = probs.data[j]
            rec = {
                "id": s.id,
                "gold": list(s.categories),
                "pred": int(np.argmax(p)),
                "pred_set": [int(c) for c in np.flatnonzero(p >= 0.5)],
                "top1_hit": bool(int(np.argmax(p)) in s.categories),
            }
            if weight is not None:
                rec["image_weight"] = _round(weight[j])
            if out.attention is not None:
                m = split.spatial.shape[1]
                rec["attention_mass"] = _round(out.attention[j, :m].sum())
            if placeholder is not None:
                rec["placeholder"] = bool(placeholder[r])
            records.append(rec)
    return records


def image_weight_correlation(records: Sequence[Mapping]) -> float | None:
    """Pearson r between reported image weight and the placeholder flag (None if either is missing)."""
    pairs = [(r["image_weight"], float(r["placeholder"])) for r in records if "image_weight" in r and "placeholder" in r]
    if len(pairs) < 3:
        return None
    w, f = np.array(pairs).T
    if w.std() == 0 or f.std() == 0:
        return None
    return float(np.corrcoef(w, f)[0, 1])


def baseline_rows(data: PreparedData, seed: int) -> dict[str, dict[str, float]]:
    """Random / weighted-random classification and random / frequency ranking on the test split."""
    C = data.n_categories
    test_gold = [s.categories for s in data.samples["test"]]
    rng = np.random.default_rng([seed, 99])
    dist = ev.label_distribution([s.categories for s in data.samples["train"]], C)
    rand = ev.top1_hit_from_predictions(ev.random_predictions(len(test_gold), C, rng), test_gold)
    wrand = ev.top1_hit_from_predictions(ev.weighted_random_predictions(len(test_gold), dist, rng), test_gold)
    rows = retrieval_rows(data.test)
    relevant = [data.test.relevant[i] for i in rows]
    P = len(data.pool)
    freq = ev.frequency_ranking_scores(data.train.relevant, P)
    random_scores = rng.random((len(rows), P))
    return {
        "Random": {"top1_hit": _round(rand), "mrr": _round(ev.mrr_from_scores(random_scores, relevant))},
        "Weighted Random": {
            "top1_hit": _round(wrand),
            "top1_hit_expected": _round(ev.weighted_random_expected_hit(dist, test_gold)),
            "mrr": _round(ev.mrr_from_scores(np.tile(freq, (len(rows), 1)), relevant)),
        },
    }


def run_results(result: RunResult, data: PreparedData, config_hash: str, seed_info: Mapping[str, int],
                placeholder: np.ndarray | None = None, with_samples: bool = True) -> dict:
    """Machine-readable results of one run (no wall-clock fields, so identical runs give identical bytes)."""
    cfg = result.config
    out = {
        "config_hash": config_hash,
        "seeds": dict(seed_info),
        "variant": cfg.variant,
        "flags": list(cfg.flags()),
        "architecture": result.plan.arch.to_dict(),
        "param_counts": result.param_counts,
        "metrics": {k: _round(v) for k, v in result.metrics.items()},
        "stage_metrics": {s: {k: _round(v) for k, v in m.items()} for s, m in result.stage_metrics.items()},
        "stages": [
            {"stage": s.stage, "task": s.task, "best_epoch": s.best_epoch, "epochs_run": s.epochs_run,
             "best_metric": _round(s.best_metric), "history": [_round(h) for h in s.history]}
            for s in result.stages
        ],
        "pool_size": len(data.pool),
        "vocab_size": len(data.vocab),
    }
    if with_samples and "classification" in result.models:
        recs = sample_records(result.models["classification"], data.test, data.samples["test"], placeholder)
        out["samples"] = recs
        r = image_weight_correlation(recs)
        if r is not None:
            out["metrics"]["image_weight_placeholder_r"] = _round(r)
    return out


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(path: str | Path, rows: Sequence[Mapping], columns: Sequence[str], header_comment: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def summarize(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0
