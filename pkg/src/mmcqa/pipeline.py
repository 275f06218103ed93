"""Three-stage training (separate task models, frozen-text fusion retraining, fine-tuning),
early stopping, checkpoints and the ablation grid."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import encoders, heads
from . import tensor as T
from .data import AuxSample, QuestionSample, build_aux_datasets, build_expert_pool, relevant_experts, split_dataset
from .encoders import Vocabulary
from .evaluation import category_accuracy, mrr_from_scores
from .models import Architecture, Model, Split, count_params, match_param_budget

log = logging.getLogger(__name__)

VARIANTS = {
    "text-only": ("text", 1),
    "image-only": ("image", 1),
    "concat": ("concat", 1),
    "sum-prod-concat": ("sum_prod_concat", 1),
    "san-1": ("san", 1),
    "san-2": ("san", 2),
    "global-weight": ("global_weight", 1),
    "global-weight-attention": ("global_weight_attention", 1),
}
FULL_MODEL = "global-weight-attention"
ABLATION_FLAGS = ("no_image_weight", "no_aux", "no_aux_it", "no_aux_ti", "no_attention", "no_finetune",
                  "big_att", "big_fc")
# ablation rows: label -> flags set on the full model
ABLATION_GRID = {
    "SAN Big Att": ("big_att",),
    "SAN Big FC": ("big_fc",),
    "W/O Image Weight": ("no_image_weight",),
    "W/O Auxiliary Tasks": ("no_aux",),
    "W/O Image-to-Texts": ("no_aux_it",),
    "W/O Text-to-Images": ("no_aux_ti",),
    "W/O Attention": ("no_attention",),
    "W/O Fine-tuning": ("no_finetune",),
    "Full Model": (),
}
IMPROVEMENT_EPS = 1e-4
MAIN_TASKS = ("classification", "retrieval")


class PipelineError(RuntimeError):
    pass


class DivergenceError(PipelineError):
    pass


@dataclass
class RunConfig:
    variant: str = FULL_MODEL
    no_image_weight: bool = False
    no_aux: bool = False
    no_aux_it: bool = False
    no_aux_ti: bool = False
    no_attention: bool = False
    no_finetune: bool = False
    big_att: bool = False
    big_fc: bool = False
    tasks: tuple[str, ...] = MAIN_TASKS
    # dimensions
    d: int = 64
    k: int = 64
    emb_dim: int = 32
    filters: tuple[int, int, int] = (32, 64, 64)
    aux_channels: int = 32
    # optimisation
    batch_main: int = 128
    batch_aux: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    clip_norm: float = 5.0
    stage1_epochs: int = 30
    aux_epochs: int = 30
    stage2_epochs: int = 10
    stage3_epochs: int = 10
    patience: int = 5
    finetune_lr_scale: float = 0.1
    n_neg: int = 50
    aux_warm_start: bool = True  # aux encoders start from the trained classifier where shapes agree
    retrieval_warm_start: bool = True  # same for the retrieval model when both main tasks train
    # data handling
    pool_threshold: int = 10
    pool_window_days: int = 182
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # seeds
    init_seed: int = 0
    data_seed: int = 0
    sampling_seed: int = 0

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.filters = tuple(self.filters)
        self.split_ratios = tuple(self.split_ratios)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise PipelineError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        flags = self.flags()
        if flags and self.variant != FULL_MODEL:
            raise PipelineError(f"ablation flags {flags} only apply to the {FULL_MODEL} variant")
        exclusive = [f for f in ("no_image_weight", "no_attention", "big_att", "big_fc") if getattr(self, f)]
        if len(exclusive) > 1:
            raise PipelineError(f"flags {exclusive} each replace the fusion layer; set at most one")
        for t in self.tasks:
            if t not in MAIN_TASKS:
                raise PipelineError(f"unknown task {t!r}")
        if self.patience < 1:
            raise PipelineError("patience must be >= 1")
        if min(self.batch_main, self.batch_aux) < 1:
            raise PipelineError("batch sizes must be positive")
        if self.lr < 0 or self.finetune_lr_scale < 0:
            raise PipelineError("learning rates must be non-negative")

    def seeds(self) -> dict[str, int]:
        return {"init_seed": self.init_seed, "data_seed": self.data_seed, "sampling_seed": self.sampling_seed}

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, init_seed=seed, data_seed=seed, sampling_seed=seed)

    def flags(self) -> tuple[str, ...]:
        return tuple(f for f in ABLATION_FLAGS if getattr(self, f))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("tasks", "filters", "split_ratios"):
            d[key] = list(d[key])
        return d

    def digest(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Plan:
    """What a RunConfig resolves to."""

    arch: Architecture
    aux_arch: Architecture | None
    aux_directions: tuple[str, ...]
    finetune: bool
    budget: str | None  # big_att / big_fc: grown to the full model's size


def resolve(cfg: RunConfig, vocab_size: int = 0, n_categories: int = 0, d_img: int = 64, regions: int = 49) -> Plan:
    fusion_kind, layers = VARIANTS[cfg.variant]
    base = Architecture(fusion=fusion_kind, san_layers=layers, d=cfg.d, k=cfg.k, emb_dim=cfg.emb_dim,
                        filters=cfg.filters, d_img=d_img, regions=regions, aux_channels=cfg.aux_channels)
    if cfg.variant != FULL_MODEL and cfg.variant != "global-weight":
        return Plan(base, None, (), False, None)
    directions = tuple(
        d for d, off in (("image_to_text", cfg.no_aux_it), ("text_to_image", cfg.no_aux_ti)) if not off
    )
    if cfg.no_aux:
        directions = ()
    arch = base
    if cfg.no_image_weight:
        arch = dataclasses.replace(base, fusion="san", san_layers=1)
    elif cfg.no_attention:
        arch = dataclasses.replace(base, fusion="global_weight")
    elif cfg.big_att or cfg.big_fc:
        mode = "big_att" if cfg.big_att else "big_fc"
        target = count_params(base, "classification", vocab_size, n_categories, aux_text=True)
        san = dataclasses.replace(base, fusion="san", san_layers=1)
        arch = match_param_budget(san, target, mode, vocab_size, n_categories)
        return Plan(arch, None, (), False, mode)
    aux_arch = arch if directions else None
    return Plan(arch, aux_arch, directions, not cfg.no_finetune, None)


# ---------------------------------------------------------------- data preparation


@dataclass
class PreparedData:
    vocab: Vocabulary
    n_categories: int
    pool: list[int]
    splits: dict[str, Split]
    samples: dict[str, list[QuestionSample]]
    aux: dict[str, dict[str, list[AuxSample]]]
    store: object

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def valid(self) -> Split:
        return self.splits["valid"]

    @property
    def test(self) -> Split:
        return self.splits["test"]


def _make_split(name: str, samples: Sequence[QuestionSample], vocab: Vocabulary, n_categories: int,
                pool_index: dict[int, int], store) -> Split:
    seqs = [encoders.tokenize(s.text, vocab).tokens for s in samples]
    ids, lengths = encoders.pad_batch(seqs)
    return Split(
        name=name,
        ids=ids,
        lengths=lengths,
        labels=heads.multi_hot([s.categories for s in samples], n_categories),
        relevant=[relevant_experts(s, pool_index) for s in samples],
        feature_ids=np.array([s.feature_id for s in samples], dtype=np.int64),
        store=store,
    )


def prepare_data(samples: Sequence[QuestionSample], store, n_categories: int, cfg: RunConfig) -> PreparedData:
    """Split, build the training vocabulary and expert pool, and the matching sets per split."""
    train, valid, test = split_dataset(samples, cfg.split_ratios, seed=cfg.data_seed)
    vocab = Vocabulary.build(s.text for s in train)
    t0 = min(s.timestamp for s in samples)
    pool = build_expert_pool(train, (t0, t0 + cfg.pool_window_days * 86_400), cfg.pool_threshold)
    if not pool:
        raise PipelineError("expert pool is empty; lower pool_threshold")
    pool_index = {u: i for i, u in enumerate(pool)}
    parts = {"train": train, "valid": valid, "test": test}
    splits = {k: _make_split(k, v, vocab, n_categories, pool_index, store) for k, v in parts.items()}
    aux = {}
    for j, (k, v) in enumerate(parts.items()):
        it, ti = build_aux_datasets(v, seed=int(np.random.SeedSequence([cfg.data_seed, 17, j]).generate_state(1)[0]))
        aux[k] = {"image_to_text": it, "text_to_image": ti}
    return PreparedData(vocab, n_categories, pool, splits, parts, aux, store)


# ---------------------------------------------------------------- early stopping


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    best_epoch: int  # 1-based


def early_stop(history: Sequence[float], patience: int) -> StopDecision:
    """Stop once ``patience`` consecutive epochs fail to beat the best by more than 1e-4."""
    if not history:
        raise PipelineError("early_stop needs at least one validation value")
    if patience < 1:
        raise PipelineError("patience must be >= 1")
    best, best_i, stale = history[0], 0, 0
    for i, v in enumerate(history[1:], start=1):
        if v > best + IMPROVEMENT_EPS:
            best, best_i, stale = v, i, 0
        else:
            stale += 1
    return StopDecision(stale >= patience, best_i + 1)


# ---------------------------------------------------------------- evaluation helpers


def predict_probs(model: Model, split: Split, batch: int = 512) -> np.ndarray:
    out = []
    for lo in range(0, len(split), batch):
        rows = np.arange(lo, min(lo + batch, len(split)))
        out.append(model.classify(split, rows)[0].data)
    return np.concatenate(out, axis=0)


def predict_scores(model: Model, split: Split, rows: np.ndarray | None = None, batch: int = 512) -> np.ndarray:
    rows = np.arange(len(split)) if rows is None else rows
    out = []
    for lo in range(0, len(rows), batch):
        out.append(model.score(split, rows[lo:lo + batch])[0].data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.n_experts))


def classification_metric(model: Model, split: Split, samples: Sequence[QuestionSample]) -> float:
    return category_accuracy(predict_probs(model, split), [s.categories for s in samples])["top1_hit"]


def retrieval_rows(split: Split) -> np.ndarray:
    return np.array([i for i, r in enumerate(split.relevant) if r], dtype=np.int64)


def retrieval_metric(model: Model, split: Split) -> float:
    rows = retrieval_rows(split)
    if len(rows) == 0:
        raise PipelineError(f"no {split.name} question has an in-pool answerer")
    scores = predict_scores(model, split, rows)
    return mrr_from_scores(scores, [split.relevant[i] for i in rows])


def aux_accuracy(model: Model, split: Split, items: Sequence[AuxSample], batch: int = 128) -> float:
    correct = 0
    for lo in range(0, len(items), batch):
        chunk = items[lo:lo + batch]
        anchors = np.array([a.anchor for a in chunk])
        cands = np.array([a.candidates for a in chunk])
        joint = model.aux_joint(split, anchors, cands, chunk[0].direction)
        scores = heads.aux_scores(joint, model.params).data
        correct += int(np.sum(scores.argmax(axis=1) == np.array([a.answer for a in chunk])))
    return correct / len(items)


def aux_metric(model: Model, split: Split, aux: dict[str, list[AuxSample]], directions: Sequence[str]) -> float:
    return float(np.mean([aux_accuracy(model, split, aux[d]) for d in directions]))


# ---------------------------------------------------------------- training loop


@dataclass
class StageResult:
    stage: int
    task: str
    history: list[float]
    best_epoch: int  # 0 = the state the stage started from
    best_metric: float
    epochs_run: int


@dataclass
class TrainLog:
    lines: list[dict] = field(default_factory=list)
    sink: Path | None = None

    def epoch(self, **rec) -> None:
        self.lines.append(rec)
        log.info("stage %s %s epoch %s loss %.4f valid %.4f", rec["stage"], rec["task"], rec["epoch"],
                 rec["train_loss"], rec["valid_metric"])
        if self.sink is not None:
            with open(self.sink, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _step(model: Model, loss_fn: Callable[[], T.Tensor], opt: T.OptimizerState, lr: float, where: str) -> float:
    params = model.trainable()
    with T.Tape() as tape:
        loss = loss_fn()
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss ({value}) at {where}")
    grads = T.backward(tape, loss, list(params.values()))
    named = T.clip_global_norm({k: grads[v] for k, v in params.items()}, opt.clip_norm)
    T.optimizer_step(params, named, opt, lr=lr)
    return value


def fit(model: Model, stage: int, epochs: int, patience: int | None, lr: float, cfg: RunConfig,
        batches: Callable[[np.random.Generator], list[Callable[[], T.Tensor]]],
        metric: Callable[[], float], rng: np.random.Generator, train_log: TrainLog,
        include_start: bool = False) -> StageResult:
    """Generic epoch loop with best-checkpoint keeping.

    ``batches(rng)`` returns the epoch's loss closures in order. With
    ``include_start`` the starting state is scored as epoch 0 and may be kept.
    ``patience=None`` runs the full epoch budget.
    """
    opt = T.OptimizerState(lr=lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    history: list[float] = []
    best_snap = None
    if include_start:
        history.append(metric())
        best_snap = model.snapshot()
    offset = 1 if include_start else 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for b, loss_fn in enumerate(batches(rng)):
            losses.append(_step(model, loss_fn, opt, lr, f"stage {stage} {model.task} epoch {epoch} batch {b}"))
        value = metric()
        history.append(value)
        decision = early_stop(history, patience if patience is not None else epochs + 1)
        if decision.best_epoch == len(history):
            best_snap = model.snapshot()
        train_log.epoch(stage=stage, task=model.task, epoch=epoch, train_loss=float(np.mean(losses)),
                        valid_metric=value, wall_time=round(time.perf_counter() - t0, 3))
        if patience is not None and decision.stop:
            break
    decision = early_stop(history, epochs + 1)
    if best_snap is not None:
        model.restore(best_snap)
    best_idx = decision.best_epoch - 1
    return StageResult(stage, model.task, history, best_idx + 1 - offset, history[best_idx], len(history) - offset)


def _main_batches(model: Model, data: PreparedData, cfg: RunConfig, sample_rng: np.random.Generator):
    split = data.train
    if model.task == "classification":
        rows_all = np.arange(len(split))
    else:
        rows_all = retrieval_rows(split)

    def make(rng: np.random.Generator):
        order = rows_all[rng.permutation(len(rows_all))]
        out = []
        for lo in range(0, len(order), cfg.batch_main):
            rows = order[lo:lo + cfg.batch_main]
            if model.task == "classification":
                out.append(lambda rows=rows: heads.bce_multilabel_loss(model.classify(split, rows)[0],
                                                                       split.labels[rows]))
            else:
                out.append(lambda rows=rows: heads.retrieval_loss(
                    model.score(split, rows)[0], [split.relevant[r] for r in rows], cfg.n_neg, sample_rng))
        return out

    return make


def _aux_batches(model: Model, data: PreparedData, cfg: RunConfig, directions: Sequence[str]):
    split = data.train
    items = {d: data.aux["train"][d] for d in directions}

    def make(rng: np.random.Generator):
        per_dir = []
        for d in directions:
            order = rng.permutation(len(items[d]))
            chunks = [order[lo:lo + cfg.batch_aux] for lo in range(0, len(order), cfg.batch_aux)]
            per_dir.append([(d, c) for c in chunks])
        out = []
        # alternate directions batch by batch, unscaled losses
        for group in zip(*per_dir):
            for d, idx in group:
                chunk = [items[d][i] for i in idx]
                anchors = np.array([a.anchor for a in chunk])
                cands = np.array([a.candidates for a in chunk])
                answers = np.array([a.answer for a in chunk])
                out.append(lambda d=d, anchors=anchors, cands=cands, answers=answers: heads.aux_loss(
                    model.aux_joint(split, anchors, cands, d), answers, model.params))
        return out

    return make


def _metric_fn(model: Model, data: PreparedData, split_name: str = "valid", directions=()):
    split = data.splits[split_name]
    if model.task == "classification":
        return lambda: classification_metric(model, split, data.samples[split_name])
    if model.task == "retrieval":
        return lambda: retrieval_metric(model, split)
    return lambda: aux_metric(model, split, data.aux[split_name], directions)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(list(key))


def build_model(plan: Plan, task: str, data: PreparedData, cfg: RunConfig) -> Model:
    arch = plan.aux_arch if task == "auxiliary" else plan.arch
    idx = ("classification", "retrieval", "auxiliary").index(task)
    return Model.build(arch, task, _rng(cfg.init_seed, idx), len(data.vocab), data.n_categories, len(data.pool))


WARM_PREFIXES = ("text.", "img.", "fuse.")


def warm_start(model: Model, source: Model, prefixes: Sequence[str] = WARM_PREFIXES) -> list[str]:
    """Copy same-named, same-shaped encoder and fusion parameters from ``source``; returns the names copied."""
    copied = []
    for name, p in model.params.items():
        q = source.params.get(name)
        if name.startswith(tuple(prefixes)) and q is not None and q.data.shape == p.data.shape:
            p.data = q.data.copy()
            copied.append(name)
    return copied


def train_stage1(cfg: RunConfig, plan: Plan, data: PreparedData, train_log: TrainLog) -> tuple[dict[str, Model], list[StageResult]]:
    """Train every task model independently (the aux model only if matching tasks are on)."""
    models, results = {}, []
    tasks = list(cfg.tasks) + (["auxiliary"] if plan.aux_directions else [])
    for t_idx, task in enumerate(tasks):
        model = build_model(plan, task, data, cfg)
        data_rng = _rng(cfg.data_seed, 1, t_idx)
        if task == "auxiliary":
            if cfg.aux_warm_start and models:
                warm_start(model, models.get("classification") or next(iter(models.values())))
            make = _aux_batches(model, data, cfg, plan.aux_directions)
            epochs = cfg.aux_epochs
        else:
            make = _main_batches(model, data, cfg, _rng(cfg.sampling_seed, 1, t_idx))
            epochs = cfg.stage1_epochs
            if task == "retrieval" and cfg.retrieval_warm_start and "classification" in models:
                warm_start(model, models["classification"])
        res = fit(model, 1, epochs, cfg.patience, cfg.lr, cfg, make,
                  _metric_fn(model, data, "valid", plan.aux_directions), data_rng, train_log)
        models[task] = model
        results.append(res)
    return models, results


def train_stage2(cfg: RunConfig, plan: Plan, data: PreparedData, models: dict[str, Model],
                 train_log: TrainLog) -> list[StageResult]:
    """Freeze every text encoder; main models read [own ‖ aux] text vectors reduced back to d."""
    results = []
    aux = models.get("auxiliary")
    for t_idx, task in enumerate(cfg.tasks):
        model = models[task]
        if not model.arch.uses_text:
            continue
        model.freeze("text.")
        if aux is not None:
            if aux.arch.d != model.arch.d:
                raise PipelineError(f"aux text dim {aux.arch.d} != main text dim {model.arch.d}")
            model.attach_aux_text(aux)
        make = _main_batches(model, data, cfg, _rng(cfg.sampling_seed, 2, t_idx))
        res = fit(model, 2, cfg.stage2_epochs, None, cfg.lr, cfg, make, _metric_fn(model, data),
                  _rng(cfg.data_seed, 2, t_idx), train_log, include_start=True)
        results.append(res)
    return results


def train_stage3(cfg: RunConfig, plan: Plan, data: PreparedData, models: dict[str, Model],
                 train_log: TrainLog) -> list[StageResult]:
    """Unfreeze the main text CNNs and fine-tune at the reduced rate; early stopping keeps the best."""
    results = []
    lr = cfg.lr * cfg.finetune_lr_scale
    for t_idx, task in enumerate(cfg.tasks):
        model = models[task]
        if not model.arch.uses_text:
            continue
        model.unfreeze("text.")
        make = _main_batches(model, data, cfg, _rng(cfg.sampling_seed, 3, t_idx))
        res = fit(model, 3, cfg.stage3_epochs, cfg.patience, lr, cfg, make, _metric_fn(model, data),
                  _rng(cfg.data_seed, 3, t_idx), train_log, include_start=True)
        results.append(res)
    return results


@dataclass
class RunResult:
    config: RunConfig
    plan: Plan
    models: dict[str, Model]
    stages: list[StageResult]
    metrics: dict[str, float]  # test-split headline metrics
    stage_metrics: dict[str, dict[str, float]]  # e.g. {"stage1": {"classification": ...}}
    param_counts: dict[str, int]


def test_metrics(models: dict[str, Model], data: PreparedData, plan: Plan) -> dict[str, float]:
    out = {}
    if "classification" in models:
        probs = predict_probs(models["classification"], data.test)
        acc = category_accuracy(probs, [s.categories for s in data.samples["test"]])
        out["top1_hit"] = acc["top1_hit"]
        out["subset_exact"] = acc["subset_exact"]
    if "retrieval" in models:
        out["mrr"] = retrieval_metric(models["retrieval"], data.test)
    if "auxiliary" in models:
        for d in plan.aux_directions:
            out[f"aux_{d}_acc"] = aux_accuracy(models["auxiliary"], data.test, data.aux["test"][d])
    return out


def run_pipeline(cfg: RunConfig, data: PreparedData, out_dir: str | Path | None = None,
                 context_hash: str | None = None) -> RunResult:
    """Run all applicable stages; baselines stop after stage 1."""
    d_img, regions = _feature_dims(data)
    plan = resolve(cfg, len(data.vocab), data.n_categories, d_img, regions)
    run_hash = context_hash or cfg.digest()
    seeds = cfg.seeds()
    sink = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sink = out_dir / "run_log.jsonl"
        sink.write_text("", encoding="utf-8")
    tlog = TrainLog(sink=sink)

    models, stages = train_stage1(cfg, plan, data, tlog)
    main = [t for t in cfg.tasks]
    stage_metrics = {"stage1": test_metrics({t: models[t] for t in main}, data, plan)}
    if "auxiliary" in models:
        stage_metrics["stage1"].update(test_metrics({"auxiliary": models["auxiliary"]}, data, plan))
    if out_dir is not None:
        for task, m in models.items():
            save_checkpoint(out_dir / f"stage1_{task}", m, cfg.variant, 1, stages, run_hash, seeds)
    multi_stage = cfg.variant in (FULL_MODEL, "global-weight") and plan.budget is None
    if multi_stage:
        stages += train_stage2(cfg, plan, data, models, tlog)
        stage_metrics["stage2"] = test_metrics({t: models[t] for t in main}, data, plan)
        if out_dir is not None:
            for task in main:
                save_checkpoint(out_dir / f"stage2_{task}", models[task], cfg.variant, 2, stages, run_hash,
                                seeds)
        if plan.finetune:
            stages += train_stage3(cfg, plan, data, models, tlog)
            stage_metrics["stage3"] = test_metrics({t: models[t] for t in main}, data, plan)
            if out_dir is not None:
                for task in main:
                    save_checkpoint(out_dir / f"stage3_{task}", models[task], cfg.variant, 3, stages,
                                    run_hash, seeds)
    metrics = test_metrics({t: models[t] for t in main}, data, plan)
    if "auxiliary" in models:
        metrics.update({k: v for k, v in stage_metrics["stage1"].items() if k.startswith("aux_")})
        metrics = {k: metrics[k] for k in sorted(metrics)}
    if out_dir is not None:
        for task in main:
            save_checkpoint(out_dir / f"final_{task}", models[task], cfg.variant, _last_stage(stage_metrics),
                            stages, run_hash, seeds)
    counts = {t: m.n_params() for t, m in models.items()}
    return RunResult(cfg, plan, models, stages, metrics, stage_metrics, counts)


def _last_stage(stage_metrics: dict) -> int:
    return max(int(k[-1]) for k in stage_metrics)


def _feature_dims(data: PreparedData) -> tuple[int, int]:
    store = data.store
    if store is None:
        return 64, 49
    return int(store.dim), int(store.m)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_BLOB = "params.bin"
CHECKPOINT_MANIFEST = "manifest.json"


def save_checkpoint(directory: str | Path, model: Model, variant: str, stage: int,
                    history: Sequence[StageResult] | Sequence[dict], run_hash: str,
                    seeds: Mapping[str, int] | None = None) -> Path:
    """Manifest (names, shapes, offsets, hash) + one little-endian float32 blob."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors, blobs, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size * 4
    hist = [h if isinstance(h, dict) else dataclasses.asdict(h) for h in history]
    manifest = {
        "format": 1,
        "variant": variant,
        "task": model.task,
        "stage": stage,
        "architecture": model.arch.to_dict(),
        "vocab_size": model.vocab_size,
        "n_categories": model.n_categories,
        "n_experts": model.n_experts,
        "frozen": sorted(model.frozen),
        "history": hist,
        "config_hash": run_hash,
        "seeds": dict(seeds or {}),
        "blob": CHECKPOINT_BLOB,
        "tensors": tensors,
    }
    (d / CHECKPOINT_BLOB).write_bytes(b"".join(blobs))
    (d / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


@dataclass
class Checkpoint:
    model: Model
    variant: str
    stage: int
    history: list[dict]
    config_hash: str
    seeds: dict[str, int] = dataclasses.field(default_factory=dict)


def load_checkpoint(directory: str | Path, expect_hash: str | None = None) -> Checkpoint:
    d = Path(directory)
    manifest = json.loads((d / CHECKPOINT_MANIFEST).read_text(encoding="utf-8"))
    if expect_hash is not None and manifest["config_hash"] != expect_hash:
        raise PipelineError(f"checkpoint {d} was written by config {manifest['config_hash']}, expected {expect_hash}")
    blob = (d / manifest["blob"]).read_bytes()
    arch_d = dict(manifest["architecture"])
    arch_d["filters"] = tuple(arch_d["filters"])
    arch = Architecture(**arch_d)
    params = {}
    for t in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=t["count"], offset=t["offset"]).reshape(t["shape"])
        params[t["name"]] = T.Tensor(arr.astype(np.float32), requires_grad=True)
    model = Model(arch, manifest["task"], params, manifest["vocab_size"], manifest["n_categories"],
                  manifest["n_experts"])
    model.frozen = set(manifest["frozen"])
    return Checkpoint(model, manifest["variant"], manifest["stage"], manifest["history"], manifest["config_hash"],
                      manifest.get("seeds", {}))


def resave_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    return save_checkpoint(directory, ckpt.model, ckpt.variant, ckpt.stage, ckpt.history, ckpt.config_hash,
                           ckpt.seeds)


# ---------------------------------------------------------------- ablation grid


def ablation_configs(base: RunConfig) -> dict[str, RunConfig]:
    """The nine ablation rows as configs derived from ``base`` (its variant is forced to the full model)."""
    clean = {f: False for f in ABLATION_FLAGS}
    out = {}
    for label, flags in ABLATION_GRID.items():
        out[label] = dataclasses.replace(base, variant=FULL_MODEL, **(clean | {f: True for f in flags}))
    return out
