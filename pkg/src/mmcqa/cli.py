"""Command-line entry point: ``mmcqa <subcommand> [options]``.

Subcommands: gen-data, train, eval, ablate, diagnose-knn, grad-check. Bad flags
exit with status 2 and usage text; failures while running exit with status 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RESULTS_ENV, ConfigError, Settings, dump_toml, load_settings
from .pipeline import VARIANTS, PipelineError

log = logging.getLogger("mmcqa")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- argument parsing


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", help="TOML config with [synthetic], [run], [paths], [diagnose]")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable; applied after --config)")
    p.add_argument("--seed", type=int, help="run seed (all run seeds; for gen-data the generator seed)")
    p.add_argument("--results-dir", metavar="DIR",
                   help=f"root for outputs (default: [paths] results_dir, then ${RESULTS_ENV}, then ./results)")
    p.add_argument("--threads", type=_positive_int, metavar="N",
                   help="cap BLAS threads; grid commands also run up to N configurations in parallel")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    return p


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="mmcqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", metavar="DIR", help="corpus directory (default: [paths] data_dir or RESULTS/data)")

    p = sub.add_parser("train", parents=[common], help="train one configuration through all its stages")
    p.add_argument("--data", metavar="DIR", help="corpus from gen-data (default: [paths] data_dir, else generate)")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="model variant (overrides [run] variant)")
    p.add_argument("--out", metavar="DIR", help="run directory (default: RESULTS/train-<variant>-s<seed>)")

    p = sub.add_parser("eval", parents=[common], help="report a trained run on the test split")
    p.add_argument("--run", required=True, metavar="DIR", help="run directory written by train")
    p.add_argument("--data", metavar="DIR", help="corpus directory (default: as recorded by the run)")
    p.add_argument("--out", metavar="DIR", help="report directory (default: RUN/eval)")

    for name, helptext in (("ablate", "run the nine-row ablation grid over seeds"),):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", metavar="DIR")
        p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2], metavar="S,S,..",
                       help="seeds to average over (default 0,1,2)")
        p.add_argument("--grid", choices=("ablation", "variants"), default="ablation",
                       help="ablation rows (default) or the plain model variants plus baselines")
        p.add_argument("--out", metavar="DIR", help="output directory (default: RESULTS/<grid>)")

    p = sub.add_parser("diagnose-knn", parents=[common],
                       help="mean K-NN distance curves for a tight and a loose corpus")
    p.add_argument("--out", metavar="DIR", help="output directory (default: RESULTS/knn)")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every op and composition")
    p.add_argument("--seeds", type=_positive_int, default=100, metavar="N", help="number of random seeds (default 100)")
    p.add_argument("--case", action="append", default=[], help="restrict to one case (repeatable)")
    p.add_argument("--coords", type=_positive_int, default=4, metavar="K",
                   help="coordinates perturbed per input and seed (default 4)")
    p.add_argument("--out", metavar="DIR", help="output directory (default: RESULTS/grad-check)")
    return parser


# ---------------------------------------------------------------- helpers


def _settings(args) -> Settings:
    s = load_settings(args.config, args.overrides)
    if args.results_dir:
        s.paths = dataclasses.replace(s.paths, results_dir=args.results_dir)
    if args.seed is not None:
        s.seed = args.seed
    if getattr(args, "variant", None):
        try:
            s.run = dataclasses.replace(s.run, variant=args.variant)
        except PipelineError as exc:
            raise ConfigError(str(exc)) from exc
    return s


def _run_config(s: Settings):
    return s.run.with_seed(s.seed)


def _provenance(s: Settings, **extra) -> dict:
    return {"config_hash": s.digest(), "seed": s.seed, "mmcqa_version": __version__, **extra}


def _header(s: Settings) -> str:
    return f"config_hash={s.digest()} seed={s.seed}"


def _corpus(s: Settings, data_dir: str | None):
    from .experiments import generate_corpus, load_corpus_dir

    directory = data_dir or s.paths.data_dir
    if directory:
        log.info("loading corpus from %s", directory)
        return load_corpus_dir(directory), str(directory)
    log.info("generating corpus in memory (%d samples)", s.synthetic.n_samples)
    return generate_corpus(s.synthetic), ""


def _write_config(s: Settings, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.toml").write_text(f"# {_header(s)}\n" + dump_toml(s), encoding="utf-8")


def _print_rows(rows, columns) -> None:
    print("\t".join(columns))
    for r in rows:
        print("\t".join(_fmt(r.get(c, "")) for c in columns))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, s: Settings) -> int:
    from .data import generate_synthetic

    if args.seed is not None:
        s.synthetic = dataclasses.replace(s.synthetic, seed=args.seed)
    out = Path(args.out or s.paths.data_dir or s.results_dir() / "data")
    t0 = time.perf_counter()
    corpus = generate_synthetic(s.synthetic)
    corpus.save(out, config_hash=s.digest())
    _write_config(s, out)
    print(f"wrote {len(corpus.samples)} samples to {out} ({_header(s)} generator_seed={s.synthetic.seed}, "
          f"{time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_train(args, s: Settings) -> int:
    from . import plotting, report
    from .experiments import run_one

    cfg = _run_config(s)
    corpus, data_dir = _corpus(s, args.data)
    out = Path(args.out or s.results_dir() / f"train-{cfg.variant}-s{s.seed}")
    _write_config(s, out)
    (out / "data_source.json").write_text(
        json.dumps({"data_dir": data_dir, "generator_hash": corpus.generator_hash, **_provenance(s)},
                   indent=1, sort_keys=True) + "\n", encoding="utf-8")
    result, data = run_one(cfg, corpus, out / "checkpoints", context_hash=s.digest())
    placeholder = corpus.placeholder_for(data.samples["test"])
    res = report.run_results(result, data, s.digest(), cfg.seeds(), placeholder)
    res.update({"seed": s.seed, "generator_hash": corpus.generator_hash})
    report.write_json(out / "results.json", res)
    row = {"variant": cfg.variant, "flags": " ".join(cfg.flags()), "seed": s.seed, "config_hash": s.digest(),
           **{k: round(v, 6) for k, v in result.metrics.items()}}
    columns = ["variant", "flags", "seed", "config_hash"] + sorted(result.metrics)
    report.write_csv(out / "metrics.csv", [row], columns, _header(s))
    _figures_for_run(out, res, placeholder)
    _print_rows([row], columns)
    return EXIT_OK


def _figures_for_run(out: Path, res: dict, placeholder) -> None:
    from . import plotting

    log_path = out / "checkpoints" / "run_log.jsonl"
    if log_path.exists():
        lines = [json.loads(ln) for ln in log_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if lines:
            plotting.training_curves(lines, out / "training_curves.png")
    samples = res.get("samples") or []
    weights = [r["image_weight"] for r in samples if "image_weight" in r]
    if weights:
        flags = np.array([r["placeholder"] for r in samples]) if samples and "placeholder" in samples[0] else None
        plotting.image_weight_histogram(np.array(weights), flags, out / "image_weight.png",
                                        bound=max(1.0, float(np.max(weights))))


def cmd_eval(args, s: Settings) -> int:
    from . import pipeline as P
    from . import report
    from .experiments import load_corpus_dir, generate_corpus

    run = Path(args.run)
    if not (run / "config.toml").exists():
        raise FileNotFoundError(f"{run}: no config.toml; is this a train output directory?")
    if args.config is None:
        s = load_settings(run / "config.toml", args.overrides)
        if args.seed is not None:
            s.seed = args.seed
    source = json.loads((run / "data_source.json").read_text(encoding="utf-8"))
    data_dir = args.data or source.get("data_dir") or ""
    corpus = load_corpus_dir(data_dir) if data_dir else generate_corpus(s.synthetic)
    if corpus.generator_hash != source.get("generator_hash"):
        raise P.PipelineError(f"corpus {corpus.generator_hash} differs from the one the run was trained on "
                              f"({source.get('generator_hash')})")
    cfg = _run_config(s)
    data = P.prepare_data(corpus.samples, corpus.store, corpus.n_categories, cfg)
    out = Path(args.out or run / "eval")
    metrics, recs = {}, []
    placeholder = corpus.placeholder_for(data.samples["test"])
    for task in cfg.tasks:
        ck_dir = run / "checkpoints" / f"final_{task}"
        if not ck_dir.exists():
            raise FileNotFoundError(f"{ck_dir}: missing checkpoint")
        ck = P.load_checkpoint(ck_dir, expect_hash=s.digest())
        if task == "classification":
            probs = P.predict_probs(ck.model, data.test)
            from .evaluation import category_accuracy
            metrics.update(category_accuracy(probs, [x.categories for x in data.samples["test"]]))
            recs = report.sample_records(ck.model, data.test, data.samples["test"], placeholder)
            r = report.image_weight_correlation(recs)
            if r is not None:
                metrics["image_weight_placeholder_r"] = r
        else:
            metrics["mrr"] = P.retrieval_metric(ck.model, data.test)
    baselines = report.baseline_rows(data, s.seed)
    res = {**_provenance(s), "variant": cfg.variant, "flags": list(cfg.flags()),
           "metrics": {k: round(float(v), 6) for k, v in sorted(metrics.items())},
           "baselines": baselines, "samples": recs}
    report.write_json(out / "eval.json", res)
    if recs:
        cols = ["id", "gold", "pred", "top1_hit", "image_weight", "attention_mass", "placeholder"]
        flat = [{**r, "gold": " ".join(str(g) for g in r["gold"])} for r in recs]
        # samples sorted by image weight, so both tails are easy to inspect
        if "image_weight" in recs[0]:
            flat.sort(key=lambda r: (r["image_weight"], r["id"]))
        report.write_csv(out / "samples.csv", flat, cols, _header(s))
        _figures_for_run(out, res, placeholder)
    rows = [{"config": cfg.variant, **res["metrics"]}] + [{"config": k, **v} for k, v in baselines.items()]
    columns = ["config", "top1_hit", "subset_exact", "mrr"] + (
        ["image_weight_placeholder_r"] if "image_weight_placeholder_r" in metrics else [])
    report.write_csv(out / "metrics.csv", rows, columns, _header(s))
    _print_rows(rows, columns)
    return EXIT_OK


def cmd_ablate(args, s: Settings) -> int:
    from . import pipeline as P
    from . import plotting, report
    from .experiments import baseline_summary, run_grid, summarize_grid, variant_configs

    base = s.run
    corpus, _ = _corpus(s, args.data)
    if args.grid == "ablation":
        configs = P.ablation_configs(base)
    else:
        configs = variant_configs(base)
    out = Path(args.out or s.results_dir() / args.grid)
    _write_config(s, out)
    runs = run_grid(configs, corpus, args.seeds, workers=args.threads or 1)
    rows = summarize_grid(runs)
    if args.grid == "variants":
        rows = baseline_summary(corpus, base, args.seeds) + rows
    header = f"config_hash={s.digest()} seeds={' '.join(str(x) for x in args.seeds)}"
    columns = ["config", "top1_hit", "top1_hit_std", "subset_exact", "subset_exact_std", "mrr", "mrr_std",
               "n_seeds", "seeds", "config_hash"]
    report.write_csv(out / f"{args.grid}.csv", rows, columns, header)
    per_seed = [{"config": r.label, "seed": r.seed, "config_hash": r.config_hash, **r.metrics} for r in runs]
    report.write_json(out / f"{args.grid}.json", {**_provenance(s, seeds=args.seeds), "rows": rows,
                                                  "runs": per_seed})
    model_rows = [r for r in rows if "top1_hit" in r]
    plotting.metric_bars(model_rows, "top1_hit", out / f"{args.grid}_top1.png", errors="top1_hit_std")
    mrr_rows = [r for r in rows if "mrr" in r]
    if mrr_rows:
        plotting.metric_bars(mrr_rows, "mrr", out / f"{args.grid}_mrr.png", errors="mrr_std")
    _print_rows(rows, columns[:7])
    return EXIT_OK


def cmd_diagnose_knn(args, s: Settings) -> int:
    from . import plotting, report
    from .knn import diagnose

    out = Path(args.out or s.results_dir() / "knn")
    rows = diagnose(s.synthetic, s.diagnose, seed=s.seed)
    _write_config(s, out)
    columns = ("corpus",) + report.KNN_COLUMNS
    report.write_csv(out / "knn.csv", rows, columns, _header(s))
    plotting.knn_curves(rows, out / "knn.png", "mean average distance to the K nearest neighbours")
    _print_rows(rows, columns)
    return EXIT_OK


def cmd_grad_check(args, s: Settings) -> int:
    from . import report
    from .gradcheck import TOLERANCE, case_names, run_harness

    unknown = sorted(set(args.case) - set(case_names()))
    if unknown:
        raise UsageError(f"unknown case(s) {unknown}; choose from {case_names()}")
    rows, seconds = run_harness(range(args.seeds), max_coords=args.coords, only=args.case or None)
    table = [dataclasses.asdict(r) for r in rows]
    out = Path(args.out or s.results_dir() / "grad-check")
    columns = ["case", "dtype", "worst_input", "max_rel_error", "worst_seed", "passed"]
    report.write_csv(out / "grad_check.csv", table, columns,
                     f"{_header(s)} seeds={args.seeds} tolerance_f32={TOLERANCE['float32']} "
                     f"tolerance_f64={TOLERANCE['float64']}")
    for r in table:
        r["max_rel_error"] = f"{r['max_rel_error']:.3e}"
    _print_rows(table, columns)
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed over {args.seeds} seeds in {seconds:.1f}s")
    return EXIT_FAILURE if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "diagnose-knn": cmd_diagnose_knn,
    "grad-check": cmd_grad_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        s = _settings(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmcqa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    try:
        return COMMANDS[args.command](args, s)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmcqa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any failure while running is reported, not raised
        log.debug("failure", exc_info=True)
        print(f"mmcqa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
