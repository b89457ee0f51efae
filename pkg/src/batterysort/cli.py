"""``batterysort`` command line: train, evaluate, benchmark, sweep, simulate, report.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 training
divergence, 4 missing or corrupt weights/checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from . import __version__
from .backbone import KnowledgeRegime, LoadError, Regime, load_checkpoint, load_pretrained, resolve_weights_path
from .config import Config, ConfigError
from .dataset import ClassCatalog, ConfigurationError, ImageSet, SplitPlan, load_corpus, load_image, preprocess
from .evaluation import classify, score, write_confusion_csv
from .experiments import (
    ExperimentConfig,
    ExperimentError,
    benchmark,
    run_once,
    sweep_dropout,
    sweep_trainable_layers,
    write_reports,
)
from .sortsim import LineConfig, read_stream, simulate, throughput_report, write_event_log
from .training import DivergenceError, TrainingConfigError

log = logging.getLogger("batterysort")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_WEIGHTS = 0, 1, 2, 3, 4


class Timer:
    """Wall-clock seconds per named phase."""

    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = round(time.perf_counter() - t0, 3)


def write_manifest(out_dir: Path, command: str, cfg: Config, seeds, artifacts, timer: Timer) -> Path:
    """Record what produced ``out_dir``. Written last; every listed artifact must exist."""
    out_dir = Path(out_dir)
    paths = sorted({str(Path(p)) for p in artifacts})
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"manifest lists missing artifacts: {missing}")
    manifest = {
        "tool": "batterysort",
        "version": __version__,
        "command": command,
        "config": cfg.snapshot(),
        "seeds": list(seeds),
        "artifacts": [str(Path(p).resolve().relative_to(out_dir.resolve())) if Path(p).resolve().is_relative_to(out_dir.resolve())
                      else str(Path(p).resolve()) for p in paths],
        "seconds": timer.seconds,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


# ---------------------------------------------------------------- helpers


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    for assignment in args.set or ():
        cfg.set(assignment)
    return cfg


def _relative_to_config(cfg: Config, value: str) -> Path:
    p = Path(value)
    if not p.is_absolute() and cfg.path is not None:
        p = cfg.path.parent / p
    return p


def _dataset(cfg: Config) -> ImageSet:
    root_value = cfg.get("dataset", "root")
    if not root_value:
        raise ConfigError("dataset.root is not set", cfg.path, cfg.line_of("dataset", "root"))
    root = _relative_to_config(cfg, root_value)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}", cfg.path, cfg.line_of("dataset", "root"))
    others = cfg.get("dataset", "others_id")
    corpus = load_corpus(root, ClassCatalog.from_directory(root, others))
    if corpus.skipped:
        log.warning("%d files skipped while loading %s", len(corpus.skipped), root)
    log.info("loaded %d images in %d classes (+%d others)", len(corpus.known()), len(corpus.catalog), len(corpus.others()))
    return ImageSet.from_corpus(corpus)


def _source(cfg: Config):
    arch = cfg.get("model", "arch")
    weights = cfg.get("model", "weights")
    path = resolve_weights_path(arch, _relative_to_config(cfg, weights) if weights else None)
    log.info("pretrained weights: %s", path)
    return load_pretrained(path, arch)


def _experiment_kw(cfg: Config) -> dict:
    return dict(
        n_runs=cfg.integer("experiment", "n_runs"),
        base_seed=cfg.integer("experiment", "base_seed"),
        schedules=cfg.schedules(),
        threshold=cfg.number("experiment", "threshold"),
        save_checkpoints=cfg.flag("experiment", "save_checkpoints"),
    )


def _experiment_config(cfg: Config) -> ExperimentConfig:
    kind = Regime(cfg.get("experiment", "regime"))
    depth = cfg.integer("model", "v_depth") if kind is Regime.FINE_TUNED else 0
    return ExperimentConfig(regime=KnowledgeRegime(kind, depth), dropout_rate=cfg.number("model", "dropout"),
                            **_experiment_kw(cfg))


def _out_dir(args, cfg: Config, default_name: str | None = None) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = _relative_to_config(cfg, cfg.get("experiment", "output_dir"))
        if default_name:
            out = out / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg, timer = _config(args), Timer()
    config = replace(_experiment_config(cfg), n_runs=1, save_checkpoints=True)
    out = _out_dir(args, cfg, f"train-{config.config_hash()}")
    with timer("load"):
        data, source = _dataset(cfg), _source(cfg)
    with timer("train"):
        result = run_once(config, data, source, 0, out)
    print(f"test accuracy {result.score.accuracy:.4f} -> {out}")
    artifacts = [out / n for n in ("checkpoint.pt", "manifest.txt", "history.csv", "split.json", "report.json")]
    write_manifest(out, "train", cfg, [result.seed], artifacts, timer)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, timer = _config(args), Timer()
    with timer("load"):
        model = load_checkpoint(args.checkpoint)
        data = _dataset(cfg)
    if model.catalog is not None and model.catalog.classes != data.catalog.classes:
        raise ConfigError(f"dataset classes {data.catalog.classes} differ from the checkpoint's {model.catalog.classes}")
    ckpt_dir = Path(args.checkpoint) if Path(args.checkpoint).is_dir() else Path(args.checkpoint).parent
    split_file = ckpt_dir / "split.json"
    ids = SplitPlan.from_json(split_file.read_text()).test_ids if split_file.exists() and not args.all else data.ids
    out = Path(args.out) if args.out else ckpt_dir / "evaluation"
    out.mkdir(parents=True, exist_ok=True)
    threshold = cfg.number("experiment", "threshold")
    with timer("score"):
        result = score(model, data.subset(ids), threshold, others=data.others_pixels)
    report = result.to_dict() | {"threshold": threshold, "n_items": len(ids),
                                 "rejection_rate_known": result.rejection_rate_known,
                                 "rejection_rate_others": result.rejection_rate_others}
    (out / "evaluation.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_confusion_csv(result.confusion, data.catalog, out / "confusion.csv")
    print(f"accuracy {result.accuracy:.4f} on {len(ids)} images; "
          f"rejected {result.rejected_known}/{result.n_known} known, {result.rejected_others}/{result.n_others} others")
    write_manifest(out, "evaluate", cfg, [], [out / "evaluation.json", out / "confusion.csv"], timer)
    return EXIT_OK


def _study_kw(args, cfg: Config) -> dict:
    return _experiment_kw(cfg) | {"resume": args.resume, "jobs": args.jobs}


def _study_manifest(out: Path, command: str, cfg: Config, artifacts, timer: Timer) -> None:
    n, base = cfg.integer("experiment", "n_runs"), cfg.integer("experiment", "base_seed")
    write_manifest(out, command, cfg, range(base, base + n), artifacts, timer)


def cmd_benchmark(args) -> int:
    cfg, timer = _config(args), Timer()
    regimes = [r.value for r in Regime] if args.regimes == "all" else [Regime(r.strip()).value for r in args.regimes.split(",")]
    out = _out_dir(args, cfg)
    with timer("load"):
        data, source = _dataset(cfg), _source(cfg)
    with timer("experiments"):
        results = benchmark(data, source, regimes, cfg.integer("model", "v_depth"), out,
                            dropout_rate=cfg.number("model", "dropout"), **_study_kw(args, cfg))
    for name, res in results.items():
        print(f"{name:>13}: mean {res.report.mean:.4f}  best {res.report.best:.4f}  sd {res.report.sd:.4f}")
    _study_manifest(out, "benchmark", cfg, [out / "table1.csv", out / "benchmark.json"], timer)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, timer = _config(args), Timer()
    out = _out_dir(args, cfg)
    with timer("load"):
        data, source = _dataset(cfg), _source(cfg)
    with timer("experiments"):
        if args.kind == "layers":
            results = sweep_trainable_layers(data, source, cfg.depths(), out, dropout_rate=cfg.number("model", "dropout"),
                                             **_study_kw(args, cfg))
            for depth, res in results.items():
                print(f"trainable layers {depth}: mean {res.report.mean:.4f}  sd {res.report.sd:.4f}")
            artifacts = [out / "table2.csv", out / "sweep_layers.json"]
        else:
            rows = sweep_dropout(data, source, cfg.rates(), out, v_depth=cfg.integer("model", "v_depth"),
                                 **_study_kw(args, cfg))
            print(f"{len(rows)} dropout runs -> {out / 'dropout_sweep.csv'}")
            artifacts = [out / n for n in ("dropout_sweep.csv", "dropout_training.png", "dropout_testing.png", "sweep_dropout.json")]
    _study_manifest(out, f"sweep-{args.kind}", cfg, artifacts, timer)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg, timer = _config(args), Timer()
    model = load_checkpoint(args.checkpoint)
    if model.catalog is None:
        raise ConfigError(f"checkpoint {args.checkpoint} carries no class catalog")
    line = LineConfig(model.catalog, tuple(cfg.ejector_positions()), cfg.integer("simulator", "belt_length"))
    threshold = cfg.number("simulator", "threshold")
    stream = read_stream(args.stream)
    out = Path(args.out) if args.out else _out_dir(args, cfg, "simulation")
    out.mkdir(parents=True, exist_ok=True)

    def classifier(path):
        return classify(model, preprocess(load_image(path), str(path)), threshold)

    with timer("simulate"):
        events, ledger = simulate(line, stream, classifier)
    write_event_log(events, out / "events.csv")
    summary = json.loads(ledger.to_json())
    summary["batteries_per_tick"] = throughput_report(events).batteries_per_tick if events else 0.0
    summary["failed"] = sum(e.failed for e in events)
    (out / "ledger.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"{len(events)} batteries sorted; mean bin purity {summary['mean_purity']}")
    write_manifest(out, "simulate", cfg, [], [out / "events.csv", out / "ledger.json"], timer)
    return EXIT_OK


def cmd_report(args) -> int:
    for path in write_reports(args.run_dir):
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="batterysort", description="Battery-type classifier training, experiments and sorting-line simulation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, out_help="output directory"):
        p.add_argument("--config", help="INI config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", help=out_help)
        return p

    p = with_config(sub.add_parser("train", help="train one model"), "run directory")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("evaluate", help="score a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--all", action="store_true", help="score every image instead of the run's test split")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("benchmark", cmd_benchmark, "compare knowledge regimes"),
                                 ("sweep", cmd_sweep, "trainable-layer or dropout sweep")):
        p = with_config(sub.add_parser(name, help=helptext))
        p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
        p.add_argument("--resume", action="store_true", help="reuse completed runs found in the output directory")
        p.set_defaults(func=func)
        if name == "benchmark":
            p.add_argument("--regimes", default="all", help="'all' or a comma list of regimes")
        else:
            p.add_argument("--kind", choices=("layers", "dropout"), required=True)

    p = with_config(sub.add_parser("simulate", help="run a stream through the sorting line"))
    p.add_argument("--stream", required=True, help="CSV stream file or image directory")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="regenerate tables and plots from stored runs")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, TrainingConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, ExperimentError) as exc:
        if isinstance(exc, DivergenceError) or isinstance(exc.__cause__, DivergenceError):
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except LoadError as exc:
        print(f"weights error: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
