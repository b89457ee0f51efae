"""Seeded multi-run experiments: knowledge regimes, trainable-depth and dropout sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence


from .backbone import (
    KnowledgeRegime,
    Regime,
    StagedModel,
    build_model,
    make_trainable_from_scratch,
    reconfigure_head,
    save_checkpoint,
    set_stage_boundary,
)
from .dataset import ImageSet, make_split
from .evaluation import DEFAULT_THRESHOLD, RunReport, ScoreResult, aggregate, score
from .training import DEFAULT_SCHEDULES, StageSchedule, two_stage_train

log = logging.getLogger(__name__)

DEFAULT_DEPTHS = (0, 1, 2, 3, 4)
DEFAULT_RATES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    regime: KnowledgeRegime = KnowledgeRegime(Regime.FINE_TUNED, 2)
    dropout_rate: float = 0.20
    n_runs: int = 10
    base_seed: int = 0
    schedules: tuple[StageSchedule, ...] = DEFAULT_SCHEDULES
    threshold: float = DEFAULT_THRESHOLD
    save_checkpoints: bool = True

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        object.__setattr__(self, "schedules", tuple(self.schedules))

    @property
    def v_depth(self) -> int:
        return self.regime.v_depth

    def run_seed(self, i: int) -> int:
        return self.base_seed + i

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = {"kind": self.regime.kind.value, "v_depth": self.regime.v_depth}
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("save_checkpoints")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def regime_config(kind: Regime | str, v_depth: int = 2, **kw) -> ExperimentConfig:
    kind = Regime(kind)
    depth = v_depth if kind is Regime.FINE_TUNED else 0
    return ExperimentConfig(regime=KnowledgeRegime(kind, depth), **kw)


def build_run_model(config: ExperimentConfig, source: StagedModel, catalog, seed: int) -> StagedModel:
    """Model for one run: inherited (transfer regimes) or freshly randomised."""
    kind = config.regime.kind
    if kind is Regime.NO_KNOWLEDGE:
        scratch = build_model(source.arch, source.num_classes, seed=seed + 7919)
        model = reconfigure_head(scratch, catalog, config.dropout_rate, head_seed=seed)
        return make_trainable_from_scratch(model)
    model = reconfigure_head(source, catalog, config.dropout_rate, head_seed=seed)
    return set_stage_boundary(model, config.v_depth)


def effective_schedules(config: ExperimentConfig) -> tuple[StageSchedule, ...]:
    # Only the fine-tuned regime widens stage V; the others have nothing to unfreeze.
    if config.regime.kind is Regime.FINE_TUNED:
        return config.schedules
    return tuple(replace(s, extra_unfreeze=0) for s in config.schedules)


@dataclass
class RunResult:
    run: int
    seed: int
    score: ScoreResult
    train_accuracy: float
    stopped_epochs: list[int]
    head_fingerprint: str
    backbone_fingerprints: dict[str, str]
    seconds: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["score"] = self.score.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        d = dict(d)
        d["score"] = ScoreResult.from_dict(d["score"])
        return cls(**d)


def run_once(config: ExperimentConfig, data: ImageSet, source: StagedModel, i: int, run_dir: Path | None = None) -> RunResult:
    t0 = time.time()
    seed = config.run_seed(i)
    plan = make_split(data.ids, seed)
    train, val, test = data.subset(plan.train_ids), data.subset(plan.val_ids), data.subset(plan.test_ids)
    model = build_run_model(config, source, data.catalog, seed)
    head_fp = model.fingerprint("A")
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "split.json").write_text(plan.to_json())
        history_path = run_dir / "history.csv"
        history_path.unlink(missing_ok=True)

    def on_stage_end(stage, m, hist):
        if run_dir is not None:
            hist.write_csv(history_path, stage=stage + 1, append=True)
            if config.save_checkpoints:
                save_checkpoint(m, run_dir / "checkpoint.pt", head_seed=seed)

    model, histories = two_stage_train(model, train, val, effective_schedules(config), seed=seed, on_stage_end=on_stage_end)
    result = RunResult(
        run=i,
        seed=seed,
        score=score(model, test, config.threshold, others=data.others_pixels),
        train_accuracy=score(model, train, config.threshold).accuracy,
        stopped_epochs=[h.stopped_epoch for h in histories],
        head_fingerprint=head_fp,
        backbone_fingerprints={"F": model.fingerprint("F"), "V": model.fingerprint("V")},
        seconds=time.time() - t0,
    )
    if run_dir is not None:
        (run_dir / "report.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True))
    log.info("run %d (%s): test acc %.3f, train acc %.3f, %.1fs", i, config.regime.kind.value,
             result.score.accuracy, result.train_accuracy, result.seconds)
    return result


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[RunResult]
    report: RunReport
    directory: Path | None = None


_WORKER: dict = {}


def _worker_run(args):
    config, i, run_dir = args
    return run_once(config, _WORKER["data"], _WORKER["source"], i, run_dir)


def experiment_dir(out_dir, config: ExperimentConfig) -> Path:
    return Path(out_dir) / config.config_hash()


def run_experiment(config: ExperimentConfig, data: ImageSet, source: StagedModel, out_dir=None,
                   resume: bool = False, jobs: int = 1) -> ExperimentResult:
    """``n_runs`` independent runs (own split, own head init) aggregated into a report.

    With ``out_dir``, artifacts land in ``out_dir/<config-hash>/run-<i>/``. If a
    run fails, the completed runs are kept and ``partial.json`` marks the
    experiment as incomplete before the error propagates.
    """
    root = experiment_dir(out_dir, config) if out_dir is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    results: dict[int, RunResult] = {}
    todo = []
    for i in range(config.n_runs):
        run_dir = root / f"run-{i}" if root is not None else None
        if resume and run_dir is not None and (run_dir / "report.json").exists():
            results[i] = RunResult.from_dict(json.loads((run_dir / "report.json").read_text()))
        else:
            todo.append((config, i, run_dir))
    try:
        if jobs > 1 and len(todo) > 1:
            _WORKER.update(data=data, source=source)
            with ProcessPoolExecutor(jobs, mp_context=mp.get_context("fork")) as pool:
                for r in pool.map(_worker_run, todo):
                    results[r.run] = r
        else:
            for cfg, i, run_dir in todo:
                results[i] = run_once(cfg, data, source, i, run_dir)
    except Exception as exc:
        if root is not None:
            (root / "partial.json").write_text(json.dumps({"complete": False, "completed_runs": sorted(results), "error": repr(exc)}))
        raise ExperimentError(f"experiment {config.config_hash()} failed after {len(results)} runs: {exc}") from exc
    runs = [results[i] for i in sorted(results)]
    report = aggregate([r.score for r in runs])
    if root is not None:
        (root / "partial.json").unlink(missing_ok=True)
        (root / "report.json").write_text(report.to_json())
    return ExperimentResult(config, runs, report, root)


# ---------------------------------------------------------------- tables


def write_table1(path, reports: dict[str, RunReport]) -> None:
    """Regime comparison: mean, best, SD and improvement over the no-knowledge mean."""
    baseline = reports.get(Regime.NO_KNOWLEDGE.value)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "mean", "best", "sd", "improvement"])
        for name, rep in reports.items():
            imp = "" if baseline is None else f"{aggregate(rep.per_run_accuracy, baseline_mean=baseline.mean).improvement:.4f}"
            w.writerow([name, f"{rep.mean:.6f}", f"{rep.best:.6f}", f"{rep.sd:.6f}", imp])


def write_table2(path, reports: dict[int, RunReport]) -> None:
    """Trainable-depth sweep with the gap (percentage points) to the best mean."""
    best = max(r.mean for r in reports.values())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trainable_layers", "mean", "best", "sd", "gap_points"])
        for depth, rep in sorted(reports.items()):
            gap = aggregate(rep.per_run_accuracy, reference_mean=best).gap_points
            w.writerow([depth, f"{rep.mean:.6f}", f"{rep.best:.6f}", f"{rep.sd:.6f}", f"{gap:.4f}"])


def write_dropout_csv(path, rows: Sequence[tuple[float, int, float, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dropout_rate", "run", "train_accuracy", "test_accuracy"])
        for rate, run, tr, te in rows:
            w.writerow([f"{rate:.2f}", run, f"{tr:.6f}", f"{te:.6f}"])


def read_dropout_csv(path) -> list[tuple[float, int, float, float]]:
    with open(path, newline="") as f:
        return [(float(r["dropout_rate"]), int(r["run"]), float(r["train_accuracy"]), float(r["test_accuracy"]))
                for r in csv.DictReader(f)]


def plot_dropout(rows, out_dir) -> list[Path]:
    """One box-plot image per panel (training, testing) with a 95% reference line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rates = sorted({r[0] for r in rows})
    paths = []
    for col, panel in ((2, "training"), (3, "testing")):
        data = [[r[col] * 100 for r in rows if r[0] == rate] for rate in rates]
        fig, ax = plt.subplots(figsize=(4, 3.2))
        ax.boxplot(data)
        ax.set_xticks(range(1, len(rates) + 1), [f"{int(round(r * 100))}%" for r in rates])
        ax.axhline(95, color="red", linestyle="--", linewidth=1)
        ax.set_xlabel("dropout rate")
        ax.set_ylabel(f"{panel} accuracy (%)")
        fig.tight_layout()
        path = Path(out_dir) / f"dropout_{panel}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


# ---------------------------------------------------------------- studies


def benchmark(data: ImageSet, source: StagedModel, regimes: Sequence[Regime | str] = tuple(Regime), v_depth: int = 2,
              out_dir=None, **config_kw) -> dict[str, ExperimentResult]:
    run_kw = _run_kw(config_kw)
    results = {}
    for kind in regimes:
        cfg = regime_config(kind, v_depth, **config_kw)
        results[Regime(kind).value] = run_experiment(cfg, data, source, out_dir, **run_kw)
    if out_dir is not None:
        _update_index(out_dir, "benchmark", {k: r.config.config_hash() for k, r in results.items()})
        write_reports(out_dir)
    return results


def _run_kw(config_kw: dict) -> dict:
    return {k: config_kw.pop(k) for k in ("resume", "jobs") if k in config_kw}


def sweep_trainable_layers(data: ImageSet, source: StagedModel, depths: Sequence[int] = DEFAULT_DEPTHS, out_dir=None,
                           dropout_rate: float = 0.20, **config_kw) -> dict[int, ExperimentResult]:
    run_kw = _run_kw(config_kw)
    results = {}
    for depth in depths:
        if depth < 0:
            raise ValueError("depths must be non-negative")
        # depth 0 is the head-only (non-optimal) regime
        kind = Regime.FINE_TUNED if depth > 0 else Regime.NON_OPTIMAL
        cfg = ExperimentConfig(regime=KnowledgeRegime(kind, depth), dropout_rate=dropout_rate, **config_kw)
        results[depth] = run_experiment(cfg, data, source, out_dir, **run_kw)
    if out_dir is not None:
        _update_index(out_dir, "layers", {str(d): r.config.config_hash() for d, r in results.items()})
        write_reports(out_dir)
    return results


def sweep_dropout(data: ImageSet, source: StagedModel, rates: Sequence[float] = DEFAULT_RATES, out_dir=None,
                  v_depth: int = 2, **config_kw) -> list[tuple[float, int, float, float]]:
    """Per rate and run: (rate, run, final training accuracy, test accuracy)."""
    run_kw = _run_kw(config_kw)
    results = {}
    for rate in rates:
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
        cfg = ExperimentConfig(regime=KnowledgeRegime(Regime.FINE_TUNED, v_depth), dropout_rate=rate, **config_kw)
        results[rate] = run_experiment(cfg, data, source, out_dir, **run_kw)
    if out_dir is not None:
        _update_index(out_dir, "dropout", {f"{rate:.2f}": r.config.config_hash() for rate, r in results.items()})
        write_reports(out_dir)
    return _dropout_rows({rate: r.runs for rate, r in results.items()})


def _dropout_rows(runs_by_rate: dict[float, list[RunResult]]) -> list[tuple[float, int, float, float]]:
    return [(rate, r.run, r.train_accuracy, r.score.accuracy) for rate, runs in runs_by_rate.items() for r in runs]


# ---------------------------------------------------------------- regeneration

INDEX_FILES = {"benchmark": "benchmark.json", "layers": "sweep_layers.json", "dropout": "sweep_dropout.json"}


def _update_index(out_dir, kind: str, entries: dict[str, str]) -> None:
    path = Path(out_dir) / INDEX_FILES[kind]
    index = json.loads(path.read_text()) if path.exists() else {}
    index.update(entries)
    path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_runs(experiment_root) -> list[RunResult]:
    paths = sorted(Path(experiment_root).glob("run-*/report.json"), key=lambda p: int(p.parent.name.split("-")[1]))
    if not paths:
        raise ExperimentError(f"no stored run reports under {experiment_root}")
    return [RunResult.from_dict(json.loads(p.read_text())) for p in paths]


def write_reports(out_dir) -> list[Path]:
    """Rebuild table1.csv, table2.csv, the dropout CSV and plots from stored run reports.

    Nothing is retrained; output depends only on the files under ``out_dir``.
    """
    out_dir = Path(out_dir)
    written = []

    def indexed(kind):
        path = out_dir / INDEX_FILES[kind]
        if not path.exists():
            return None
        return {key: load_runs(out_dir / h) for key, h in json.loads(path.read_text()).items()}

    bench = indexed("benchmark")
    if bench:
        order = [r.value for r in Regime if r.value in bench]
        write_table1(out_dir / "table1.csv", {k: aggregate([r.score for r in bench[k]]) for k in order})
        written.append(out_dir / "table1.csv")
    layers = indexed("layers")
    if layers:
        write_table2(out_dir / "table2.csv", {int(d): aggregate([r.score for r in runs]) for d, runs in layers.items()})
        written.append(out_dir / "table2.csv")
    dropout = indexed("dropout")
    if dropout:
        rows = _dropout_rows({float(k): dropout[k] for k in sorted(dropout, key=float)})
        write_dropout_csv(out_dir / "dropout_sweep.csv", rows)
        written += [out_dir / "dropout_sweep.csv", *plot_dropout(rows, out_dir)]
    if not written:
        raise ExperimentError(f"nothing to report in {out_dir}: no benchmark or sweep index found")
    return written
