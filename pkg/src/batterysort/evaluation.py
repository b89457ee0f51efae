"""Confidence-threshold classification, test-set scoring and multi-run statistics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .backbone import StagedModel, forward
from .dataset import ClassCatalog

DEFAULT_THRESHOLD = 0.80


class ScoringError(ValueError):
    pass


class UndefinedMetricError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class Prediction:
    probabilities: tuple[float, ...]
    label: str
    confidence: float
    index: int  # argmax class index, even when rejected


def predict_from_probabilities(probs: Sequence[float], catalog: ClassCatalog, threshold: float) -> Prediction:
    """Argmax label (lowest index wins ties) unless the top probability is below ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    p = np.asarray(probs, dtype=np.float64)
    idx = int(np.argmax(p))  # first maximum
    conf = float(p[idx])
    label = catalog.others_id if conf < threshold else catalog.classes[idx]
    return Prediction(tuple(float(v) for v in p), label, conf, idx)


def predict_proba(model, images) -> np.ndarray:
    """Probabilities from a :class:`StagedModel` or any ``images -> (N, K)`` callable."""
    if isinstance(model, StagedModel):
        return forward(model, images)
    return np.asarray(model(images), dtype=np.float64)


def classify(model: StagedModel, image, threshold: float = DEFAULT_THRESHOLD, catalog: ClassCatalog | None = None) -> Prediction:
    catalog = catalog or model.catalog
    probs = predict_proba(model, np.asarray(image)[None])[0]
    return predict_from_probabilities(probs, catalog, threshold)


def rejected_mask(probs: np.ndarray, threshold: float) -> np.ndarray:
    return np.asarray(probs).max(axis=1) < threshold


@dataclass
class ScoreResult:
    accuracy: float
    confusion: np.ndarray  # rows = true class, columns = argmax class
    n_known: int
    rejected_known: int
    n_others: int = 0
    rejected_others: int = 0

    @property
    def rejection_rate_known(self) -> float:
        return self.rejected_known / self.n_known if self.n_known else 0.0

    @property
    def rejection_rate_others(self) -> float | None:
        return self.rejected_others / self.n_others if self.n_others else None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "n_known": self.n_known,
            "rejected_known": self.rejected_known,
            "n_others": self.n_others,
            "rejected_others": self.rejected_others,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreResult":
        return cls(d["accuracy"], np.asarray(d["confusion"], dtype=np.int64), d["n_known"], d["rejected_known"],
                   d.get("n_others", 0), d.get("rejected_others", 0))


def score_probabilities(probs: np.ndarray, labels: np.ndarray, threshold: float, others_probs: np.ndarray | None = None) -> ScoreResult:
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ScoringError("empty test set")
    k = probs.shape[1]
    pred = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    result = ScoreResult(
        accuracy=float((pred == labels).mean()),
        confusion=confusion,
        n_known=len(labels),
        rejected_known=int(rejected_mask(probs, threshold).sum()),
    )
    if others_probs is not None and len(others_probs):
        result.n_others = len(others_probs)
        result.rejected_others = int(rejected_mask(others_probs, threshold).sum())
    return result


def score(model, test_set, threshold: float = DEFAULT_THRESHOLD, others=None) -> ScoreResult:
    """Plain argmax accuracy on ``test_set = (images, labels)``; rejection counted separately.

    Headline accuracy ignores the threshold. The threshold only decides the
    rejection counts for known items and for the optional ``others`` pool.
    """
    images, labels = test_set
    if len(labels) == 0:
        raise ScoringError("empty test set")
    probs = predict_proba(model, images)
    others_probs = predict_proba(model, others) if others is not None and len(others) else None
    return score_probabilities(probs, labels, threshold, others_probs)


@dataclass
class RunReport:
    per_run_accuracy: list[float]
    mean: float
    best: float
    sd: float
    improvement: float | None = None
    gap: float | None = None
    confusion: list[list[list[int]]] = field(default_factory=list)
    rejection_rate_known: float | None = None
    rejection_rate_others: float | None = None

    @property
    def gap_points(self) -> float | None:
        return None if self.gap is None else 100.0 * self.gap

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def improvement(mean: float, baseline_mean: float) -> float:
    """Relative gain over the baseline mean, ``(mean - baseline) / baseline``."""
    if baseline_mean == 0:
        raise UndefinedMetricError("improvement over a zero baseline is undefined")
    return (mean - baseline_mean) / baseline_mean


def aggregate(results: Sequence, baseline_mean: float | None = None, reference_mean: float | None = None) -> RunReport:
    """Combine per-run results (accuracies or :class:`ScoreResult`) into a report.

    ``sd`` is the population standard deviation; ``gap`` is ``reference - mean``
    as a fraction (multiply by 100 for percentage points).
    """
    if len(results) == 0:
        raise ScoringError("aggregate needs at least one run")
    scores = [r for r in results if isinstance(r, ScoreResult)]
    acc = np.array([r.accuracy if isinstance(r, ScoreResult) else float(r) for r in results], dtype=np.float64)
    report = RunReport(
        per_run_accuracy=acc.tolist(),
        mean=float(acc.mean()),
        best=float(acc.max()),
        sd=float(acc.std(ddof=0)),
    )
    if baseline_mean is not None:
        report.improvement = improvement(report.mean, baseline_mean)
    if reference_mean is not None:
        report.gap = reference_mean - report.mean
    if scores:
        report.confusion = [s.confusion.tolist() for s in scores]
        report.rejection_rate_known = float(np.mean([s.rejection_rate_known for s in scores]))
        others = [s.rejection_rate_others for s in scores if s.rejection_rate_others is not None]
        report.rejection_rate_others = float(np.mean(others)) if others else None
    return report


def write_confusion_csv(confusion: np.ndarray, catalog: ClassCatalog, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["true\\predicted", *catalog.classes])
        for name, row in zip(catalog.classes, np.asarray(confusion)):
            w.writerow([name, *map(int, row)])

