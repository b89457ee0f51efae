"""Tick-based simulation of a camera + ejector sorting line.

One battery enters at the camera (position 0) every tick and moves one
position per tick. A battery classified as class ``j`` is blown off the belt
when it reaches ``ejector_positions[j]``; anything labelled ``others`` (low
confidence, or the classifier failed) rides to the end of the belt and drops
into the trailing bin.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataset import ClassCatalog
from .evaluation import Prediction, predict_from_probabilities

log = logging.getLogger(__name__)


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class LineConfig:
    catalog: ClassCatalog
    ejector_positions: tuple[int, ...] = ()
    belt_length: int = 0

    def __post_init__(self):
        k = len(self.catalog)
        positions = tuple(self.ejector_positions) or tuple(range(1, k + 1))
        belt = self.belt_length or positions[-1] + 1
        object.__setattr__(self, "ejector_positions", positions)
        object.__setattr__(self, "belt_length", belt)
        if len(positions) != k:
            raise ValueError(f"need exactly {k} ejector positions, got {len(positions)}")
        if positions[0] < 1 or any(b <= a for a, b in zip(positions, positions[1:])):
            raise ValueError(f"ejector positions must be strictly increasing and past the camera: {positions}")
        if positions[-1] >= belt:
            raise ValueError(f"ejector at {positions[-1]} is not before the belt end {belt}")

    @property
    def camera_position(self) -> int:
        return 0

    def exit_position(self, label: str) -> int:
        if label == self.catalog.others_id:
            return self.belt_length
        return self.ejector_positions[self.catalog.index(label)]


@dataclass(frozen=True)
class SortEvent:
    battery_id: str
    true_type: str | None
    prediction: Prediction
    assigned_bin: str
    tick_classified: int
    tick_binned: int
    failed: bool = False

    @property
    def residence(self) -> int:
        return self.tick_binned - self.tick_classified


@dataclass
class BinLedger:
    bins: tuple[str, ...]
    counts: dict[str, int] = field(default_factory=dict)
    correct: dict[str, int] = field(default_factory=dict)
    known_truth: dict[str, int] = field(default_factory=dict)

    @classmethod
    def empty(cls, catalog: ClassCatalog) -> "BinLedger":
        bins = (*catalog.classes, catalog.others_id)
        return cls(bins, dict.fromkeys(bins, 0), dict.fromkeys(bins, 0), dict.fromkeys(bins, 0))

    def add(self, event: SortEvent) -> None:
        b = event.assigned_bin
        self.counts[b] += 1
        if event.true_type is not None:
            self.known_truth[b] += 1
            self.correct[b] += event.true_type == b

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def purity(self) -> dict[str, float | None]:
        """Per bin: share of contents (with known truth) whose true type is the bin's type."""
        return {b: (self.correct[b] / self.known_truth[b] if self.known_truth[b] else None) for b in self.bins}

    def mean_purity(self) -> float | None:
        vals = [v for v in self.purity().values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_json(self) -> str:
        return json.dumps(
            {"counts": self.counts, "purity": self.purity(), "mean_purity": self.mean_purity(), "total": self.total},
            indent=1,
        )


Classifier = Callable[[object], Prediction]


def simulate(line: LineConfig, stream: Iterable[Sequence], classifier: Classifier) -> tuple[list[SortEvent], BinLedger]:
    """Run the line until every battery has reached a bin.

    ``stream`` items are ``(battery_id, image)`` or ``(battery_id, image, true_type)``.
    Events come out in the order batteries land in bins (ties in entry order).
    """
    catalog = line.catalog
    ledger = BinLedger.empty(catalog)
    seen: set[str] = set()
    belt: list[tuple[int, str, str | None, Prediction, bool]] = []  # (exit_tick, id, truth, pred, failed)
    pending = deque(stream)
    events: list[SortEvent] = []
    tick = 0
    while pending or belt:
        if pending:
            item = pending.popleft()
            battery_id, image = str(item[0]), item[1]
            truth = item[2] if len(item) > 2 else None
            if battery_id in seen:
                raise StreamError(f"duplicate battery id {battery_id!r}")
            seen.add(battery_id)
            failed = False
            try:
                pred = classifier(image)
                if not catalog.is_valid(pred.label):
                    raise ValueError(f"unknown label {pred.label!r}")
            except Exception as exc:  # fail safe: route to the others bin
                log.warning("classifier failed on %s: %s", battery_id, exc)
                pred = Prediction((), catalog.others_id, 0.0, -1)
                failed = True
            belt.append((tick + line.exit_position(pred.label), battery_id, truth, pred, failed))
        landed = [b for b in belt if b[0] == tick]
        if landed:
            belt = [b for b in belt if b[0] != tick]
            for exit_tick, battery_id, truth, pred, failed in landed:
                ev = SortEvent(battery_id, truth, pred, pred.label, exit_tick - line.exit_position(pred.label),
                               exit_tick, failed)
                events.append(ev)
                ledger.add(ev)
        tick += 1
    return events, ledger


@dataclass
class ThroughputReport:
    batteries_per_tick: float
    mean_residence: dict[str, float]


def throughput_report(events: Sequence[SortEvent]) -> ThroughputReport:
    if not events:
        raise ValueError("no events")
    first = min(e.tick_classified for e in events)
    last = max(e.tick_binned for e in events)
    by_bin: dict[str, list[int]] = {}
    for e in events:
        by_bin.setdefault(e.assigned_bin, []).append(e.residence)
    return ThroughputReport(len(events) / max(last - first, 1), {b: float(np.mean(r)) for b, r in by_bin.items()})


def write_event_log(events: Sequence[SortEvent], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["battery_id", "true_type", "predicted", "confidence", "bin", "tick_classified", "tick_binned", "failed"])
        for e in events:
            w.writerow([e.battery_id, e.true_type or "", e.prediction.label, f"{e.prediction.confidence:.6f}", e.assigned_bin,
                        e.tick_classified, e.tick_binned, int(e.failed)])


def read_stream(source) -> list[tuple[str, Path, str | None]]:
    """Stream from a CSV (``battery_id,image_path[,true_type]``) or an image directory.

    For a directory, an optional ``truth.csv`` (``battery_id,true_type``) next to
    the images supplies ground truth; battery ids are the file stems.
    """
    source = Path(source)
    if source.is_dir():
        truth: dict[str, str] = {}
        truth_file = source / "truth.csv"
        if truth_file.exists():
            with open(truth_file, newline="") as f:
                truth = {row["battery_id"]: row["true_type"] for row in csv.DictReader(f)}
        images = sorted(p for p in source.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
        return [(p.stem, p, truth.get(p.stem)) for p in images]
    with open(source, newline="") as f:
        rows = list(csv.DictReader(f))
    base = source.parent
    return [(r["battery_id"], base / r["image_path"], r.get("true_type") or None) for r in rows]


class StubClassifier:
    """Predicts the true type with probability ``accuracy``, otherwise a uniformly
    chosen wrong class. Images are ignored; the true type is passed as the image."""

    def __init__(self, catalog: ClassCatalog, accuracy: float, threshold: float = 0.0, seed: int = 0, confidence: float = 0.9):
        self.catalog, self.accuracy, self.threshold = catalog, accuracy, threshold
        self.confidence = confidence
        self.rng = np.random.default_rng(seed)

    def __call__(self, true_type: str) -> Prediction:
        k = len(self.catalog)
        j = self.catalog.index(true_type)
        if k > 1 and self.rng.random() >= self.accuracy:
            j = (j + 1 + self.rng.integers(k - 1)) % k
        p = np.full(k, (1 - self.confidence) / max(k - 1, 1))
        p[j] = self.confidence if k > 1 else 1.0
        return predict_from_probabilities(p, self.catalog, self.threshold)


def counter_from_events(events: Sequence[SortEvent]) -> Counter:
    return Counter(e.assigned_bin for e in events)
