"""Cross-entropy optimisation of the trainable stages with a staged schedule."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import StagedModel, set_stage_boundary, to_tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
BATCH_SIZE = 32


class TrainingConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, learning_rate: float, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch} (learning rate {learning_rate})")
        self.epoch = epoch
        self.learning_rate = learning_rate


@dataclass(frozen=True)
class StageSchedule:
    learning_rate: float
    max_epochs: int
    patience: int | None = None
    extra_unfreeze: int = 0

    def __post_init__(self):
        # learning_rate == 0 is allowed: it is a useful no-op check.
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise TrainingConfigError(f"learning rate must be a finite number >= 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise TrainingConfigError("max_epochs must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise TrainingConfigError("patience must be >= 1")
        if self.extra_unfreeze < 0:
            raise TrainingConfigError("extra_unfreeze must be >= 0")


DEFAULT_SCHEDULES = (
    StageSchedule(0.005, 300),
    StageSchedule(0.00005, 100, patience=10, extra_unfreeze=2),
)


def reduced_schedules(stage1_epochs: int, stage2_epochs: int) -> tuple[StageSchedule, StageSchedule]:
    """Default learning rates and patience with shortened epoch budgets."""
    s1, s2 = DEFAULT_SCHEDULES
    return (
        StageSchedule(s1.learning_rate, stage1_epochs, s1.patience, s1.extra_unfreeze),
        StageSchedule(s2.learning_rate, stage2_epochs, s2.patience, s2.extra_unfreeze),
    )


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def write_csv(self, path, stage: int | None = None, append: bool = False) -> None:
        path = Path(path)
        new = not append or not path.exists()
        with open(path, "a" if append else "w", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["stage", "epoch", "loss", "train_acc", "val_acc"] if stage is not None else ["epoch", "loss", "train_acc", "val_acc"])
            for r in self.records:
                row = [r.epoch, f"{r.loss:.6f}", f"{r.train_acc:.6f}", f"{r.val_acc:.6f}"]
                w.writerow([stage, *row] if stage is not None else row)


def cross_entropy(probabilities: Sequence[float], true_label: int) -> float:
    """``-log p[true_label]`` with ``p`` floored at 1e-12."""
    p = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= true_label < len(p):
        raise IndexError(f"label index {true_label} outside [0, {len(p)})")
    return float(-np.log(max(p[true_label], PROB_FLOOR)))


def cross_entropy_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy of the softmax, with the same probability floor."""
    logp = torch.log_softmax(logits, dim=1).gather(1, targets[:, None])[:, 0]
    return -logp.clamp(min=math.log(PROB_FLOOR)).mean()


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    x, y = data
    return np.asarray(x, dtype=np.float32), np.asarray(y, dtype=np.int64)


@torch.no_grad()
def _prefix(model: StagedModel, x: np.ndarray, start: int, chunk: int = 64) -> torch.Tensor:
    t = to_tensor(x)
    if start == 0:
        return t
    model.eval()
    return torch.cat([model.trunk.prefix(t[i : i + chunk], start) for i in range(0, len(t), chunk)])


@torch.no_grad()
def _accuracy(model: StagedModel, h: torch.Tensor, y: torch.Tensor, start: int, chunk: int = 64) -> float:
    model.eval()
    correct = 0
    for i in range(0, len(h), chunk):
        pred = model.logits(h[i : i + chunk], start_block=start).argmax(1)
        correct += int((pred == y[i : i + chunk]).sum())
    return correct / max(len(h), 1)


def train_stage(
    model: StagedModel,
    train_set,
    val_set,
    schedule: StageSchedule,
    seed: int,
    evaluator: Callable[[StagedModel, int], float] | None = None,
    batch_size: int = BATCH_SIZE,
) -> tuple[StagedModel, TrainHistory]:
    """One optimisation stage with Adam over the trainable units only.

    The frozen prefix of the network (everything before the first block with a
    trainable unit) is evaluated once and reused, which is exact because frozen
    units never change and run on stored batch-norm statistics.

    ``evaluator(model, epoch)`` replaces the validation-accuracy computation
    when given.
    """
    params = model.trainable_parameters()
    if not params:
        raise TrainingConfigError("model has no trainable parameters")
    x_tr, y_tr = _as_arrays(train_set)
    x_va, y_va = _as_arrays(val_set)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise TrainingConfigError("train and validation sets must be non-empty")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    start = model.first_trainable_block()
    h_tr, h_va = _prefix(model, x_tr, start), _prefix(model, x_va, start)
    t_tr, t_va = torch.from_numpy(y_tr), torch.from_numpy(y_va)
    opt = torch.optim.Adam(params, lr=schedule.learning_rate)

    history = TrainHistory(best_val_accuracy=-1.0)
    best_state = None
    for epoch in range(1, schedule.max_epochs + 1):
        model.train()
        order = torch.from_numpy(rng.permutation(len(h_tr)))
        total, correct = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            logits = model.logits(h_tr[idx], start_block=start)
            loss = cross_entropy_loss(logits, t_tr[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(epoch, schedule.learning_rate, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == t_tr[idx]).sum())
        val_acc = evaluator(model, epoch) if evaluator else _accuracy(model, h_va, t_va, start)
        history.records.append(EpochRecord(epoch, total / len(order), correct / len(order), val_acc))
        history.stopped_epoch = epoch
        if val_acc > history.best_val_accuracy:
            history.best_val_accuracy, history.best_epoch = val_acc, epoch
            if schedule.patience is not None:
                best_state = copy.deepcopy(model.state_dict())
        elif schedule.patience is not None and epoch - history.best_epoch >= schedule.patience:
            history.stopped_early = True
            log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def two_stage_train(
    model: StagedModel,
    train_set,
    val_set,
    schedules: Sequence[StageSchedule] = DEFAULT_SCHEDULES,
    seed: int = 0,
    batch_size: int = BATCH_SIZE,
    on_stage_end: Callable[[int, StagedModel, TrainHistory], None] | None = None,
) -> tuple[StagedModel, list[TrainHistory]]:
    """Run the stages in order, widening stage V by ``extra_unfreeze`` before each."""
    if not schedules:
        raise TrainingConfigError("at least one stage schedule is required")
    histories = []
    for i, schedule in enumerate(schedules):
        if schedule.extra_unfreeze:
            set_stage_boundary(model, model.v_depth + schedule.extra_unfreeze)
        model, hist = train_stage(model, train_set, val_set, schedule, seed + 1000 * i, batch_size=batch_size)
        histories.append(hist)
        if on_stage_end is not None:
            on_stage_end(i, model, hist)
    return model, histories
