import math

import numpy as np
import pytest
import torch

from batterysort.backbone import Head, build_model, reconfigure_head, set_stage_boundary
from batterysort.dataset import ClassCatalog, preprocess
from batterysort.synthetic import toy_patches
from batterysort.training import (
    DEFAULT_SCHEDULES,
    DivergenceError,
    StageSchedule,
    TrainHistory,
    TrainingConfigError,
    cross_entropy,
    cross_entropy_loss,
    train_stage,
    two_stage_train,
)

from conftest import random_images


def _random_task(n=24, k=3, seed=0):
    rng = np.random.default_rng(seed)
    return random_images(n, seed), rng.integers(k, size=n)


def _model(source, k=3, v_depth=2, seed=0, dropout=0.2):
    catalog = ClassCatalog.from_names([f"c{i}" for i in range(k)])
    return set_stage_boundary(reconfigure_head(source, catalog, dropout, head_seed=seed), v_depth)


# ---- loss


def test_cross_entropy_examples():
    assert cross_entropy([0, 1, 0], 1) == 0.0
    assert cross_entropy(np.full(9, 1 / 9), 4) == pytest.approx(math.log(9), abs=1e-12)
    assert cross_entropy(np.full(9, 1 / 9), 4) == pytest.approx(2.1972, abs=5e-5)
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(27.63, abs=5e-3)


@pytest.mark.parametrize("label", [-1, 3])
def test_cross_entropy_bad_label(label):
    with pytest.raises(IndexError):
        cross_entropy([0.2, 0.3, 0.5], label)


def test_batch_loss_matches_pointwise():
    logits = torch.tensor([[2.0, -1.0, 0.5], [0.0, 0.0, 0.0], [-80.0, 0.0, 0.0]])
    targets = torch.tensor([0, 2, 0])
    probs = torch.softmax(logits, 1).numpy()
    expected = np.mean([cross_entropy(p, t) for p, t in zip(probs, targets.tolist())])
    assert cross_entropy_loss(logits, targets).item() == pytest.approx(expected, rel=1e-6)


def test_gradient_matches_finite_differences():
    torch.manual_seed(1)
    head = Head(feature_dim=8, num_classes=3, dropout_rate=None).double()
    fmap = torch.randn(4, 8, 2, 2, dtype=torch.float64)
    targets = torch.tensor([0, 2, 1, 2])

    def loss():
        return cross_entropy_loss(head(fmap), targets)

    head.zero_grad()
    loss().backward()
    eps = 1e-6
    for param in head.parameters():
        analytic = param.grad.clone()
        numeric = torch.zeros_like(param)
        flat, num_flat = param.data.view(-1), numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
            num_flat[i] = (up - down) / (2 * eps)
        rel = (analytic - numeric).norm() / max(analytic.norm(), numeric.norm())
        assert rel < 1e-4


# ---- schedules


def test_default_schedules():
    s1, s2 = DEFAULT_SCHEDULES
    assert (s1.learning_rate, s1.max_epochs, s1.patience, s1.extra_unfreeze) == (0.005, 300, None, 0)
    assert (s2.learning_rate, s2.max_epochs, s2.patience, s2.extra_unfreeze) == (0.00005, 100, 10, 2)


@pytest.mark.parametrize("kw", [dict(learning_rate=-0.1), dict(max_epochs=0), dict(patience=0),
                                dict(extra_unfreeze=-1), dict(learning_rate=float("nan"))])
def test_schedule_validation(kw):
    args = dict(learning_rate=0.01, max_epochs=1) | kw
    with pytest.raises(TrainingConfigError):
        StageSchedule(**args)


# ---- train_stage contracts


def test_frozen_stage_invariant_two_epochs(tiny_source):
    model = _model(tiny_source)
    before = {s: model.fingerprint(s) for s in "FVA"}
    x, y = _random_task()
    _, hist = train_stage(model, (x[:16], y[:16]), (x[16:], y[16:]), StageSchedule(0.01, 2), seed=0)
    assert model.fingerprint("F") == before["F"]
    assert model.fingerprint("V") != before["V"]
    assert model.fingerprint("A") != before["A"]
    assert len(hist.records) == 2 == hist.stopped_epoch


def test_zero_learning_rate_changes_nothing(tiny_source):
    model = _model(tiny_source)
    before = model.fingerprints()
    x, y = _random_task()
    train_stage(model, (x[:16], y[:16]), (x[16:], y[16:]), StageSchedule(0.0, 3), seed=0)
    assert model.fingerprints() == before


def test_early_stopping_with_stub_evaluator(tiny_source):
    model = _model(tiny_source)
    x, y = _random_task()
    sequence = [0.2, 0.5, 0.7, 0.6, 0.7, 0.65, 0.1, 0.9, 0.95]
    snapshots = {}

    def evaluator(m, epoch):
        snapshots[epoch] = m.fingerprints()
        return sequence[epoch - 1]

    schedule = StageSchedule(0.01, len(sequence), patience=3)
    _, hist = train_stage(model, (x[:16], y[:16]), (x[16:], y[16:]), schedule, seed=0, evaluator=evaluator)
    assert hist.best_epoch == 3  # 0.7 at epoch 5 is not strictly better
    assert hist.stopped_epoch == 3 + 3 and hist.stopped_early
    assert hist.best_val_accuracy == 0.7 == max(r.val_acc for r in hist.records)
    assert model.fingerprints() == snapshots[3]


def test_history_invariants_without_patience(tiny_source):
    model = _model(tiny_source)
    x, y = _random_task()
    _, hist = train_stage(model, (x[:16], y[:16]), (x[16:], y[16:]), StageSchedule(0.01, 4), seed=1)
    assert hist.stopped_epoch == 4 and not hist.stopped_early
    assert hist.best_val_accuracy == max(r.val_acc for r in hist.records)
    assert all(r.loss >= 0 and 0 <= r.train_acc <= 1 for r in hist.records)


def test_seeded_reproducibility(tiny_source):
    x, y = _random_task()
    runs = []
    for _ in range(2):
        model = _model(tiny_source)
        _, hist = train_stage(model, (x[:16], y[:16]), (x[16:], y[16:]), StageSchedule(0.01, 3), seed=9)
        runs.append((hist.losses, model.fingerprints()))
    assert runs[0] == runs[1]


def test_empty_trainable_set(tiny_source):
    model = _model(tiny_source)
    for p in model.parameters():
        p.requires_grad_(False)
    x, y = _random_task()
    with pytest.raises(TrainingConfigError):
        train_stage(model, (x, y), (x, y), StageSchedule(0.01, 1), seed=0)


def test_divergence_reports_epoch_and_rate(tiny_source):
    model = _model(tiny_source)
    with torch.no_grad():
        model.head.fc.weight.fill_(float("nan"))
    x, y = _random_task()
    with pytest.raises(DivergenceError) as err:
        train_stage(model, (x[:16], y[:16]), (x[16:], y[16:]), StageSchedule(0.02, 2), seed=0)
    assert err.value.epoch == 1 and err.value.learning_rate == 0.02


def test_history_csv(tmp_path):
    from batterysort.training import EpochRecord

    hist = TrainHistory([EpochRecord(1, 0.5, 0.25, 0.125)], 1, 1, 0.125)
    hist.write_csv(tmp_path / "h.csv", stage=1)
    hist.write_csv(tmp_path / "h.csv", stage=2, append=True)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines == ["stage,epoch,loss,train_acc,val_acc", "1,1,0.500000,0.250000,0.125000", "2,1,0.500000,0.250000,0.125000"]


# ---- two-stage composition


def test_two_stage_nesting(tiny_source):
    model = _model(tiny_source, v_depth=2)
    x, y = _random_task()
    sets = []
    schedules = (StageSchedule(0.01, 1), StageSchedule(0.001, 1, patience=2, extra_unfreeze=2))
    two_stage_train(model, (x[:16], y[:16]), (x[16:], y[16:]), schedules, seed=0,
                    on_stage_end=lambda i, m, h: sets.append({u.name for u in m.units if u.trainable}))
    assert sets[0] <= sets[1]
    assert len(sets[1]) == 3 + 2 + 2


def test_single_schedule_equals_train_stage(tiny_source):
    x, y = _random_task()
    a, b = _model(tiny_source), _model(tiny_source)
    _, hist_a = train_stage(a, (x[:16], y[:16]), (x[16:], y[16:]), StageSchedule(0.01, 2), seed=4)
    _, (hist_b,) = two_stage_train(b, (x[:16], y[:16]), (x[16:], y[16:]), [StageSchedule(0.01, 2)], seed=4)
    assert hist_a.losses == hist_b.losses
    assert a.fingerprints() == b.fingerprints()


def test_no_schedules():
    with pytest.raises(TrainingConfigError):
        two_stage_train(None, None, None, [], seed=0)


def test_two_class_toy_default_schedule():
    images, labels = toy_patches(n_per_class=20, seed=3)
    keep = labels < 2
    x = np.stack([preprocess(im) for im in images[keep]])
    y = labels[keep]
    source = build_model("resnet-mini", 10, seed=0)
    model = _model(source, k=2, v_depth=2)

    # oracle: a least-squares linear probe on pooled features already separates the classes
    with torch.no_grad():
        feats = model.trunk(torch.from_numpy(x.transpose(0, 3, 1, 2))).mean(dim=(2, 3)).numpy()
    design = np.hstack([feats, np.ones((len(feats), 1))])
    w, *_ = np.linalg.lstsq(design, np.where(y == 1, 1.0, -1.0), rcond=None)
    assert ((design @ w > 0) == (y == 1)).all()

    rng = np.random.default_rng(0)
    order = rng.permutation(len(y))
    tr, va = order[:32], order[32:]
    model, hists = two_stage_train(model, (x[tr], y[tr]), (x[va], y[va]), DEFAULT_SCHEDULES, seed=0)
    with torch.no_grad():
        pred = model.logits(torch.from_numpy(x[tr].transpose(0, 3, 1, 2))).argmax(1).numpy()
    assert (pred == y[tr]).mean() >= 0.99
    assert hists[0].stopped_epoch == 300
