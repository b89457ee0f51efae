import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from batterysort.dataset import ClassCatalog
from batterysort.evaluation import Prediction, predict_from_probabilities
from batterysort.sortsim import (
    BinLedger,
    LineConfig,
    StreamError,
    StubClassifier,
    read_stream,
    simulate,
    throughput_report,
    write_event_log,
)

CAT = ClassCatalog(("a", "b", "c"))


def by_label(label, conf=0.95):
    """Classifier stub: the 'image' is the label to predict."""
    k = CAT.classes.index(label) if label in CAT.classes else 0
    p = np.full(3, (1 - conf) / 2)
    p[k] = conf
    return Prediction(tuple(p), label, conf, k)


def _stream(labels):
    return [(f"bat{i}", lab, lab if lab != "others" else None) for i, lab in enumerate(labels)]


def test_three_batteries_routed():
    probs = {"x": [0.9, 0.05, 0.05], "y": [0.1, 0.85, 0.05], "z": [0.5, 0.3, 0.2]}
    line = LineConfig(CAT)
    events, ledger = simulate(line, [("1", "x"), ("2", "y"), ("3", "z")],
                              lambda img: predict_from_probabilities(probs[img], CAT, 0.8))
    assert {e.battery_id: e.assigned_bin for e in events} == {"1": "a", "2": "b", "3": "others"}
    assert ledger.counts == {"a": 1, "b": 1, "c": 0, "others": 1}


def test_empty_stream():
    events, ledger = simulate(LineConfig(CAT), [], by_label)
    assert events == [] and ledger.total == 0 and set(ledger.counts.values()) == {0}


def test_default_line_geometry():
    line = LineConfig(CAT)
    assert line.ejector_positions == (1, 2, 3) and line.belt_length == 4
    assert line.exit_position("others") == 4


@pytest.mark.parametrize("kw", [dict(ejector_positions=(1, 2)), dict(ejector_positions=(2, 2, 3)),
                                dict(ejector_positions=(0, 1, 2)), dict(ejector_positions=(1, 2, 5), belt_length=5)])
def test_line_validation(kw):
    with pytest.raises(ValueError):
        LineConfig(CAT, **kw)


def test_residence_matches_positions():
    line = LineConfig(ClassCatalog(("a", "b")), (2, 4), 6)
    cat2 = line.catalog
    events, _ = simulate(line, [("0", "b")], lambda img: Prediction((0.0, 1.0), img, 1.0, 1))
    assert events[0].residence == 4
    others, _ = simulate(line, [(str(i), "others") for i in range(5)], lambda img: Prediction((), cat2.others_id, 0.0, 0))
    assert all(e.residence == 6 for e in others)


def test_mixed_stream_residence_recomputed():
    line = LineConfig(CAT, (3, 5, 9), 12)
    labels = list(np.random.default_rng(0).choice([*CAT.classes, "others"], 200))
    events, _ = simulate(line, _stream(labels), by_label)
    report = throughput_report(events)
    expected = {"a": 3, "b": 5, "c": 9, "others": 12}
    for bin_name, mean_res in report.mean_residence.items():
        recount = [e.tick_binned - e.tick_classified for e in events if e.assigned_bin == bin_name]
        assert mean_res == np.mean(recount) == expected[bin_name]


def test_throughput_one_per_tick_in_the_limit():
    events, _ = simulate(LineConfig(CAT), _stream(["a"] * 1000), by_label)
    assert throughput_report(events).batteries_per_tick == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ValueError):
        throughput_report([])


def test_duplicate_battery_id():
    with pytest.raises(StreamError):
        simulate(LineConfig(CAT), [("1", "a"), ("1", "b")], by_label)


def test_classifier_failure_routes_to_others():
    def flaky(img):
        if img == "boom":
            raise RuntimeError("camera glitch")
        if img == "bogus":
            return Prediction((), "zzz", 1.0, 0)
        return by_label(img)

    events, ledger = simulate(LineConfig(CAT), [("1", "a"), ("2", "boom"), ("3", "bogus")], flaky)
    failed = {e.battery_id for e in events if e.failed}
    assert failed == {"2", "3"}
    assert all(e.assigned_bin == "others" for e in events if e.failed)
    assert ledger.counts["others"] == 2


def test_purity_against_recount():
    stub = StubClassifier(CAT, accuracy=0.9, threshold=0.0, seed=1)
    truths = list(np.random.default_rng(2).choice(CAT.classes, 100))
    events, ledger = simulate(LineConfig(CAT), [(str(i), t, t) for i, t in enumerate(truths)], stub)
    per_bin = {}
    for e in events:
        hit, n = per_bin.get(e.assigned_bin, (0, 0))
        per_bin[e.assigned_bin] = (hit + (e.true_type == e.assigned_bin), n + 1)
    recount = np.mean([hit / n for hit, n in per_bin.values()])
    assert ledger.mean_purity() == pytest.approx(recount)
    assert abs(ledger.mean_purity() - 0.9) < 0.1


def test_unknown_truth_ignored_by_purity():
    ledger = BinLedger.empty(CAT)
    events, _ = simulate(LineConfig(CAT), [("1", "a"), ("2", "a", "a")], by_label)
    for e in events:
        ledger.add(e)
    assert ledger.counts["a"] == 2 and ledger.purity()["a"] == 1.0
    assert json.loads(ledger.to_json())["total"] == 2


def _check_invariants(line, stream, events, ledger, classifier_labels):
    assert len(events) == len(stream) == ledger.total
    assert sum(ledger.counts.values()) == len(stream)
    assert len({e.battery_id for e in events}) == len(stream)
    entry = {item[0]: i for i, item in enumerate(stream)}
    for e in events:
        assert e.assigned_bin == e.prediction.label == classifier_labels[e.battery_id]
        assert e.tick_classified == entry[e.battery_id]
        assert e.tick_binned > e.tick_classified
        assert e.residence == line.exit_position(e.assigned_bin)
    assert [e.tick_binned for e in events] == sorted(e.tick_binned for e in events)


def test_conservation_and_routing_on_random_streams():
    rng = np.random.default_rng(123)
    labels = np.array([*CAT.classes, "others"])
    for trial in range(10_000):
        n = int(rng.integers(0, 25))
        picks = labels[rng.integers(4, size=n)]
        stream = [(f"{trial}-{i}", lab) for i, lab in enumerate(picks)]
        line = LineConfig(CAT, tuple(np.sort(rng.choice(np.arange(1, 12), 3, replace=False))), 12)
        events, ledger = simulate(line, stream, by_label)
        _check_invariants(line, stream, events, ledger, {b: lab for b, lab in stream})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "others"]), max_size=10_000), st.floats(0, 1))
def test_large_random_streams(labels, threshold):
    stub = StubClassifier(CAT, accuracy=0.7, threshold=threshold, seed=len(labels), confidence=0.6)
    truths = [lab if lab != "others" else "a" for lab in labels]
    stream = [(str(i), t, t) for i, t in enumerate(truths)]
    line = LineConfig(CAT)
    seen = {}

    def recording(img):
        pred = stub(img)
        seen[str(len(seen))] = pred.label
        return pred

    events, ledger = simulate(line, stream, recording)
    _check_invariants(line, stream, events, ledger, seen)
    if threshold > 0.6:
        assert ledger.counts["others"] == len(stream)


def test_determinism():
    stream = _stream(list(np.random.default_rng(5).choice([*CAT.classes, "others"], 300)))
    a = simulate(LineConfig(CAT), stream, by_label)[0]
    b = simulate(LineConfig(CAT), stream, by_label)[0]
    assert a == b


def test_stream_io(tmp_path):
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    for name in ("b1", "b2"):
        Image.new("RGB", (8, 8)).save(img_dir / f"{name}.png")
    (img_dir / "truth.csv").write_text("battery_id,true_type\nb1,a\n")
    assert read_stream(img_dir) == [("b1", img_dir / "b1.png", "a"), ("b2", img_dir / "b2.png", None)]
    csv_path = tmp_path / "stream.csv"
    csv_path.write_text("battery_id,image_path,true_type\nx,imgs/b1.png,c\ny,imgs/b2.png,\n")
    assert read_stream(csv_path) == [("x", tmp_path / "imgs/b1.png", "c"), ("y", tmp_path / "imgs/b2.png", None)]

    events, _ = simulate(LineConfig(CAT), _stream(["a", "others"]), by_label)
    write_event_log(events, tmp_path / "events.csv")
    rows = (tmp_path / "events.csv").read_text().splitlines()
    assert rows[0] == "battery_id,true_type,predicted,confidence,bin,tick_classified,tick_binned,failed"
    assert rows[1].startswith("bat0,a,a,0.950000,a,0,1,0")


def test_ten_thousand_battery_stream():
    labels = list(np.random.default_rng(9).choice([*CAT.classes, "others"], 10_000))
    stream = _stream(labels)
    line = LineConfig(CAT, (2, 5, 7), 9)
    events, ledger = simulate(line, stream, by_label)
    _check_invariants(line, stream, events, ledger, {b: lab for b, lab, _ in stream})
