import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from batterysort.dataset import ClassCatalog
from batterysort.evaluation import (
    RunReport,
    ScoreResult,
    ScoringError,
    UndefinedMetricError,
    aggregate,
    improvement,
    predict_from_probabilities,
    rejected_mask,
    score,
    score_probabilities,
    write_confusion_csv,
)

CAT3 = ClassCatalog(("a", "b", "c"))


def test_confident_prediction():
    p = predict_from_probabilities([0.04, 0.91, 0.05], CAT3, 0.80)
    assert (p.label, p.confidence, p.index) == ("b", 0.91, 1)


def test_low_confidence_is_others():
    p = predict_from_probabilities([0.5, 0.3, 0.2], CAT3, 0.80)
    assert p.label == "others" and p.confidence == 0.5 and p.index == 0


def test_threshold_exactly_at_confidence_accepts():
    assert predict_from_probabilities([0.8, 0.1, 0.1], CAT3, 0.80).label == "a"


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_zero_threshold_never_rejects(raw):
    p = np.asarray(raw) + 1e-9
    pred = predict_from_probabilities(p / p.sum(), CAT3, 0.0)
    assert pred.label != "others"


def test_tie_break_lowest_index():
    assert predict_from_probabilities([0.4, 0.4, 0.2], CAT3, 0.0).label == "a"
    assert predict_from_probabilities([0.2, 0.4, 0.4], CAT3, 0.0).label == "b"
    assert predict_from_probabilities(np.full(3, 1 / 3), CAT3, 0.0).label == "a"


@pytest.mark.parametrize("t", [-0.1, 1.1])
def test_threshold_range(t):
    with pytest.raises(ValueError):
        predict_from_probabilities([1, 0, 0], CAT3, t)


def test_rejection_monotone_over_random_vectors():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(9), size=1000)
    thresholds = np.linspace(0, 1, 51)
    cat = ClassCatalog.from_names([f"t{i}" for i in range(9)])
    prev_mask = np.zeros(1000, bool)
    prev_count = 0
    for t in thresholds:
        mask = np.array([predict_from_probabilities(p, cat, t).label == "others" for p in probs])
        assert (mask >= prev_mask).all()  # never rejected -> accepted
        assert mask.sum() >= prev_count
        np.testing.assert_array_equal(mask, rejected_mask(probs, t))
        prev_mask, prev_count = mask, mask.sum()
    assert prev_count == 1000


# ---- scoring


def test_all_correct():
    probs = np.eye(3)[[0, 1, 2, 1]]
    res = score_probabilities(probs, np.array([0, 1, 2, 1]), 0.8)
    assert res.accuracy == 1.0
    np.testing.assert_array_equal(res.confusion, np.diag([1, 2, 1]))


def test_half_correct_and_threshold_independent():
    labels = np.arange(10) % 2
    pred = np.r_[labels[:5], 1 - labels[5:]]
    probs = np.full((10, 2), 0.45)
    probs[np.arange(10), pred] = 0.55
    res = score(lambda imgs: probs, (np.zeros(10), labels), threshold=0.8)
    assert res.accuracy == 0.5
    assert res.rejected_known == 10  # every max is 0.55 < 0.8
    assert res.confusion.sum(axis=1).tolist() == np.bincount(labels).tolist()


def test_others_pool_counts_only_rejection():
    probs = np.eye(3)
    others = np.array([[0.5, 0.3, 0.2], [0.9, 0.05, 0.05]])
    res = score_probabilities(probs, np.arange(3), 0.8, others)
    assert res.accuracy == 1.0 and res.n_others == 2 and res.rejected_others == 1
    assert res.rejection_rate_others == 0.5


def test_empty_test_set():
    with pytest.raises(ScoringError):
        score(lambda x: np.zeros((0, 3)), (np.zeros(0), np.zeros(0)))


def test_uniform_random_predictor_monte_carlo():
    rng = np.random.default_rng(7)
    n = 9 * 2000
    labels = np.repeat(np.arange(9), n // 9)

    def stub(images):
        p = np.zeros((len(images), 9))
        p[np.arange(len(images)), rng.integers(9, size=len(images))] = 1
        return p

    acc = score(stub, (np.zeros(n), labels)).accuracy
    sigma = np.sqrt((1 / 9) * (8 / 9) / n)
    assert abs(acc - 1 / 9) < 4 * sigma


def test_score_result_roundtrip():
    res = score_probabilities(np.eye(3), np.arange(3), 0.5)
    assert ScoreResult.from_dict(res.to_dict()).to_dict() == res.to_dict()


# ---- aggregation


def test_improvement_anchors():
    assert improvement(0.921, 0.304) == pytest.approx(2.03, abs=0.005)
    assert improvement(0.831, 0.304) == pytest.approx(1.73, abs=0.005)
    with pytest.raises(UndefinedMetricError):
        improvement(0.5, 0.0)


def test_gap_anchor():
    assert aggregate([0.831], reference_mean=0.921).gap_points == pytest.approx(9.0, abs=0.05)


def test_sd_consistency():
    same = aggregate([0.7] * 5)
    assert same.sd == 0 and same.mean == pytest.approx(0.7) and same.best == 0.7
    two = aggregate([0.0, 1.0])
    assert (two.mean, two.sd, two.best) == (0.5, 0.5, 1.0)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_aggregate_matches_definitions(accs):
    rep = aggregate(accs)
    assert rep.mean == pytest.approx(sum(accs) / len(accs))
    assert rep.best == max(accs)
    mean = sum(accs) / len(accs)
    assert rep.sd == pytest.approx((sum((a - mean) ** 2 for a in accs) / len(accs)) ** 0.5, abs=1e-12)


def test_aggregate_scores_carries_rates():
    a = score_probabilities(np.eye(2), np.arange(2), 0.5, np.array([[0.5, 0.5]]))
    b = score_probabilities(np.array([[0.6, 0.4], [0.3, 0.7]]), np.array([1, 1]), 0.65, np.array([[0.6, 0.4]]))
    rep = aggregate([a, b], baseline_mean=0.25)
    assert rep.per_run_accuracy == [1.0, 0.5]
    assert rep.improvement == pytest.approx((0.75 - 0.25) / 0.25)
    assert rep.rejection_rate_known == pytest.approx((0 + 0.5) / 2)
    assert rep.rejection_rate_others == pytest.approx(0.5)
    assert len(rep.confusion) == 2
    assert RunReport.from_json(rep.to_json()) == rep


def test_aggregate_requires_runs():
    with pytest.raises(ScoringError):
        aggregate([])


def test_confusion_csv(tmp_path):
    write_confusion_csv(np.array([[2, 0, 0], [1, 1, 0], [0, 0, 3]]), CAT3, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == ["true\\predicted,a,b,c", "a,2,0,0", "b,1,1,0", "c,0,0,3"]
