import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import auprc_bruteforce, auprc_exact, dice_bruteforce
from sklearn.metrics import average_precision_score

from mcddpm.evaluation import (
    NOT_APPLICABLE,
    REPORT_COLUMNS,
    EvalReport,
    UndefinedMetricError,
    auprc,
    dice,
    reconstruction_error,
    score_volume,
    summarize,
)


def random_instance(rng):
    n = int(rng.integers(1, 1001))
    # coarse scores force plenty of ties
    levels = int(rng.integers(1, 20))
    scores = rng.integers(0, levels, n) / levels
    truth = rng.random(n) < rng.uniform(0.02, 0.6)
    if not truth.any():
        truth[rng.integers(n)] = True
    return scores, truth


def test_dice_examples():
    a = np.array([1, 1, 0, 1, 0, 0])
    assert dice(a, a) == 1.0
    assert dice(a, 1 - a) == 0.0
    p = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    t = np.array([1, 1, 0, 0, 1, 1, 0, 0])
    assert dice(p, t) == 0.5


def test_dice_empty_conventions():
    z = np.zeros(5)
    assert dice(z, z) == 1.0
    assert dice(z, np.eye(1, 5)[0]) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros(3), np.zeros(4))


def test_dice_matches_bruteforce_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        p, t = rng.random(n) < rng.random(), rng.random(n) < rng.random()
        assert dice(p, t) == dice_bruteforce(p, t)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(50) < 0.3, rng.random(50) < 0.3
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_auprc_perfect_ranking():
    assert auprc(np.array([0.9, 0.8, 0.1, 0.0]), np.array([1, 1, 0, 0])) == 1.0


def test_auprc_six_voxel_example():
    scores = np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
    truth = np.array([1, 1, 0, 1, 0, 0])
    # steps at recall 1/3, 2/3, 1 with precision 1, 1, 3/4
    assert auprc(scores, truth) == auprc_bruteforce(scores, truth)
    assert auprc(scores, truth) == pytest.approx(11 / 12, rel=1e-15)


@pytest.mark.parametrize("prevalence", [0.01, 0.04, 0.3])
def test_auprc_constant_scores_equals_prevalence(prevalence):
    n = 1000
    truth = np.arange(n) < prevalence * n
    value = auprc(np.full(n, 0.5), truth)
    assert value == auprc_bruteforce(np.full(n, 0.5), truth)
    assert value == pytest.approx(prevalence, rel=1e-15)


def test_auprc_matches_bruteforce_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        scores, truth = random_instance(rng)
        assert auprc(scores, truth) == auprc_bruteforce(scores, truth)


def test_auprc_close_to_exact_rational():
    rng = np.random.default_rng(2)
    for _ in range(100):
        scores, truth = random_instance(rng)
        assert math.isclose(auprc(scores, truth), float(auprc_exact(scores, truth)), rel_tol=1e-14)


def test_auprc_agrees_with_sklearn():
    rng = np.random.default_rng(3)
    for _ in range(50):
        scores, truth = random_instance(rng)
        assert auprc(scores, truth) == pytest.approx(average_precision_score(truth, scores), abs=1e-12)


def test_auprc_needs_positives():
    with pytest.raises(UndefinedMetricError):
        auprc(np.arange(4.0), np.zeros(4))


def test_auprc_mask_restricts_voxels():
    scores = np.array([0.9, 0.1, 0.8, 0.7])
    truth = np.array([0, 1, 1, 0])
    mask = np.array([0, 1, 1, 1])
    assert auprc(scores, truth, mask) == auprc(scores[1:], truth[1:])


def test_random_mask_baseline_near_prevalence():
    rng = np.random.default_rng(4)
    n, prevalence = 200_000, 0.04
    truth = np.zeros(n, bool)
    truth[: int(prevalence * n)] = True
    values = [dice(rng.random(n) < prevalence, truth) for _ in range(100)]
    assert abs(np.mean(values) - prevalence) < 0.004
    assert np.std(values) < 0.005


def test_reconstruction_error_examples():
    rng = np.random.default_rng(5)
    v = rng.random((6, 6, 4))
    v[:2] = 0
    assert reconstruction_error(v, v) == 0.0
    shifted = np.where(v > 0, v + 0.01, v)
    assert reconstruction_error(v, shifted) == pytest.approx(0.01, abs=1e-12)
    vh = rng.random(v.shape)
    brain = [abs(a - b) for a, b in zip(v.ravel(), vh.ravel()) if a > 0]
    assert reconstruction_error(v, vh) == pytest.approx(sum(brain) / len(brain), abs=1e-12)
    with pytest.raises(ValueError):
        reconstruction_error(v, vh[:5])


def make_case(rng, anomaly):
    v = np.zeros((16, 16, 12))
    v[1:15, 1:15, 1:11] = 0.3 + 0.1 * rng.random((14, 14, 10))
    gt = np.zeros(v.shape, np.uint8)
    if anomaly:
        gt[6:11, 6:11, 4:8] = 1
    recon = np.where(gt > 0, v - 0.6, v - 0.02 * (v > 0))
    return v, recon, gt


def test_summarize_on_synthetic_volumes():
    rng = np.random.default_rng(6)
    vols, recons, scored = [], [], []
    for anomaly in (True, True, False):
        v, r, gt = make_case(rng, anomaly)
        vols.append(v)
        recons.append(r)
        scored.append(score_volume("s", v, (v - r) ** 2, gt, 0.2, kernel=1, iterations=1))
    out = summarize(vols, recons, scored)
    assert out["dice_pooled"] == 100.0 and out["auprc"] == 100.0
    assert out["recon_error"] == pytest.approx(0.02, abs=1e-12)
    assert 0 <= out["dice_mean"] <= 100


def test_summarize_healthy_only_is_not_applicable():
    rng = np.random.default_rng(7)
    v, r, _ = make_case(rng, False)
    out = summarize([v], [r], [score_volume("h", v, (v - r) ** 2, None, 0.2)])
    assert out["dice_pooled"] == out["auprc"] == out["dice_mean"] == NOT_APPLICABLE
    assert out["recon_error"] == pytest.approx(0.02)


def test_report_columns_and_csv(tmp_path):
    report = EvalReport()
    report.add(dataset="phantom", dice_pooled=50.0, dice_mean=48.0, auprc=60.0, recon_error=0.01,
               theta=0.2, p=2, checkpoint="best.ckpt")
    report.add(dataset="healthy", dice_pooled=NOT_APPLICABLE, dice_mean=NOT_APPLICABLE,
               auprc=NOT_APPLICABLE, recon_error=0.02, theta=0.2, p=2, checkpoint="best.ckpt")
    report.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert len(rows) == 3
    assert rows[2][1] == NOT_APPLICABLE
    table = report.to_table()
    assert table.splitlines()[0].split() == list(REPORT_COLUMNS)
