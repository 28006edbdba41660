from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpsc.conformal import (
    ConformalState,
    calibrate,
    coverage_audit,
    nonconformity,
    prediction_set,
    quantile_rank,
    rank_reliability,
    rank_reliability_batch,
)
from cpsc.errors import CalibrationError, DimensionError


def brute_quantile(scores, alpha):
    """Order statistic at ceil((n+1)(1-alpha)) with the rank in exact rational arithmetic."""
    n = len(scores)
    prod = (n + 1) * (1 - Fraction(str(alpha)))
    k = -((-prod.numerator) // prod.denominator)
    if k > n:
        return 1.0
    return sorted(scores)[max(k, 1) - 1]


def brute_reliability(probs, q_hat, target):
    members = []
    for c in range(len(probs)):
        s = 1.0 - probs[c]
        if s <= q_hat:
            members.append((s, c))
    members.sort()
    for pos, (_, c) in enumerate(members):
        if c == target:
            return 1.0 - (pos + 1) / len(members)
    return 0.0


def test_nonconformity_cases():
    assert nonconformity([0.7, 0.2, 0.1], 0) == pytest.approx(0.3)
    assert nonconformity([0.0, 1.0], 1) == 0.0
    assert nonconformity(np.full(4, 0.25), 3) == 0.75
    with pytest.raises(IndexError):
        nonconformity([0.5, 0.5], 5)


def test_calibrate_hand_cases():
    assert calibrate([0.1, 0.2, 0.3, 0.4], 0.2) == 0.4
    assert calibrate([0.5], 0.5) == 0.5
    assert calibrate([0.3] * 10, 0.1) == 0.3


def test_calibrate_rank_beyond_n_gives_one():
    assert quantile_rank(5, 0.1) == 6
    assert calibrate([0.1, 0.2, 0.3, 0.4, 0.5], 0.1) == 1.0


def test_rank_tolerance_exact_integers():
    # 10 * 0.7 is 7.000000000000001 in binary floating point
    assert quantile_rank(9, 0.3) == 7
    assert calibrate(np.arange(9) / 10, 0.3) == 0.6


def test_rank_snaps_within_tolerance():
    # (2+1)(1 - 0.3333333333333333) lies 1e-16 above 2; it is read as the integer 2
    assert quantile_rank(2, 0.3333333333333333) == 2
    assert quantile_rank(2, 0.333) == 3


def test_calibrate_errors():
    with pytest.raises(CalibrationError):
        calibrate([], 0.1)
    with pytest.raises(CalibrationError):
        calibrate([0.1], 0.0)
    with pytest.raises(CalibrationError):
        calibrate([0.1], 1.0)


decimal_alpha = st.integers(1, 9999).map(lambda i: i / 10000)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), decimal_alpha, st.randoms())
def test_calibrate_matches_oracle_and_is_permutation_invariant(scores, alpha, rnd):
    assert calibrate(scores, alpha) == brute_quantile(scores, alpha)
    shuffled = list(scores)
    rnd.shuffle(shuffled)
    assert calibrate(shuffled, alpha) == calibrate(scores, alpha)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_quantile_monotone_in_confidence(scores, alpha, delta):
    lo = min(alpha + delta, 0.99)
    assert calibrate(scores, lo) <= calibrate(scores, alpha)


def test_state_from_scores():
    st_ = ConformalState.from_scores([0.4, 0.1, 0.3, 0.2], 0.2, version=3)
    assert st_.q_hat == 0.4 and st_.version == 3 and st_.cal_scores.shape == (4,)


def test_prediction_set_cases():
    ps = prediction_set([0.7, 0.2, 0.1], 0.5)
    assert ps.labels == [0]
    assert [s for _, s in ps.members] == pytest.approx([0.3])
    assert prediction_set([0.7, 0.2, 0.1], 1.0).labels == [0, 1, 2]
    assert len(prediction_set([0.7, 0.2, 0.1], 0.0)) == 0


def test_prediction_set_tie_break_by_index():
    assert prediction_set([0.25, 0.25, 0.25, 0.25], 1.0).labels == [0, 1, 2, 3]
    assert prediction_set([0.1, 0.45, 0.45], 1.0).labels == [1, 2, 0]


@given(st.lists(st.floats(0.001, 1), min_size=2, max_size=8), st.floats(0, 1), st.floats(0, 1))
def test_prediction_sets_nested(w, q1, q2):
    probs = np.array(w) / np.sum(w)
    lo, hi = sorted((q1, q2))
    assert set(prediction_set(probs, lo).labels) <= set(prediction_set(probs, hi).labels)
    members = prediction_set(probs, hi).members
    assert all(s <= hi for _, s in members)
    assert members == sorted(members, key=lambda m: (m[1], m[0]))


def test_rank_reliability_cases():
    # target ranked first of three
    assert rank_reliability([0.5, 0.3, 0.2], 1.0, 0) == pytest.approx(2 / 3)
    assert rank_reliability([0.7, 0.2, 0.1], 0.5, 1) == 0.0
    assert rank_reliability([0.5, 0.3, 0.2], 1.0, 2) == 0.0
    assert rank_reliability([0.5, 0.5], 0.0, 0) == 0.0


def test_rank_reliability_four_element_set():
    assert rank_reliability([0.4, 0.3, 0.2, 0.1], 1.0, 0) == 0.75


@given(st.lists(st.floats(0.001, 1), min_size=2, max_size=8), st.floats(0, 1), st.data())
def test_rank_reliability_invariant_to_excluded_classes(w, q, data):
    probs = np.array(w) / np.sum(w)
    target = data.draw(st.integers(0, len(w) - 1))
    base = rank_reliability(probs, q, target)
    # extra classes with probability 0 have score 1; they stay out of any set with q < 1
    if q < 1:
        ext = np.concatenate([probs, np.zeros(3)])
        assert rank_reliability(ext, q, target) == base
    assert rank_reliability_batch(probs, q, target) == base


def test_rank_reliability_batch_broadcast(rng):
    probs = rng.dirichlet(np.ones(4), size=(5, 3))
    targets = rng.integers(4, size=5)
    out = rank_reliability_batch(probs, 0.8, targets[:, None])
    for b in range(5):
        for k in range(3):
            assert out[b, k] == brute_reliability(probs[b, k], 0.8, targets[b])


def test_coverage_audit_cases(rng):
    probs = rng.dirichlet(np.ones(5), size=20)
    labels = rng.integers(5, size=20)
    assert coverage_audit(probs, labels, 1.0) == (1.0, 5.0)
    assert coverage_audit(probs, labels, -0.1) == (0.0, 0.0)
    with pytest.raises(DimensionError):
        coverage_audit(probs, labels[:3], 0.5)


def test_mean_coverage_on_exchangeable_scores():
    # expected coverage is ceil(501 * 0.9) / 501 for continuous scores; the spread of a
    # single audit (calibration plus test sampling) is about 0.022 here
    covs = []
    for r in range(300):
        rng = np.random.default_rng([78, r])
        probs = rng.dirichlet(np.full(4, 0.5), size=700)
        labels = (rng.random((700, 1)) > np.cumsum(probs, axis=1)).sum(axis=1)
        q = calibrate(1 - probs[np.arange(500), labels[:500]], 0.1)
        covs.append(coverage_audit(probs[500:], labels[500:], q)[0])
    se = np.std(covs) / np.sqrt(len(covs))
    assert abs(np.mean(covs) - 451 / 501) < 4 * se
