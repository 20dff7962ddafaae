import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structreg import metrics


def test_error_rate_examples():
    pred = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
    assert metrics.error_rate(pred, [0, 1, 0]) == 0.0
    assert metrics.error_rate(pred, [1, 0, 1]) == 1.0
    # tie goes to the lowest class index
    assert metrics.error_rate(pred[2:], [0]) == 0.0
    assert metrics.error_rate(pred, np.eye(2)[[0, 1, 0]]) == 0.0
    with pytest.raises(metrics.UndefinedMetricError):
        metrics.error_rate(np.zeros((0, 2)), [])


def test_label_quality_examples():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    q, saturated = metrics.label_quality(y, y)
    assert q == 1e8 and saturated
    shifted = y + np.array([[0.3, 0.4], [0.0, -0.5]])  # row distances 0.5 and 0.5
    q, saturated = metrics.label_quality(shifted, y)
    assert q == pytest.approx(2.0, abs=1e-12) and not saturated
    far = y + 2 * (shifted - y)
    assert metrics.label_quality(far, y)[0] == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        metrics.label_quality(y, y[:1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_label_quality_invariant_to_joint_permutation(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((12, 3)), rng.random((12, 3))
    perm = rng.permutation(12)
    assert metrics.label_quality(a[perm], b[perm])[0] == pytest.approx(metrics.label_quality(a, b)[0], rel=1e-12)


def test_entropy_examples():
    assert metrics.mean_entropy(np.full((3, 10), 0.1)) == pytest.approx(np.log(10), abs=1e-12)
    assert metrics.mean_entropy(np.eye(4)) == 0.0
    assert metrics.mean_entropy([[0.5, 0.5]]) == pytest.approx(np.log(2), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=6))
def test_entropy_bounded_by_uniform(weights):
    p = np.array(weights) / np.sum(weights)
    h = metrics.mean_entropy(p[None, :])
    assert -1e-12 <= h <= np.log(len(p)) + 1e-12


def test_inter_pair_distance_examples():
    X = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert metrics.inter_pair_distance(X, sample_pairs=50) == pytest.approx(5.0, abs=1e-12)
    assert metrics.max_pair_distance(X) == 5.0
    with pytest.raises(metrics.UndefinedMetricError):
        metrics.inter_pair_distance(X[:1])


def test_monte_carlo_distance_close_to_exhaustive():
    X = np.random.default_rng(0).uniform(-1, 1, size=(400, 2))
    exact = metrics.inter_pair_distance(X, exhaustive=True)
    sampled = metrics.inter_pair_distance(X, sample_pairs=100_000, seed=1)
    assert abs(sampled - exact) / exact < 0.01


def test_eps_percent():
    assert round(metrics.eps_percent(10.0, 36.0), 1) == 27.8
    assert metrics.eps_percent(0.0, 3.0) == 0.0
    assert np.isnan(metrics.eps_percent(1.0, 0.0))
