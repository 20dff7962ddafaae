"""Diagnostics: error rate, synthetic label quality, prediction entropy, pair distances."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

QUALITY_FLOOR = 1e-8


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MetricsRecord:
    step: int
    error_rate: float
    mean_entropy: float
    label_quality: float
    epsilon: float
    eps_pct: float

    def as_dict(self) -> dict:
        return asdict(self)


def _class_ids(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.argmax(axis=1)
    return labels.astype(np.int64)


def error_rate(pred, labels) -> float:
    """Fraction of rows whose argmax (ties -> lowest index) misses the true class."""
    pred = np.asarray(pred)
    if pred.shape[0] == 0:
        raise UndefinedMetricError("error rate of an empty set is undefined")
    return float(np.mean(pred.argmax(axis=1) != _class_ids(labels)))


def label_quality(y_tilde, y_oracle) -> tuple[float, bool]:
    """Inverse mean L2 distance between synthetic and oracle rows.

    Returns ``(Q, saturated)``; ``saturated`` is True when the mean distance
    fell below 1e-8 and Q was capped at 1e8.
    """
    y_tilde = np.asarray(y_tilde, dtype=np.float64)
    y_oracle = np.asarray(y_oracle, dtype=np.float64)
    if y_tilde.shape != y_oracle.shape:
        raise ValueError(f"label quality: shapes {y_tilde.shape} and {y_oracle.shape} differ")
    if y_tilde.shape[0] == 0:
        raise UndefinedMetricError("label quality of an empty batch is undefined")
    mean_dist = float(np.mean(np.sqrt(((y_tilde - y_oracle) ** 2).sum(axis=1))))
    saturated = mean_dist < QUALITY_FLOOR
    return 1.0 / max(mean_dist, QUALITY_FLOOR), saturated


def mean_entropy(pred) -> float:
    p = np.asarray(pred, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return float(np.mean(-(p * logp).sum(axis=1)))


def inter_pair_distance(X, sample_pairs: int = 100_000, seed: int = 0, exhaustive: bool = False) -> float:
    """Average Euclidean distance between two distinct rows.

    Monte Carlo over uniformly drawn ordered pairs (i != j) by default; the
    exhaustive form averages over every unordered pair.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise UndefinedMetricError("need at least two rows for a pair distance")
    if sample_pairs < 1:
        raise ValueError("sample_pairs must be >= 1")
    if exhaustive:
        i, j = np.triu_indices(n, k=1)
        return float(np.mean(np.sqrt(((X[i] - X[j]) ** 2).sum(axis=1))))
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=sample_pairs)
    j = (i + rng.integers(1, n, size=sample_pairs)) % n
    total = 0.0
    for lo in range(0, sample_pairs, 20_000):
        a, b = X[i[lo:lo + 20_000]], X[j[lo:lo + 20_000]]
        total += np.sqrt(((a - b) ** 2).sum(axis=1)).sum()
    return float(total / sample_pairs)


def max_pair_distance(X, sample_pairs: int = 100_000, seed: int = 0) -> float:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise UndefinedMetricError("need at least two rows for a pair distance")
    if n * (n - 1) // 2 <= sample_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=sample_pairs)
        j = (i + rng.integers(1, n, size=sample_pairs)) % n
    return float(np.sqrt(((X[i] - X[j]) ** 2).sum(axis=1)).max())


def eps_percent(epsilon: float, mean_distance: float) -> float:
    """Epsilon as a percentage of the average pair distance; NaN when that is 0."""
    if mean_distance <= 0:
        return float("nan")
    return 100.0 * epsilon / mean_distance
