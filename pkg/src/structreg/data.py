"""Datasets, label masking, synthetic generators, rescaling, augmentation, batching."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DegenerateRangeError(ValueError):
    pass


class UnsupportedAugmentationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature rows plus per-row class distributions.

    ``labels`` is N x C; a row of NaN marks a label that is missing at the
    source. ``scale`` holds the affine map ``x -> a*x + b`` applied by
    :func:`rescale_features` so test data can reuse training parameters.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_shape: tuple[int, int, int] | None = None
    name: str = "dataset"
    scale: tuple[float, float] | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.asarray(self.labels, dtype=np.float64)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        n, d = x.shape
        if n < 1 or d < 1:
            raise ValueError(f"dataset needs N>=1 and d>=1, got {x.shape}")
        if self.class_count < 2:
            raise ValueError(f"dataset needs at least 2 classes, got {self.class_count}")
        if y.shape != (n, self.class_count):
            raise ValueError(f"labels shape {y.shape} does not match ({n}, {self.class_count})")
        present = self.has_label
        if present.any():
            rows = y[present]
            if (rows < 0).any() or np.abs(rows.sum(axis=1) - 1.0).max() > 1e-9:
                raise ValueError("present labels must be probability vectors")
        if self.feature_shape is not None and int(np.prod(self.feature_shape)) != d:
            raise ValueError(f"feature_shape {self.feature_shape} does not hold {d} features")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_label(self) -> np.ndarray:
        return ~np.isnan(self.labels).any(axis=1)

    @property
    def class_ids(self) -> np.ndarray:
        """Argmax class per row, -1 where the label is missing."""
        ids = np.full(len(self), -1, dtype=np.int64)
        present = self.has_label
        ids[present] = self.labels[present].argmax(axis=1)
        return ids

    def subset(self, index) -> "Dataset":
        return replace(self, features=self.features[index], labels=self.labels[index])


def one_hot(class_ids, class_count: int) -> np.ndarray:
    """One-hot rows; negative ids become all-NaN (missing) rows."""
    ids = np.asarray(class_ids, dtype=np.int64)
    out = np.zeros((ids.size, class_count))
    known = ids >= 0
    out[np.flatnonzero(known), ids[known]] = 1.0
    out[~known] = np.nan
    return out


@dataclass(frozen=True)
class SemiSplit:
    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    seed: int

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_indices)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled_indices)


@dataclass
class SemiBatch:
    labeled_features: np.ndarray
    labeled_targets: np.ndarray
    unlabeled_features: np.ndarray
    labeled_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unlabeled_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def m_labeled(self) -> int:
        return self.labeled_features.shape[0]

    @property
    def m_unlabeled(self) -> int:
        return self.unlabeled_features.shape[0]


# -- label masking ------------------------------------------------------------

def mask_labels(ds: Dataset, n_labeled: int, seed: int) -> SemiSplit:
    """Keep ``n_labeled`` labels, spread over classes as evenly as possible.

    Rows unlabeled at the source are always in the unlabeled pool. Classes
    that receive an extra label (when ``n_labeled`` is not a multiple of C)
    are chosen at random.
    """
    n = len(ds)
    if n_labeled > n:
        raise ValueError(f"n_labeled={n_labeled} exceeds dataset size {n}")
    if n_labeled < 0:
        raise ValueError("n_labeled must be non-negative")
    if n_labeled < ds.class_count:
        warnings.warn(
            f"n_labeled={n_labeled} is below the class count {ds.class_count}",
            stacklevel=2,
        )
    rng = np.random.default_rng(seed)
    ids = ds.class_ids
    by_class = [np.flatnonzero(ids == c) for c in range(ds.class_count)]
    base, extra = divmod(n_labeled, ds.class_count)
    quota = np.full(ds.class_count, base)
    quota[rng.permutation(ds.class_count)[:extra]] += 1
    if any(q > len(pool) for q, pool in zip(quota, by_class)):
        raise ValueError("not enough labeled rows per class to honour a balanced split")
    chosen = [rng.permutation(pool)[:q] for pool, q in zip(by_class, quota)]
    labeled = np.sort(np.concatenate(chosen)).astype(np.int64)
    unlabeled = np.setdiff1d(np.arange(n), labeled).astype(np.int64)
    return SemiSplit(labeled, unlabeled, seed)


def split_validation(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    """Carve a fully labeled validation slice off ``ds``; returns (train, val)."""
    if fraction <= 0:
        return ds, None
    rng = np.random.default_rng(seed)
    pool = np.flatnonzero(ds.has_label)
    n_val = max(1, int(round(fraction * len(pool))))
    val_idx = np.sort(rng.permutation(pool)[:n_val])
    keep = np.setdiff1d(np.arange(len(ds)), val_idx)
    return ds.subset(keep), ds.subset(val_idx)


# -- synthetic datasets -------------------------------------------------------

def gen_two_moons(n: int, noise_sd: float, seed: int) -> Dataset:
    """Two interleaving half circles; class 0 on top, class 1 below, shifted."""
    if n < 2:
        raise ValueError("two moons needs n >= 2")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    if noise_sd > 0:
        x = x + rng.normal(0.0, noise_sd, size=x.shape)
    ids = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(x[order], one_hot(ids[order], 2), 2, name="two_moons")


def gen_blobs(n: int, class_count: int, centers, sd: float, seed: int) -> Dataset:
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] != class_count:
        raise ValueError(f"need {class_count} centers, got array of shape {centers.shape}")
    if sd < 0:
        raise ValueError("sd must be non-negative")
    rng = np.random.default_rng(seed)
    ids = np.arange(n) % class_count
    x = centers[ids] + rng.normal(0.0, sd, size=(n, centers.shape[1]))
    order = rng.permutation(n)
    return Dataset(x[order], one_hot(ids[order], class_count), class_count, name="blobs")


# -- preprocessing ------------------------------------------------------------

def rescale_features(ds: Dataset, lo: float = -1.0, hi: float = 1.0, like: Dataset | None = None) -> Dataset:
    """Global min-max map of all features onto [lo, hi].

    With ``like`` given, reuse that dataset's stored map instead of fitting a
    new one (no clipping, so out-of-range test values stay out of range).
    """
    if like is not None:
        if like.scale is None:
            raise ValueError("reference dataset carries no stored scale")
        a, b = like.scale
    else:
        if not hi > lo:
            raise ValueError(f"need hi > lo, got [{lo}, {hi}]")
        fmin, fmax = float(ds.features.min()), float(ds.features.max())
        if fmax == fmin:
            raise DegenerateRangeError(f"features are constant ({fmin}); cannot rescale")
        a = (hi - lo) / (fmax - fmin)
        b = lo - a * fmin
    return replace(ds, features=a * ds.features + b, scale=(a, b))


def reflect_pad(img: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")


def augment_weak(x: np.ndarray, feature_shape, rng: np.random.Generator, flip: bool = True, pad: int = 2) -> np.ndarray:
    """Random horizontal flip then reflect-pad and random crop of one flattened image."""
    if feature_shape is None:
        raise UnsupportedAugmentationError("weak augmentation needs image-shaped features")
    h, w, c = feature_shape
    img = np.asarray(x).reshape(h, w, c)
    if flip and rng.random() < 0.5:
        img = img[:, ::-1, :]
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    return crop(reflect_pad(img, pad), oy, ox, h, w).reshape(-1)


def crop(img: np.ndarray, oy: int, ox: int, h: int, w: int) -> np.ndarray:
    return img[oy:oy + h, ox:ox + w, :]


def augment_rows(x: np.ndarray, feature_shape, rng, flip: bool = True) -> np.ndarray:
    return np.stack([augment_weak(row, feature_shape, rng, flip=flip) for row in x]) if len(x) else x.copy()


# -- batching -----------------------------------------------------------------

class EpochSampler:
    """Draw from a pool in reshuffled passes; wraps mid-batch when the pool is small."""

    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool = np.asarray(pool, dtype=np.int64)
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def draw(self, k: int) -> np.ndarray:
        if k == 0:
            return np.zeros(0, dtype=np.int64)
        if len(self.pool) == 0:
            raise ValueError("cannot draw rows from an empty pool")
        out = []
        need = k
        while need > 0:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.pool)
                self._pos = 0
            take = min(need, len(self._order) - self._pos)
            out.append(self._order[self._pos:self._pos + take])
            self._pos += take
            need -= take
        return np.concatenate(out)

    def state(self) -> dict:
        return {"order": self._order.tolist(), "pos": self._pos}

    def load_state(self, state: dict):
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._pos = int(state["pos"])


class BatchSampler:
    def __init__(self, ds: Dataset, split: SemiSplit, m_labeled: int, m_unlabeled: int, rng: np.random.Generator):
        if m_labeled > 0 and split.n_labeled == 0:
            raise ValueError("m_labeled > 0 but the labeled pool is empty")
        if m_unlabeled > 0 and split.n_unlabeled == 0:
            raise ValueError("m_unlabeled > 0 but the unlabeled pool is empty")
        self.ds = ds
        self.m_labeled = m_labeled
        self.m_unlabeled = m_unlabeled
        self.labeled = EpochSampler(split.labeled_indices, rng)
        self.unlabeled = EpochSampler(split.unlabeled_indices, rng)

    def next(self) -> SemiBatch:
        li = self.labeled.draw(self.m_labeled)
        ui = self.unlabeled.draw(self.m_unlabeled)
        return SemiBatch(
            labeled_features=self.ds.features[li],
            labeled_targets=self.ds.labels[li],
            unlabeled_features=self.ds.features[ui],
            labeled_index=li,
            unlabeled_index=ui,
        )

    def state(self) -> dict:
        return {"labeled": self.labeled.state(), "unlabeled": self.unlabeled.state()}

    def load_state(self, state: dict):
        self.labeled.load_state(state["labeled"])
        self.unlabeled.load_state(state["unlabeled"])


def sample_batch(ds: Dataset, split: SemiSplit, m_labeled: int, m_unlabeled: int, rng) -> SemiBatch:
    """One-off batch draw; training keeps a :class:`BatchSampler` for epoch cycling."""
    return BatchSampler(ds, split, m_labeled, m_unlabeled, rng).next()


# -- CSV interchange ----------------------------------------------------------

def write_csv(ds: Dataset, path) -> Path:
    """Write ``f0..f{d-1},label`` rows plus a ``<path>.json`` sidecar."""
    path = Path(path)
    ids = ds.class_ids
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{k}" for k in range(ds.dim)] + ["label"])
        for row, cid in zip(ds.features, ids):
            w.writerow([repr(float(v)) for v in row] + [int(cid)])
    meta = {"class_count": ds.class_count, "feature_shape": list(ds.feature_shape) if ds.feature_shape else None, "name": ds.name}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_csv(path, class_count: int | None = None, feature_shape=None) -> Dataset:
    path = Path(path)
    meta = {}
    if sidecar_path(path).exists():
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: last header column must be 'label'")
        expected = [f"f{k}" for k in range(len(header) - 1)]
        if header[:-1] != expected:
            raise ValueError(f"{path}: feature columns must be named f0..f{len(header) - 2}")
        rows = [r for r in reader if r]
    x = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    ids = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    c = class_count or meta.get("class_count") or int(ids.max()) + 1
    shape = feature_shape or meta.get("feature_shape")
    return Dataset(x, one_hot(ids, c), int(c), tuple(shape) if shape else None, name=meta.get("name", path.stem))
