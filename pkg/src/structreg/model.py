"""MLP classifier, SGD with weight decay, and the EMA weight teacher."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad


class NonFiniteGradient(FloatingPointError):
    pass


class MlpClassifier:
    """Fully connected ReLU network producing logits.

    Parameters are stored as ``[W1, b1, W2, b2, ...]`` with ``W`` of shape
    (fan_in, fan_out) so a batch ``X @ W + b`` maps rows to rows.
    """

    def __init__(self, widths: Sequence[int], params: list[ad.Node] | None = None):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        if params is None:
            params = [ad.parameter(np.zeros((i, o))) for i, o in zip(self.widths[:-1], self.widths[1:])]
            params = [p for w in params for p in (w, ad.parameter(np.zeros(w.shape[1])))]
        self.params = params
        for k, p in enumerate(self.params):
            p.name = f"{'W' if k % 2 == 0 else 'b'}{k // 2 + 1}"

    @classmethod
    def init(cls, widths: Sequence[int], rng: np.random.Generator) -> "MlpClassifier":
        # He-style uniform bounds on fan-in, zero biases
        model = cls(widths)
        for w in model.weights:
            bound = math.sqrt(6.0 / w.value.shape[0])
            w.value[...] = rng.uniform(-bound, bound, size=w.value.shape)
        return model

    @property
    def weights(self) -> list[ad.Node]:
        return self.params[0::2]

    @property
    def biases(self) -> list[ad.Node]:
        return self.params[1::2]

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def class_count(self) -> int:
        return self.widths[-1]

    def _check(self, X):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ad.DimensionError(f"model expects rows of width {self.in_dim}, got shape {X.shape}")

    def forward(self, X) -> ad.Node:
        self._check(X)
        h = ad.constant(X)
        n_layers = len(self.weights)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if k < n_layers - 1:
                h = ad.relu(h)
        return h

    def logits(self, X) -> np.ndarray:
        """Same arithmetic as :meth:`forward` without building a tape."""
        self._check(X)
        return forward_arrays([p.value for p in self.params], np.asarray(X, dtype=np.float64))

    def predict(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def copy(self) -> "MlpClassifier":
        return MlpClassifier(self.widths, [ad.parameter(p.value.copy()) for p in self.params])

    def state(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params]

    def load(self, arrays: Sequence[np.ndarray]):
        for p, a in zip(self.params, arrays, strict=True):
            if p.value.shape != np.shape(a):
                raise ad.DimensionError(f"{p.name}: stored shape {np.shape(a)} != {p.value.shape}")
            p.value[...] = a


def forward_arrays(params: Sequence[np.ndarray], X: np.ndarray) -> np.ndarray:
    h = X
    n_layers = len(params) // 2
    for k in range(n_layers):
        h = h @ params[2 * k] + params[2 * k + 1]
        if k < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class EmaTeacher:
    """Shadow copy of the parameters, updated as ``k*shadow + (1-k)*current``."""

    def __init__(self, model: MlpClassifier, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        self.decay = float(decay)
        self.model = model.copy()
        for p in self.model.params:
            p.requires_grad = False

    @property
    def shadow(self) -> list[np.ndarray]:
        return [p.value for p in self.model.params]

    def logits(self, X) -> np.ndarray:
        return self.model.logits(X)

    def predict(self, X) -> np.ndarray:
        return self.model.predict(X)


def ema_update(teacher: EmaTeacher, model: MlpClassifier, decay: float | None = None) -> EmaTeacher:
    k = teacher.decay if decay is None else decay
    for shadow, p in zip(teacher.shadow, model.params, strict=True):
        if shadow.shape != p.value.shape:
            raise ad.DimensionError(f"teacher/model shape mismatch: {shadow.shape} vs {p.value.shape}")
        shadow[...] = k * shadow + (1.0 - k) * p.value
    return teacher


def sgd_step(model: MlpClassifier, lr: float, weight_decay: float = 0.0, grads: Sequence[np.ndarray] | None = None,
             decoupled: bool = True) -> MlpClassifier:
    """In-place ``w <- w - lr * (g + wd * w)`` on weights; biases get no decay.

    With ``decoupled=False`` the decay term is assumed to already be inside
    the loss gradient and is not added again here.
    """
    grads = [p.grad for p in model.params] if grads is None else list(grads)
    for p, g in zip(model.params, grads, strict=True):
        if np.shape(g) != p.value.shape:
            raise ad.DimensionError(f"{p.name}: gradient shape {np.shape(g)} != {p.value.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {p.name}; update aborted")
    weight_ids = {id(w) for w in model.weights}
    for p, g in zip(model.params, grads):
        if decoupled and weight_decay and id(p) in weight_ids:
            p.value -= lr * (g + weight_decay * p.value)
        else:
            p.value -= lr * g
    return model


def l2_penalty(model: MlpClassifier, weight_decay: float) -> ad.Node:
    """``wd/2 * sum ||W||^2`` so its gradient is ``wd * W`` (coupled decay)."""
    total = ad.constant(0.0)
    for w in model.weights:
        total = ad.add(total, ad.sum(ad.mul(w, w)))
    return ad.mul(total, 0.5 * weight_decay)


def predict(model_or_teacher, X) -> np.ndarray:
    return model_or_teacher.predict(X)
