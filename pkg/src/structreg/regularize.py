"""Pseudo-labelers, synthetic-batch transforms, structural losses and the loss weight ramp.

A structural regularizer is a (pseudo-labeler, transform, structural loss)
triple. The transforms here are consistency (additive noise, labels kept),
Mixup (shared coefficient for features and targets) and epsilon-consistent
Mixup, whose target coefficient is a clamped, rescaled version of the
feature coefficient controlled by a learnable radius ``epsilon``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import EmaTeacher, MlpClassifier

DIST_FLOOR = 1e-8
STEP_GUARD = 1e-6
LOG_SMOOTHING = 1e-12

PSEUDO_LABELERS = ("current", "ema_pred", "ema_weights")
TRANSFORMS = ("none", "consistency", "mixup", "emu")
STRUCTURAL_LOSSES = ("mse", "kl", "ce")
MIX_SCOPES = ("all", "unlabeled_only")


# -- pseudo-labels ------------------------------------------------------------

class PseudoLabeler:
    """Produce detached class distributions for unlabeled rows.

    ``kind`` is ``current`` (the student's prediction), ``ema_pred`` (a
    per-example running average of student predictions, keyed by dataset
    row index) or ``ema_weights`` (the EMA teacher's prediction).
    """

    def __init__(self, kind: str = "ema_weights", pred_decay: float = 0.6):
        if kind not in PSEUDO_LABELERS:
            raise ValueError(f"unknown pseudo-labeler {kind!r}; expected one of {PSEUDO_LABELERS}")
        self.kind = kind
        self.pred_decay = float(pred_decay)
        self.table: dict[int, np.ndarray] = {}

    def __call__(self, X_U, model: MlpClassifier, teacher: EmaTeacher | None = None, index=None) -> np.ndarray:
        X_U = np.asarray(X_U, dtype=np.float64)
        if len(X_U) == 0:
            return np.zeros((0, model.class_count))
        if self.kind == "ema_weights":
            if teacher is None:
                raise ValueError("ema_weights pseudo-labels need a teacher")
            return teacher.predict(X_U)
        current = model.predict(X_U)
        if self.kind == "current":
            return current
        if index is None:
            raise ValueError("ema_pred pseudo-labels need dataset row indices")
        return self.update(np.asarray(index), current)

    def update(self, index: np.ndarray, current: np.ndarray) -> np.ndarray:
        k = self.pred_decay
        out = np.empty_like(current)
        for r, i in enumerate(index.tolist()):
            prev = self.table.get(i)
            if prev is None:
                row = current[r].copy()
            else:
                row = k * prev + (1.0 - k) * current[r]
                row = row / row.sum()
            self.table[i] = row
            out[r] = row
        return out

    def state(self) -> dict:
        keys = sorted(self.table)
        return {"keys": keys, "rows": np.array([self.table[k] for k in keys]) if keys else np.zeros((0, 0))}

    def load_state(self, state: dict):
        self.table = {int(k): np.array(r) for k, r in zip(state["keys"], state["rows"])}


# -- mixing plans -------------------------------------------------------------

def draw_lambda(beta: float, rng: np.random.Generator, size=None):
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return rng.beta(beta, beta, size=size)


@dataclass
class MixPlan:
    pair_index: np.ndarray
    lam: np.ndarray
    pair_distance: np.ndarray
    nu: np.ndarray | None = None
    eta: np.ndarray | None = None

    def __len__(self):
        return len(self.pair_index)


def make_plan(X, beta: float, rng: np.random.Generator) -> MixPlan:
    """Random pairing of the rows of ``X`` with one Beta(beta, beta) draw per row."""
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    j = rng.permutation(m)
    lam = draw_lambda(beta, rng, size=m)
    dist = np.sqrt(((X - X[j]) ** 2).sum(axis=1))
    return MixPlan(pair_index=j, lam=lam, pair_distance=dist)


@dataclass
class SyntheticBatch:
    x_tilde: np.ndarray
    y_tilde: ad.Node
    plan: MixPlan | None = None


# -- epsilon ------------------------------------------------------------------

class EpsilonParam:
    """Learnable consistency radius, projected onto [0, eps_max] after each step."""

    def __init__(self, init: float, eps_max: float, frozen: bool = False):
        if eps_max < 0 or not 0 <= init <= eps_max:
            raise ValueError(f"epsilon init {init} must lie in [0, {eps_max}]")
        self.node = ad.parameter(np.array(float(init)), name="epsilon")
        self.eps_max = float(eps_max)
        self.frozen = frozen
        if frozen:
            self.node.requires_grad = False

    @property
    def value(self) -> float:
        return float(self.node.value)

    def zero_grad(self):
        self.node.zero_grad()

    def step(self, lr: float):
        if self.frozen:
            return
        g = float(self.node.grad)
        if not np.isfinite(g):
            raise FloatingPointError("non-finite epsilon gradient; update aborted")
        self.node.value[...] = min(max(self.value - lr * g, 0.0), self.eps_max)


def _eta_values(lam, nu):
    lam = np.asarray(lam, dtype=np.float64)
    nu = np.broadcast_to(np.asarray(nu, dtype=np.float64), lam.shape)
    step = nu >= 0.5 - STEP_GUARD
    lower = lam <= nu
    upper = lam >= 1.0 - nu
    interior = ~step & ~lower & ~upper
    denom = np.where(interior, 1.0 - 2.0 * nu, 1.0)
    eta = np.where(lower, 0.0, 1.0)
    eta = np.where(interior, (lam - nu) / denom, eta)
    stepped = np.where(lam < 0.5, 0.0, np.where(lam > 0.5, 1.0, 0.5))
    eta = np.where(step, stepped, eta)
    return eta, interior, denom


def emu_eta_rows(lam, eps: ad.Node, dist) -> ad.Node:
    """Target mixing coefficient per row as a differentiable function of ``eps``.

    ``nu = eps / max(dist, 1e-8)``. Rows with ``nu`` within 1e-6 of 0.5 or
    above fall in the step regime (0 below lam=0.5, 1 above, 0.5 at it);
    otherwise the coefficient is 0 up to ``nu``, 1 from ``1 - nu`` and
    linear ``(lam - nu) / (1 - 2 nu)`` between. The derivative with respect
    to eps is nonzero only in the linear part.
    """
    eps = ad._as_node(eps)
    lam = np.asarray(lam, dtype=np.float64)
    d = np.maximum(np.asarray(dist, dtype=np.float64), DIST_FLOOR)
    nu = eps.value / d
    eta, interior, denom = _eta_values(lam, nu)
    deta_deps = np.where(interior, (2.0 * lam - 1.0) / (denom * denom * d), 0.0)

    def rule(g):
        eps.grad += np.sum(g * deta_deps)

    return ad._make(eta, (eps,), rule)


def emu_eta(lam: float, eps, dist: float) -> ad.Node:
    return ad.reshape(emu_eta_rows(np.array([lam]), eps, np.array([dist])), ())


def rescaled_radius(eps: float, dist) -> np.ndarray:
    return eps / np.maximum(np.asarray(dist, dtype=np.float64), DIST_FLOOR)


# -- transforms ---------------------------------------------------------------

def _mix_features(X, plan: MixPlan) -> np.ndarray:
    lam = plan.lam[:, None]
    return lam * X + (1.0 - lam) * X[plan.pair_index]


def mixup_transform(X, targets, plan: MixPlan) -> SyntheticBatch:
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(targets, dtype=np.float64)
    lam = plan.lam[:, None]
    y = lam * P + (1.0 - lam) * P[plan.pair_index]
    return SyntheticBatch(_mix_features(X, plan), ad.constant(y), plan)


def emu_transform(X, targets, eps: EpsilonParam | ad.Node, plan: MixPlan) -> SyntheticBatch:
    """Mixup features; targets mixed with the epsilon-consistent coefficient."""
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(targets, dtype=np.float64)
    node = eps.node if isinstance(eps, EpsilonParam) else ad._as_node(eps)
    eta = emu_eta_rows(plan.lam, node, plan.pair_distance)
    plan.nu = rescaled_radius(float(node.value), plan.pair_distance)
    plan.eta = eta.value.copy()
    eta_col = ad.reshape(eta, (-1, 1))
    y = ad.add(ad.mul(eta_col, P), ad.mul(ad.sub(1.0, eta_col), P[plan.pair_index]))
    return SyntheticBatch(_mix_features(X, plan), y, plan)


def consistency_transform(X, targets, noise_sd: float, rng: np.random.Generator) -> SyntheticBatch:
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    noise = rng.normal(0.0, noise_sd, size=X.shape) if noise_sd > 0 else 0.0
    return SyntheticBatch(X + noise, ad.constant(np.array(targets, dtype=np.float64)))


# -- losses -------------------------------------------------------------------

def structural_loss(pred: ad.Node, y_tilde, measure: str = "mse") -> ad.Node:
    """Mean discrepancy between predicted rows and synthetic targets.

    ``mse`` is the per-row squared distance divided by C, ``kl`` is
    KL(target || pred) and ``ce`` the cross entropy, both with 1e-12
    added inside the logarithms.
    """
    y_tilde = ad._as_node(y_tilde)
    if pred.value.shape != y_tilde.value.shape:
        raise ad.DimensionError(f"structural loss: pred {pred.value.shape} vs target {y_tilde.value.shape}")
    m = pred.value.shape[0]
    if measure == "mse":
        diff = ad.sub(pred, y_tilde)
        return ad.mean(ad.mul(diff, diff))
    log_pred = ad.log(ad.add(pred, LOG_SMOOTHING))
    if measure == "ce":
        return ad.mul(ad.sum(ad.mul(y_tilde, log_pred)), -1.0 / m)
    if measure == "kl":
        log_tgt = ad.log(ad.add(y_tilde, LOG_SMOOTHING))
        return ad.mul(ad.sum(ad.mul(y_tilde, ad.sub(log_tgt, log_pred))), 1.0 / m)
    raise ValueError(f"unknown structural loss {measure!r}; expected one of {STRUCTURAL_LOSSES}")


def cross_entropy(logits: ad.Node, targets) -> ad.Node:
    m = logits.value.shape[0]
    return ad.mul(ad.sum(ad.mul(ad.log_softmax_rows(logits), np.asarray(targets))), -1.0 / m)


def ramp_weight(t: int, ramp_batches: int, w_max: float) -> float:
    if ramp_batches < 0:
        raise ValueError("ramp_batches must be non-negative")
    if ramp_batches == 0:
        return float(w_max)
    return float(w_max) * min(t / ramp_batches, 1.0)


@dataclass
class LossParts:
    total: ad.Node
    supervised: ad.Node
    structural: ad.Node
    w_s: float
    pred_synthetic: ad.Node | None = None


def total_loss(model: MlpClassifier, X_L, Y_L, synthetic: SyntheticBatch | None, w_s: float,
               measure: str = "mse") -> LossParts:
    """Supervised cross entropy on the original labeled rows plus ``w_s`` times the structural loss."""
    if len(X_L):
        sup = cross_entropy(model.forward(X_L), Y_L)
    else:
        sup = ad.constant(0.0)
    pred = None
    if synthetic is not None and len(synthetic.x_tilde):
        pred = ad.softmax_rows(model.forward(synthetic.x_tilde))
        struct = structural_loss(pred, synthetic.y_tilde, measure)
    else:
        struct = ad.constant(0.0)
    total = ad.add(sup, ad.mul(struct, w_s))
    return LossParts(total, sup, struct, float(w_s), pred)
