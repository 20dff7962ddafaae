"""Batch-wise structural regularization training loop.

Each step draws a labeled/unlabeled batch, pseudo-labels the unlabeled
rows, builds a synthetic batch with the configured transform, evaluates
``L = CE + w_S(t) * L_S``, takes an SGD step on the network (and on epsilon
for the emu transform) and updates the EMA teacher. Evaluation always goes
through the teacher.
"""
from __future__ import annotations

import base64
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import metrics as met
from . import regularize as reg
from .config import RunConfig, resolve_epsilon
from .model import EmaTeacher, MlpClassifier, NonFiniteGradient, ema_update, l2_penalty, sgd_step

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "step", "L_sup", "L_struct", "w_s", "L_total", "epsilon", "eps_pct_interdist",
    "train_err", "test_err", "mean_entropy", "label_quality",
)
CHECKPOINT_VERSION = 1
STREAMS = ("data", "mix", "augment", "init", "oracle")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, last_checkpoint: str | None = None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        ref = last_checkpoint or "none written"
        super().__init__(f"step {step}: {message} (last good checkpoint: {ref})")


# -- data preparation ---------------------------------------------------------

@dataclass
class Experiment:
    """Everything derived from the config before step 0; shared by all arms of a seed."""

    train: data_mod.Dataset
    test: data_mod.Dataset | None
    val: data_mod.Dataset | None
    split: data_mod.SemiSplit
    mean_distance: float
    max_distance: float
    oracle: MlpClassifier | None = None


def load_datasets(cfg: RunConfig):
    if cfg.dataset == "two_moons":
        train = data_mod.gen_two_moons(cfg.n_train, cfg.noise, cfg.data_seed)
        test = data_mod.gen_two_moons(cfg.n_test, cfg.noise, cfg.data_seed + 1)
    elif cfg.dataset == "blobs":
        centers = [[float(v) for v in c.split(",")] for c in cfg.blob_centers.split(";") if c.strip()]
        train = data_mod.gen_blobs(cfg.n_train, len(centers), centers, cfg.blob_sd, cfg.data_seed)
        test = data_mod.gen_blobs(cfg.n_test, len(centers), centers, cfg.blob_sd, cfg.data_seed + 1)
    else:
        train = data_mod.read_csv(cfg.data_path)
        test = data_mod.read_csv(cfg.test_path, class_count=train.class_count) if cfg.test_path else None
    train, val = data_mod.split_validation(train, cfg.val_fraction, cfg.data_seed)
    if cfg.rescale:
        train = data_mod.rescale_features(train)
        test = data_mod.rescale_features(test, like=train) if test is not None else None
        val = data_mod.rescale_features(val, like=train) if val is not None else None
    return train, test, val


def prepare(cfg: RunConfig, with_oracle: bool | None = None) -> Experiment:
    train, test, val = load_datasets(cfg)
    split = data_mod.mask_labels(train, cfg.n_labeled, cfg.split_seed_value)
    mean_d = met.inter_pair_distance(train.features, cfg.interdist_pairs, seed=cfg.data_seed)
    max_d = met.max_pair_distance(train.features, cfg.interdist_pairs, seed=cfg.data_seed)
    exp = Experiment(train, test, val, split, mean_d, max_d)
    if cfg.label_quality if with_oracle is None else with_oracle:
        exp.oracle = train_oracle(cfg, train)
    return exp


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def train_oracle(cfg: RunConfig, train: data_mod.Dataset) -> MlpClassifier:
    """Fully supervised reference model used to score synthetic labels."""
    rng = _streams(cfg.data_seed)["oracle"]
    widths = [train.dim, *cfg.hidden_widths(train.feature_shape is not None), train.class_count]
    model = MlpClassifier.init(widths, rng)
    labeled = np.flatnonzero(train.has_label)
    sampler = data_mod.EpochSampler(labeled, rng)
    m = max(cfg.m_labeled + cfg.m_unlabeled, 1)
    for _ in range(cfg.oracle_steps):
        idx = sampler.draw(m)
        ad.zero_grad(model.params)
        loss = reg.cross_entropy(model.forward(train.features[idx]), train.labels[idx])
        ad.backward(loss)
        sgd_step(model, cfg.lr, 1e-4)
    return model


# -- state --------------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    model: MlpClassifier
    teacher: EmaTeacher
    epsilon: reg.EpsilonParam
    labeler: reg.PseudoLabeler
    sampler: data_mod.BatchSampler
    rngs: dict[str, np.random.Generator]
    rows: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    last_checkpoint: str | None = None


def epsilon_bounds(cfg: RunConfig, exp: Experiment) -> tuple[float, float]:
    eps_max = exp.max_distance if cfg.epsilon_max.strip().lower() == "auto" else resolve_epsilon(cfg.epsilon_max, exp.mean_distance)
    eps0 = resolve_epsilon(cfg.epsilon_init, exp.mean_distance) if cfg.transform == "emu" else 0.0
    eps_max = max(eps_max, eps0)
    return eps0, eps_max


def init_state(cfg: RunConfig, exp: Experiment) -> TrainState:
    rngs = _streams(cfg.seed)
    widths = [exp.train.dim, *cfg.hidden_widths(exp.train.feature_shape is not None), exp.train.class_count]
    model = MlpClassifier.init(widths, rngs["init"])
    teacher = EmaTeacher(model, cfg.kappa)
    eps0, eps_max = epsilon_bounds(cfg, exp)
    frozen = not cfg.learn_epsilon or cfg.transform != "emu"
    epsilon = reg.EpsilonParam(eps0, eps_max, frozen=frozen)
    labeler = reg.PseudoLabeler(cfg.pseudo_labeler, cfg.pred_decay)
    sampler = data_mod.BatchSampler(exp.train, exp.split, cfg.m_labeled, cfg.m_unlabeled, rngs["data"])
    return TrainState(0, model, teacher, epsilon, labeler, sampler, rngs)


# -- one step -----------------------------------------------------------------

def build_synthetic(cfg: RunConfig, state: TrainState, X_L, Y_L, X_U, P_U) -> reg.SyntheticBatch | None:
    if cfg.transform == "none":
        return None
    if cfg.mix_scope == "unlabeled_only":
        X, P = X_U, P_U
    else:
        X, P = np.concatenate([X_L, X_U]), np.concatenate([Y_L, P_U])
    if len(X) == 0:
        return None
    rng = state.rngs["mix"]
    if cfg.transform == "consistency":
        return reg.consistency_transform(X, P, cfg.noise_sd, rng)
    plan = reg.make_plan(X, cfg.beta, rng)
    if cfg.transform == "mixup":
        return reg.mixup_transform(X, P, plan)
    return reg.emu_transform(X, P, state.epsilon, plan)


def train_step(state: TrainState, cfg: RunConfig, exp: Experiment) -> tuple[dict, reg.SyntheticBatch | None]:
    t = state.step
    batch = state.sampler.next()
    X_L, Y_L, X_U = batch.labeled_features, batch.labeled_targets, batch.unlabeled_features
    if cfg.augment and exp.train.feature_shape is not None:
        aug = state.rngs["augment"]
        X_L = data_mod.augment_rows(X_L, exp.train.feature_shape, aug, flip=cfg.flip)
        X_U = data_mod.augment_rows(X_U, exp.train.feature_shape, aug, flip=cfg.flip)

    P_U = state.labeler(X_U, state.model, state.teacher, index=batch.unlabeled_index)
    synthetic = build_synthetic(cfg, state, X_L, Y_L, X_U, P_U)

    w_s = reg.ramp_weight(t, cfg.ramp_batches, cfg.w_s_max) if cfg.transform != "none" else 0.0
    ad.zero_grad(state.model.params)
    state.epsilon.zero_grad()
    parts = reg.total_loss(state.model, X_L, Y_L, synthetic, w_s, cfg.structural_loss)
    objective = parts.total
    if cfg.decay_mode == "coupled" and cfg.weight_decay:
        objective = ad.add(objective, l2_penalty(state.model, cfg.weight_decay))
    if not np.isfinite(objective.value):
        raise TrainingAborted("non-finite loss", t, state.last_checkpoint)
    ad.backward(objective)

    grad_norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in state.model.params))
    eps_grad = float(state.epsilon.node.grad)
    try:
        sgd_step(state.model, cfg.lr, cfg.weight_decay, decoupled=cfg.decay_mode == "decoupled")
        state.epsilon.step(cfg.lr)
    except (NonFiniteGradient, FloatingPointError) as exc:
        raise TrainingAborted(str(exc), t, state.last_checkpoint) from None
    ema_update(state.teacher, state.model)
    state.step = t + 1

    record = {
        "step": t,
        "L_sup": float(parts.supervised.value),
        "L_struct": float(parts.structural.value),
        "w_s": w_s,
        "L_total": float(parts.total.value),
        "epsilon": state.epsilon.value,
        "grad_norm": grad_norm,
        "eps_grad": eps_grad,
    }
    return record, synthetic


# -- evaluation ---------------------------------------------------------------

def evaluate(state: TrainState, cfg: RunConfig, exp: Experiment, record: dict,
             synthetic: reg.SyntheticBatch | None) -> dict:
    n = cfg.eval_rows
    train_x = exp.train.features[:n]
    train_pred = state.teacher.predict(train_x)
    known = exp.train.has_label[:n]
    train_err = met.error_rate(train_pred[known], exp.train.labels[:n][known]) if known.any() else math.nan
    test_err = math.nan
    if exp.test is not None:
        tk = exp.test.has_label[:n]
        if tk.any():
            test_err = met.error_rate(state.teacher.predict(exp.test.features[:n][tk]), exp.test.labels[:n][tk])
    quality = math.nan
    if exp.oracle is not None and synthetic is not None and len(synthetic.x_tilde):
        quality, _ = met.label_quality(synthetic.y_tilde.value, exp.oracle.predict(synthetic.x_tilde))
    eps = record["epsilon"]
    return {
        "step": record["step"],
        "L_sup": record["L_sup"],
        "L_struct": record["L_struct"],
        "w_s": record["w_s"],
        "L_total": record["L_total"],
        "epsilon": eps,
        "eps_pct_interdist": met.eps_percent(eps, exp.mean_distance),
        "train_err": train_err,
        "test_err": test_err,
        "mean_entropy": met.mean_entropy(train_pred),
        "label_quality": quality,
    }


def validation_error(state: TrainState, exp: Experiment) -> float:
    if exp.val is None:
        return math.nan
    return met.error_rate(state.teacher.predict(exp.val.features), exp.val.labels)


# -- run ----------------------------------------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    state: TrainState
    rows: list[dict]
    steps: list[dict]
    summary: dict


def run(cfg: RunConfig, exp: Experiment | None = None, out_dir=None, resume=None,
        keep_steps: bool = True) -> RunResult:
    """Train for ``cfg.total_batches`` steps, evaluating every ``eval_interval``.

    With ``out_dir`` set, writes ``metrics.csv``, ``summary.json`` and
    ``<step>.ckpt`` checkpoints there. ``resume`` restores a checkpoint and
    continues from its step.
    """
    exp = exp or prepare(cfg)
    state = init_state(cfg, exp)
    if resume is not None:
        load_checkpoint(state, resume)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    while state.step < cfg.total_batches:
        record, synthetic = train_step(state, cfg, exp)
        if keep_steps:
            state.steps.append(record)
        done = state.step
        if done % cfg.eval_interval == 0 or done == cfg.total_batches:
            state.rows.append(evaluate(state, cfg, exp, record, synthetic))
        if out is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            state.last_checkpoint = str(save_checkpoint(state, out / f"{done}.ckpt"))

    if out is not None:
        if state.step and (not cfg.checkpoint_interval or state.step % cfg.checkpoint_interval):
            state.last_checkpoint = str(save_checkpoint(state, out / f"{state.step}.ckpt"))
        write_metrics_csv(state.rows, out / "metrics.csv")
    summary = summarize(cfg, exp, state)
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(cfg, state, state.rows, state.steps, summary)


def summarize(cfg: RunConfig, exp: Experiment, state: TrainState) -> dict:
    rows = state.rows
    last = rows[-1] if rows else {}
    epoch_start = max(cfg.total_batches - cfg.batches_per_epoch, 0)
    final_epoch = [r["test_err"] for r in rows if r["step"] >= epoch_start]
    eps_traj = [[r["step"], r["epsilon"]] for r in rows]
    return {
        "seed": cfg.seed,
        "transform": cfg.transform,
        "steps": state.step,
        "final_test_err": last.get("test_err", math.nan),
        "final_epoch_test_err": float(np.mean(final_epoch)) if final_epoch else math.nan,
        "final_train_err": last.get("train_err", math.nan),
        "final_mean_entropy": last.get("mean_entropy", math.nan),
        "final_label_quality": last.get("label_quality", math.nan),
        "final_epsilon": state.epsilon.value,
        "epsilon_init": epsilon_bounds(cfg, exp)[0],
        "epsilon_max": state.epsilon.eps_max,
        "mean_interpair_distance": exp.mean_distance,
        "final_eps_pct": met.eps_percent(state.epsilon.value, exp.mean_distance),
        "val_err": validation_error(state, exp),
        "epsilon_trajectory": eps_traj,
    }


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def write_metrics_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in reader]


# -- checkpoints --------------------------------------------------------------

def _enc(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def save_checkpoint(state: TrainState, path) -> Path:
    """Versioned JSON record of everything needed to continue bit-identically."""
    path = Path(path)
    labeler = state.labeler.state()
    doc = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "widths": state.model.widths,
        "theta": [_enc(p.value) for p in state.model.params],
        "theta_bar": [_enc(a) for a in state.teacher.shadow],
        "epsilon": state.epsilon.value,
        "epsilon_max": state.epsilon.eps_max,
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "sampler": state.sampler.state(),
        "labeler": {"keys": labeler["keys"], "rows": _enc(labeler["rows"])},
        "rows": [{k: _fmt(v) for k, v in r.items()} for r in state.rows],
    }
    buf = io.StringIO()
    json.dump(doc, buf, sort_keys=True)
    path.write_text(buf.getvalue() + "\n", encoding="utf-8")
    return path


def load_checkpoint(state: TrainState, path) -> TrainState:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    if list(doc["widths"]) != state.model.widths:
        raise ValueError(f"{path}: checkpoint widths {doc['widths']} do not match model {state.model.widths}")
    state.step = int(doc["step"])
    state.model.load([_dec(d) for d in doc["theta"]])
    state.teacher.model.load([_dec(d) for d in doc["theta_bar"]])
    state.epsilon.node.value[...] = float(doc["epsilon"])
    state.epsilon.eps_max = float(doc["epsilon_max"])
    for k, s in doc["rng"].items():
        state.rngs[k].bit_generator.state = s
    state.sampler.load_state(doc["sampler"])
    state.labeler.load_state({"keys": doc["labeler"]["keys"], "rows": _dec(doc["labeler"]["rows"])})
    state.rows = [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in doc["rows"]]
    state.last_checkpoint = str(path)
    return state
