import math

import numpy as np
import pytest

from structreg import data, trainer
from structreg.config import RunConfig
from structreg.model import MlpClassifier, sgd_step
from structreg import autodiff as ad
from structreg.regularize import cross_entropy

SHORT = dict(total_batches=60, batches_per_epoch=20, ramp_epochs=1, eval_interval=20,
             n_train=200, n_test=200, hidden="8,8", m_labeled=8, m_unlabeled=8, lr=0.1, kappa=0.9)


def cfg(**kw):
    return RunConfig(**{**SHORT, **kw})


def test_supervised_arm_matches_plain_sgd():
    c = cfg(transform="emu", w_s_max=0.0, m_unlabeled=0, total_batches=25)
    exp = trainer.prepare(c)
    res = trainer.run(c, exp)

    # independent replay: same init stream and batch order, plain CE + SGD
    rngs = trainer._streams(c.seed)
    model = MlpClassifier.init([2, 8, 8, 2], rngs["init"])
    sampler = data.BatchSampler(exp.train, exp.split, c.m_labeled, 0, rngs["data"])
    for _ in range(c.total_batches):
        b = sampler.next()
        ad.zero_grad(model.params)
        ad.backward(cross_entropy(model.forward(b.labeled_features), b.labeled_targets))
        sgd_step(model, c.lr)
    for p, q in zip(res.state.model.params, model.params):
        assert p.value.tobytes() == q.value.tobytes()


def test_structural_term_off_makes_transform_irrelevant():
    runs = [trainer.run(cfg(transform=t, w_s_max=0.0, learn_epsilon=False)) for t in ("mixup", "emu", "consistency")]
    for other in runs[1:]:
        for p, q in zip(runs[0].state.model.params, other.state.model.params):
            assert p.value.tobytes() == q.value.tobytes()


def test_frozen_zero_epsilon_matches_mixup_losses():
    mu = trainer.run(cfg(transform="mixup"))
    emu = trainer.run(cfg(transform="emu", learn_epsilon=False, epsilon_init="0"))
    a = np.array([r["L_total"] for r in mu.steps])
    b = np.array([r["L_total"] for r in emu.steps])
    assert np.max(np.abs(a - b)) <= 1e-10


def test_one_step_matches_hand_gradient():
    X = np.array([[0.5], [-1.5]])
    ds = data.Dataset(X, data.one_hot([0, 1], 2), 2)
    split = data.SemiSplit(np.array([0, 1]), np.zeros(0, dtype=np.int64), 2)
    exp = trainer.Experiment(ds, None, None, split, 2.0, 2.0)
    c = RunConfig(transform="none", hidden="none", m_labeled=2, m_unlabeled=0, lr=0.3, total_batches=1)
    state = trainer.init_state(c, exp)
    w = state.model.weights[0].value.copy()
    b = state.model.biases[0].value.copy()
    trainer.train_step(state, c, exp)

    # softmax cross entropy over the two rows, gradient by hand
    z = X @ w + b
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    r = (p - np.eye(2)) / 2
    np.testing.assert_allclose(state.model.weights[0].value, w - 0.3 * (X.T @ r), atol=1e-12, rtol=0)
    np.testing.assert_allclose(state.model.biases[0].value, b - 0.3 * r.sum(axis=0), atol=1e-12, rtol=0)


def test_loss_decomposition_and_epsilon_bounds():
    res = trainer.run(cfg(transform="emu", w_s_max=50.0))
    eps_max = res.state.epsilon.eps_max
    for r in res.steps:
        assert r["L_total"] == r["L_sup"] + r["w_s"] * r["L_struct"]
        assert 0.0 <= r["epsilon"] <= eps_max


def test_ramp_logged_per_step():
    res = trainer.run(cfg(transform="mixup"))
    w = [r["w_s"] for r in res.steps]
    assert w[0] == 0.0 and w[10] == 5.0 and w[20] == 10.0 and w[-1] == 10.0


def test_zero_batches_returns_initial_model():
    c = cfg(total_batches=0)
    res = trainer.run(c)
    assert res.rows == [] and res.state.step == 0
    fresh = MlpClassifier.init([2, 8, 8, 2], trainer._streams(c.seed)["init"])
    for p, q in zip(res.state.model.params, fresh.params):
        np.testing.assert_array_equal(p.value, q.value)


def test_runs_are_byte_identical(tmp_path):
    c = cfg(label_quality=True, oracle_steps=50)
    trainer.run(c, out_dir=tmp_path / "a")
    trainer.run(c, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    header = a.decode().splitlines()[0]
    assert header == ",".join(trainer.CSV_COLUMNS)
    assert len(a.decode().splitlines()) == 1 + 3


def test_checkpoint_resume_is_bit_identical(tmp_path):
    c = cfg(pseudo_labeler="ema_pred", checkpoint_interval=20)
    full = trainer.run(c, out_dir=tmp_path / "full")
    assert (tmp_path / "full" / "20.ckpt").exists()
    resumed = trainer.run(c, out_dir=tmp_path / "resumed", resume=tmp_path / "full" / "20.ckpt")
    for p, q in zip(full.state.model.params, resumed.state.model.params):
        assert p.value.tobytes() == q.value.tobytes()
    assert full.state.epsilon.value == resumed.state.epsilon.value
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "resumed" / "metrics.csv").read_bytes()


def test_checkpoint_width_mismatch(tmp_path):
    trainer.run(cfg(total_batches=20, checkpoint_interval=20), out_dir=tmp_path)
    with pytest.raises(ValueError):
        trainer.run(cfg(hidden="4"), resume=tmp_path / "20.ckpt")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_checkpoint_reference():
    c = cfg()
    exp = trainer.prepare(c)
    state = trainer.init_state(c, exp)
    state.last_checkpoint = "run/40.ckpt"
    state.model.biases[-1].value[0] = np.inf
    with pytest.raises(trainer.TrainingAborted, match="run/40.ckpt") as info:
        trainer.train_step(state, c, exp)
    assert info.value.step == 0


def test_summary_fields():
    res = trainer.run(cfg())
    s = res.summary
    assert s["steps"] == 60
    assert 0.0 <= s["final_test_err"] <= 1.0
    assert s["epsilon_init"] == pytest.approx(0.25 * s["mean_interpair_distance"], rel=1e-12)
    assert s["final_eps_pct"] == pytest.approx(100 * s["final_epsilon"] / s["mean_interpair_distance"])
    assert len(s["epsilon_trajectory"]) == 3
    assert math.isnan(s["val_err"])


def test_validation_slice_reported():
    s = trainer.run(cfg(val_fraction=0.1)).summary
    assert 0.0 <= s["val_err"] <= 1.0


def test_non_emu_transforms_keep_epsilon_zero():
    for t in ("mixup", "consistency", "none"):
        res = trainer.run(cfg(transform=t, total_batches=20))
        assert res.state.epsilon.value == 0.0
