import json

import numpy as np
import pytest

from structreg import cli, data, trainer
from structreg.config import ConfigError, load_spec

BASE = """\
[run]
transform = emu
beta = 1.0
n_train = 200
n_test = 200
hidden = 8,8
m_labeled = 8
m_unlabeled = 8
total_batches = 40
batches_per_epoch = 20
ramp_epochs = 1
eval_interval = 20
lr = 0.1
kappa = 0.9
oracle_steps = 50
"""


def write(tmp_path, text, name="exp.ini"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_run_writes_artifacts_and_is_deterministic(tmp_path):
    cfg = write(tmp_path, BASE)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seeds", "3"]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seeds", "3"]) == 0
    a = tmp_path / "a" / "run" / "seed_3"
    csv_bytes = (a / "metrics.csv").read_bytes()
    assert csv_bytes.decode().splitlines()[0] == ",".join(trainer.CSV_COLUMNS)
    assert csv_bytes == (tmp_path / "b" / "run" / "seed_3" / "metrics.csv").read_bytes()
    assert (a / "40.ckpt").exists()
    assert json.loads((a / "summary.json").read_text())["seed"] == 3


def test_missing_beta_exits_2_naming_key(tmp_path, capsys):
    cfg = write(tmp_path, BASE.replace("beta = 1.0\n", ""))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "beta" in capsys.readouterr().err


def test_bad_values_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, BASE.replace("lr = 0.1", "lr = fast"))
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert "lr" in capsys.readouterr().err
    cfg = write(tmp_path, BASE + "colour = blue\n")
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert "colour" in capsys.readouterr().err


def test_runtime_failure_exits_3(tmp_path):
    cfg = write(tmp_path, BASE + "n_labeled = 500\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_workers_env_overrides_flag(monkeypatch):
    monkeypatch.setenv("STRUCTREG_WORKERS", "3")
    assert cli.worker_count(1) == 3
    monkeypatch.setenv("STRUCTREG_WORKERS", "many")
    with pytest.raises(ConfigError):
        cli.worker_count(1)
    monkeypatch.delenv("STRUCTREG_WORKERS")
    assert cli.worker_count(None) == 1


def test_parallel_run_matches_serial(tmp_path):
    cfg = write(tmp_path, BASE)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "s"), "--seeds", "0,1"]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "p"), "--seeds", "0-1", "--workers", "2"]) == 0
    for s in (0, 1):
        rel = f"run/seed_{s}/metrics.csv"
        assert (tmp_path / "s" / rel).read_bytes() == (tmp_path / "p" / rel).read_bytes()


COMPARE = BASE + """\
baseline = mixup

[arm mixup]
transform = mixup

[arm mixup_again]
transform = mixup

[arm emu_zero]
learn_epsilon = false
epsilon_init = 0

[arm emu]
"""


def test_compare_paired_differences(tmp_path):
    cfg = write(tmp_path, COMPARE)
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", str(cfg), "--out", str(out), "--seeds", "0,1"]) == 0
    report = json.loads((out / "compare.json").read_text())
    assert report["baseline"] == "mixup"
    for f in cli.COMPARE_FIELDS:
        assert report["arms"]["mixup_again"][f]["per_seed"] == [0.0, 0.0]
        assert max(abs(v) for v in report["arms"]["emu_zero"][f]["per_seed"]) <= 1e-10
        per_seed = report["arms"]["emu"][f]["per_seed"]
        assert report["arms"]["emu"][f]["mean"] == pytest.approx(np.mean(per_seed))
        assert report["arms"]["emu"][f]["std"] == pytest.approx(np.std(per_seed, ddof=1))
    for svg in ("quality_diff.svg", "entropy_diff.svg"):
        text = (out / svg).read_text()
        assert text.startswith("<svg") and "href" not in text and "http://www.w3.org/2000/svg" in text


def test_compare_svgs_are_deterministic(tmp_path):
    cfg = write(tmp_path, COMPARE)
    cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "x"), "--seeds", "0,1"])
    cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "y"), "--seeds", "0,1"])
    for svg in ("quality_diff.svg", "entropy_diff.svg"):
        assert (tmp_path / "x" / svg).read_bytes() == (tmp_path / "y" / svg).read_bytes()


def test_compare_refuses_unpaired_arms(tmp_path, capsys):
    cfg = write(tmp_path, BASE + "\n[arm a]\n\n[arm b]\nn_labeled = 10\n")
    assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "n_labeled" in capsys.readouterr().err
    single = write(tmp_path, BASE + "\n[arm a]\n", name="one.ini")
    assert cli.main(["compare", "--config", str(single)]) == 2


def test_gridsearch_table_and_selection(tmp_path):
    cfg = write(tmp_path, BASE.replace("n_train = 200", "dataset = blobs\nn_train = 200")
                + "\n[grid]\nbeta = 0.1, 1.0\n")
    out = tmp_path / "g"
    assert cli.main(["gridsearch", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "gridsearch.json").read_text())
    assert [c["beta"] for c in report["cells"]] == [0.1, 1.0]
    assert all(0.0 <= c["val_err"] <= 1.0 for c in report["cells"])
    assert report["best"]["val_err"] == min(c["val_err"] for c in report["cells"])
    text = (out / "gridsearch.txt").read_text(encoding="utf-8")
    assert "Avg. learned ε" in text and "% of Avg. Inter-Image Distance" in text


def test_gridsearch_single_cell_and_empty_grid(tmp_path):
    cfg = write(tmp_path, BASE + "\n[grid]\nw_s_max = 5\n")
    spec = load_spec(cfg)
    report = cli.gridsearch(spec, [0], tmp_path / "g")
    assert len(report["cells"]) == 1 and report["best"]["w_s_max"] == 5.0
    empty = write(tmp_path, BASE + "\n[grid]\n", name="empty.ini")
    assert cli.main(["gridsearch", "--config", str(empty)]) == 2


def test_gen_data_round_trips(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--seeds", "5"]) == 0
    ds = data.read_csv(tmp_path / "two_moons_seed5_train.csv")
    direct = data.gen_two_moons(1000, 0.1, 5)
    np.testing.assert_array_equal(ds.features, direct.features)
    np.testing.assert_array_equal(ds.class_ids, direct.class_ids)
