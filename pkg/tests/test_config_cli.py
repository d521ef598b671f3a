import csv
import json

import numpy as np
import pytest
import tomli

from advmix import experiment
from advmix.cli import main
from advmix.config import ConfigError, load_config, validate_config, write_resolved
from advmix.experiment import build_report, markdown_table, report_header
from advmix.gradcheck import run_suite
from advmix.tensor import Sigmoid

TINY = """
seeds = [0]
[dataset]
kind = "two_moons"
n = 80
[model]
widths = [8]
[train]
scheme = "attack"
epochs = 2
batch_size = 40
[train.attack]
epsilon = "1/10"
steps = 2
[[eval.attacks]]
name = "PGD20"
epsilon = 0.1
steps = 3
[[eval.attacks]]
name = "zero"
epsilon = 0.0
steps = 2
[plots]
grid_resolution = 5
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def _write(tmp_path, text, name="c.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


# -- config validation ------------------------------------------------------------------


def test_missing_scheme_is_named():
    with pytest.raises(ConfigError) as err:
        validate_config({"train": {"epochs": 2}}, require_scheme=True)
    assert any("train.scheme" in e for e in err.value.errors)
    validate_config({"train": {"epochs": 2}})


def test_all_errors_listed_together():
    raw = {"bogus": 1, "train": {"epochs": 0, "scheme": "cutmix", "colour": "red"},
           "seeds": []}
    with pytest.raises(ConfigError) as err:
        validate_config(raw)
    text = "\n".join(err.value.errors)
    for key in ("bogus", "train.epochs", "train.scheme", "train.colour"):
        assert key in text
    assert len(err.value.errors) >= 4


def test_rational_strings_accepted():
    cfg = validate_config({"train": {"attack": {"epsilon": "8/255"}}})
    assert cfg.train.attack.epsilon == 8 / 255
    with pytest.raises(ConfigError, match="epsilon"):
        validate_config({"train": {"attack": {"epsilon": "eight"}}})


def test_semantic_checks():
    with pytest.raises(ConfigError, match="milestones"):
        validate_config({"train": {"schedule": {"milestones": [0.9, 0.7]}}})
    with pytest.raises(ConfigError, match="idx"):
        validate_config({"dataset": {"kind": "idx"}})
    with pytest.raises(ConfigError, match="unique"):
        validate_config({"eval": {"attacks": [{"name": "a"}, {"name": "a"}]}})


def test_step_sizes_derived_from_budget():
    cfg = validate_config({"train": {"attack": {"epsilon": 0.2}},
                           "eval": {"attacks": [{"epsilon": 0.2}]}})
    assert cfg.train_config(0).attack.step_size == pytest.approx(0.1)
    assert cfg.eval_attacks()[0].step_size == pytest.approx(0.05)


def test_resolved_config_round_trips(tiny, tmp_path):
    cfg = load_config(tiny)
    write_resolved(cfg, tmp_path / "r.toml")
    again = load_config(tmp_path / "r.toml")
    assert again.resolved() == cfg.resolved()
    assert again.train_config(0) == cfg.train_config(0)
    resolved = tomli.loads((tmp_path / "r.toml").read_text())
    assert resolved["train"]["attack"]["step_size"] == pytest.approx(0.05)


def test_idx_paths_relative_to_config(tmp_path):
    path = _write(tmp_path, '[dataset]\nkind = "idx"\nimages = "a.idx"\nlabels = "b.idx"\n')
    cfg = load_config(path)
    assert cfg.dataset.images == str(tmp_path / "a.idx")


# -- CLI ---------------------------------------------------------------------------


def test_train_writes_one_directory_per_seed(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny), "--out", str(out), "--seed", "0,1,2"]) == 0
    for s in (0, 1, 2):
        d = out / f"seed_{s}"
        for name in ("metrics.jsonl", "model.ckpt", "curves.csv", "decision_grid.csv"):
            assert (d / name).exists()
    assert (out / "resolved-config.toml").exists()
    summary = json.loads((out / "seed_0" / "metrics.jsonl").read_text().splitlines()[-1])
    assert summary["robust"]["zero"] == summary["pristine_accuracy"]


def test_rerun_from_resolved_config_is_byte_identical(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(tiny), "--out", str(a)]) == 0
    assert main(["train", "--config", str(a / "resolved-config.toml"), "--out", str(b)]) == 0
    assert (a / "seed_0" / "metrics.jsonl").read_bytes() == (b / "seed_0" / "metrics.jsonl").read_bytes()


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = _write(tmp_path, "[train]\nepochs = 0\nshape = 1\n")
    assert main(["train", "--config", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "train.scheme" in err and "train.epochs" in err and "train.shape" in err
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == 1
    assert main(["train", "--config", str(bad), "--threads", "0"]) == 1


def test_missing_idx_file_exit_code(tmp_path):
    cfg = _write(tmp_path, '[dataset]\nkind = "idx"\nimages = "a.idx"\nlabels = "b.idx"\n')
    assert main(["datagen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_ablate_report_layout(tiny, tmp_path, capsys):
    cfg = _write(tmp_path, TINY + '[ablate]\nrows = ["Attack", "Ours"]\n', "ab.toml")
    out = tmp_path / "ab"
    assert main(["ablate", "--config", str(cfg), "--out", str(out), "--seed", "0,1"]) == 0
    with open(out / "report.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["row", "status", "n_seeds", "pristine_mean", "pristine_std",
                       "PGD20_mean", "PGD20_std", "zero_mean", "zero_std"]
    assert [r[0] for r in rows[1:]] == ["Attack", "Ours"]
    assert all(r[1] == "ok" and r[2] == "2" for r in rows[1:])
    assert (out / "ours" / "seed_1" / "metrics.jsonl").exists()
    md = capsys.readouterr().out
    assert md.startswith("| Method | Pristine | PGD20 | zero |")


def test_failed_cell_is_recorded(tiny, tmp_path, monkeypatch):
    real = experiment.run_one

    def flaky(cfg, seed, run_dir, row=None):
        if row == "Ours" and seed == 1:
            raise RuntimeError("boom")
        return real(cfg, seed, run_dir, row)

    monkeypatch.setattr(experiment, "run_one", flaky)
    cfg = _write(tmp_path, TINY + '[ablate]\nrows = ["Attack", "Ours"]\n', "ab.toml")
    out = tmp_path / "ab"
    assert main(["ablate", "--config", str(cfg), "--out", str(out), "--seed", "0,1"]) == 2
    report = json.loads((out / "report.json").read_text())
    ours = report["rows"][1]
    assert ours["status"] == "partial" and ours["seeds"] == [0]
    assert "boom" in ours["failures"][0]["error"]
    assert report["rows"][0]["status"] == "ok"


def test_report_of_all_failed_row():
    report = build_report(["Attack"], ["pristine"], [(0, "Attack", None, "boom")])
    assert report["rows"][0]["status"] == "failed"
    assert "failed" in markdown_table(report)
    assert report_header(["pristine"]) == ["row", "status", "n_seeds", "pristine_mean", "pristine_std"]


def test_attack_eval_and_corrupt_checkpoint(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny), "--out", str(out)]) == 0
    ckpt = out / "seed_0" / "model.ckpt"
    capsys.readouterr()
    assert main(["attack-eval", "--config", str(tiny), "--checkpoint", str(ckpt)]) == 0
    res = json.loads(capsys.readouterr().out)["accuracy"]
    assert res["zero"] == res["pristine"]
    assert res["PGD20"] <= res["pristine"]
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"JUNK" + ckpt.read_bytes()[4:])
    assert main(["attack-eval", "--config", str(tiny), "--checkpoint", str(bad)]) == 1
    assert "magic" in capsys.readouterr().err


def test_attack_eval_rejects_mismatched_dataset(tiny, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny), "--out", str(out)]) == 0
    other = _write(tmp_path, TINY.replace('n = 80', 'n = 80\nambient_dim = 3'), "other.toml")
    assert main(["attack-eval", "--config", str(other),
                 "--checkpoint", str(out / "seed_0" / "model.ckpt")]) == 1


def test_datagen_outputs(tmp_path):
    csv_cfg = _write(tmp_path, '[dataset]\nkind = "rings"\nn = 30\n', "r.toml")
    assert main(["datagen", "--config", str(csv_cfg), "--out", str(tmp_path / "o"), "--seed", "4"]) == 0
    assert (tmp_path / "o" / "rings_seed_4.csv").read_text().startswith("x0,x1,label\n")
    img_cfg = _write(tmp_path, '[dataset]\nkind = "digits"\n', "d.toml")
    assert main(["datagen", "--config", str(img_cfg), "--out", str(tmp_path / "d")]) == 0
    idx_cfg = _write(tmp_path, '[dataset]\nkind = "idx"\nimages = "d/digits_seed_0-images.idx"\n'
                               'labels = "d/digits_seed_0-labels.idx"\n', "i.toml")
    ds = load_config(idx_cfg).load_dataset(0)
    assert ds.inputs.shape == (1797, 1, 8, 8) and ds.class_count == 10


# -- gradient-check command ----------------------------------------------------------


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck", "--instances", "3"]) == 0
    assert "all checks passed" in capsys.readouterr().out


def test_gradcheck_detects_injected_fault(monkeypatch, capsys):
    real = Sigmoid.backward

    def broken(saved, grad):
        (g,) = real(saved, grad)
        return (g * 1.01,)

    monkeypatch.setattr(Sigmoid, "backward", staticmethod(broken))
    assert main(["gradcheck", "--instances", "3"]) == 3
    out = capsys.readouterr().out
    assert "failed:" in out and "sigmoid" in out


def test_gradcheck_covers_both_chains():
    names = {r.name for r in run_suite(instances=2)}
    assert {"chain:dloss/ddelta", "chain:dloss/dgamma", "sigmoid", "conv2d"} <= names
    assert all(np.isfinite(r.max_rel_error) for r in run_suite(instances=2, only=["matmul"]))
