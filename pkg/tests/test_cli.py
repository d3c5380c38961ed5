"""Command-line behavior: determinism, exit codes, validation."""

import json

import numpy as np
import pytest

from mvcl.cli import main
from mvcl.verification import CHECK_NAMES, CheckResult, format_check_table, run_gradient_checks


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps({
        "synth": {"train_samples": 64, "val_samples": 16, "test_samples": 16},
        "stages": {"stage1": {"epochs": 1}, "stage2": {"epochs": 1},
                   "stage3": {"epochs": 1}, "classifier": {"epochs": 2}},
    }))
    return str(path)


@pytest.fixture(scope="module")
def synth_dir(config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main(["synth", "--config", config_file, "--seed", "9", "--out", str(out)])
    assert rc == 0
    return out


class TestSynth:
    def test_same_seed_identical_bytes(self, config_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--config", config_file, "--seed", "3", "--out", str(a)]) == 0
        assert main(["synth", "--config", config_file, "--seed", "3", "--out", str(b)]) == 0
        for name in ("train.mvcl", "val.mvcl", "test.mvcl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_output_is_readable(self, synth_dir):
        from mvcl.data import read_dataset
        header, records = read_dataset(synth_dir / "train.mvcl")
        assert header.n == len(records) == 64

    def test_invalid_class_count_fails_before_writing(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"synth": {"classes": 1}}))
        out = tmp_path / "never"
        with pytest.raises(SystemExit) as err:
            main(["synth", "--config", str(cfg), "--out", str(out)])
        assert err.value.code == 2
        assert not out.exists()

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"surprise": 1}))
        with pytest.raises(SystemExit) as err:
            main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")])
        assert err.value.code == 2


class TestTrainEval:
    @pytest.fixture()
    def trained(self, config_file, synth_dir, tmp_path):
        return config_file, synth_dir, tmp_path / "run"

    def run_train(self, config_file, synth_dir, out, capsys, seed="9"):
        rc = main(["train", "--config", config_file, "--seed", seed,
                   "--dataset", str(synth_dir), "--out", str(out)])
        captured = capsys.readouterr()
        assert rc == 0
        return [line for line in captured.out.splitlines() if line.startswith("{")][-1]

    def test_train_is_deterministic_and_eval_matches(self, trained, capsys, tmp_path):
        config_file, synth_dir, out = trained
        line1 = self.run_train(config_file, synth_dir, out, capsys)
        line2 = self.run_train(config_file, synth_dir, tmp_path / "rerun", capsys)
        assert line1 == line2
        payload = json.loads(line1)
        assert set(payload) >= {"acc2", "f1", "mae", "corr", "seed", "preset"}

        rc = main(["eval", "--config", config_file, "--seed", "9",
                   "--dataset", str(synth_dir / "test.mvcl"),
                   "--checkpoint", str(out / "final.mvck")])
        eval_line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("{")][-1]
        assert rc == 0
        for key in ("acc2", "f1", "mae", "corr"):
            assert json.loads(eval_line)[key] == payload[key]

    def test_eval_is_pure(self, trained, capsys):
        config_file, synth_dir, out = trained
        self.run_train(config_file, synth_dir, out, capsys)
        args = ["eval", "--config", config_file, "--dataset",
                str(synth_dir / "test.mvcl"), "--checkpoint", str(out / "final.mvck")]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        second = capsys.readouterr().out
        assert first == second

    def test_staged_training_requires_prior_checkpoint(self, config_file, synth_dir,
                                                       tmp_path, capsys):
        rc = main(["train", "--config", config_file, "--dataset", str(synth_dir),
                   "--out", str(tmp_path), "--stage", "2"])
        assert rc == 1
        assert "stage" in capsys.readouterr().err

    def test_missing_dataset_is_a_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["train"])
        assert err.value.code == 2

    def test_runtime_failure_is_exit_one(self, capsys):
        assert main(["train", "--dataset", "/nonexistent", "--out", "/tmp/mvcl-x"]) == 1
        assert "error" in capsys.readouterr().err

    def test_eval_rejects_mismatched_checkpoint(self, trained, capsys, tmp_path):
        config_file, synth_dir, out = trained
        self.run_train(config_file, synth_dir, out, capsys)
        cfg = tmp_path / "other.json"
        cfg.write_text(json.dumps({"model": {"model_dim": 32, "proj_dim": 16,
                                             "classifier_hidden": 32}}))
        rc = main(["eval", "--config", str(cfg), "--dataset",
                   str(synth_dir / "test.mvcl"), "--checkpoint", str(out / "final.mvck")])
        assert rc == 1
        assert "config" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_table_lists_every_check_once(self):
        results = [CheckResult(name, 1e-9, 0.0, 1e-4) for name in CHECK_NAMES]
        table = format_check_table(results)
        for name in CHECK_NAMES:
            assert sum(line.split()[0] == name for line in table.splitlines()) == 1
        losses = {"supcon_loss", "pairwise_sscl_loss", "sscl_total", "ce_loss", "mse_loss"}
        assert losses <= set(CHECK_NAMES)

    def test_fault_injection_fails_exactly_that_check(self):
        results = run_gradient_checks(0, seeds=1, _corrupt="ce_loss")
        by_name = {r.name: r for r in results}
        assert not by_name["ce_loss"].passed
        assert by_name["mse_loss"].passed
