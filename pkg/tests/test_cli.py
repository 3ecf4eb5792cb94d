"""End-to-end subcommand flows against tiny generated cohorts."""

import json
import os

import pytest

from aicare.cli import main
from aicare.synthetic import pd_default_spec, write_spec


def cohort_args(d):
    return ["--visits", os.path.join(d, "visits.csv"),
            "--baseline", os.path.join(d, "baseline.csv"),
            "--outcomes", os.path.join(d, "outcomes.csv")]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("cohort"))
    code = main(["generate", "--out", d, "--preset", "separable",
                 "--patients", "30", "--seed", "3"])
    assert code == 0
    return d


@pytest.fixture(scope="module")
def cv_model_dir(tmp_path_factory, data_dir):
    d = str(tmp_path_factory.mktemp("cv_model"))
    code = main(["train", *cohort_args(data_dir), "--out", d,
                 "--folds", "2", "--epochs", "2", "--batch-size", "16",
                 "--hidden", "6", "--seed", "0"])
    assert code == 0
    return d


@pytest.fixture(scope="module")
def single_model_dir(tmp_path_factory, data_dir):
    d = str(tmp_path_factory.mktemp("single_model"))
    code = main(["train", *cohort_args(data_dir), "--out", d,
                 "--folds", "1", "--epochs", "2", "--batch-size", "16",
                 "--hidden", "6", "--seed", "0"])
    assert code == 0
    return d


class TestGenerate:
    def test_writes_cohort_files_and_truth(self, data_dir, capsys):
        for name in ("visits.csv", "baseline.csv", "outcomes.csv",
                     "spec.json", "truth.json"):
            assert os.path.exists(os.path.join(data_dir, name))
        with open(os.path.join(data_dir, "truth.json")) as fh:
            truth = json.load(fh)
        assert truth["stats"]["num_patients"] == 30

    def test_same_seed_is_byte_identical(self, tmp_path, capsys):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert main(["generate", "--out", out, "--preset", "separable",
                         "--patients", "12", "--seed", "9"]) == 0
        for name in ("visits.csv", "baseline.csv", "outcomes.csv", "truth.json"):
            with open(os.path.join(a, name), "rb") as fa, \
                 open(os.path.join(b, name), "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_seed_env_fallback(self, tmp_path, monkeypatch, capsys):
        flagged, via_env = str(tmp_path / "flag"), str(tmp_path / "env")
        assert main(["generate", "--out", flagged, "--preset", "separable",
                     "--patients", "10", "--seed", "7"]) == 0
        monkeypatch.setenv("AICARE_SEED", "7")
        assert main(["generate", "--out", via_env, "--preset", "separable",
                     "--patients", "10"]) == 0
        with open(os.path.join(flagged, "visits.csv"), "rb") as fa, \
             open(os.path.join(via_env, "visits.csv"), "rb") as fb:
            assert fa.read() == fb.read()

    def test_bad_seed_env_is_config_error(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("AICARE_SEED", "many")
        code = main(["generate", "--out", str(tmp_path / "x"),
                     "--preset", "separable", "--patients", "10"])
        assert code == 4
        assert "error:" in capsys.readouterr().err

    def test_custom_spec_file(self, tmp_path, capsys):
        spec_path = tmp_path / "myspec.json"
        write_spec(spec_path, pd_default_spec(8))
        out = str(tmp_path / "fromspec")
        assert main(["generate", "--out", out, "--spec", str(spec_path),
                     "--seed", "1"]) == 0
        with open(os.path.join(out, "truth.json")) as fh:
            assert json.load(fh)["stats"]["num_patients"] == 8


class TestTrain:
    def test_single_fold_writes_checkpoint_and_note(self, single_model_dir):
        assert os.path.exists(os.path.join(single_model_dir, "fold_0",
                                           "checkpoint.json"))
        assert os.path.exists(os.path.join(single_model_dir, "fold_0",
                                           "history.jsonl"))
        with open(os.path.join(single_model_dir, "metrics.json")) as fh:
            metrics = json.load(fh)
        assert metrics["mode"] == "single"
        assert metrics["auroc"] is None

    def test_cross_validation_reports_fold_metrics(self, cv_model_dir, capsys):
        with open(os.path.join(cv_model_dir, "metrics.json")) as fh:
            metrics = json.load(fh)
        assert metrics["mode"] == "cross_validation"
        assert len(metrics["folds"]) == 2
        assert "display" in metrics["summary"]["auroc"]
        assert "by_cause" in metrics
        with open(os.path.join(cv_model_dir, "foldplan.json")) as fh:
            plan = json.load(fh)
        assert sorted(pid for fold in plan["folds"] for pid in fold)

    def test_unknown_config_key_is_config_error(self, tmp_path, data_dir, capsys):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"max_epochs": 1, "optimizer": "sgd"}))
        code = main(["train", *cohort_args(data_dir),
                     "--out", str(tmp_path / "m"), "--config", str(cfg)])
        assert code == 4
        assert "optimizer" in capsys.readouterr().err

    def test_malformed_config_is_parse_error(self, tmp_path, data_dir, capsys):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{not json")
        code = main(["train", *cohort_args(data_dir),
                     "--out", str(tmp_path / "m"), "--config", str(cfg)])
        assert code == 3

    def test_config_file_with_flag_overrides(self, tmp_path, data_dir, capsys):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"max_epochs": 50, "batch_size": 16,
                                   "hidden_size": 6, "num_folds": 1}))
        out = str(tmp_path / "m")
        code = main(["train", *cohort_args(data_dir), "--out", out,
                     "--config", str(cfg), "--epochs", "1"])
        assert code == 0
        with open(os.path.join(out, "config.json")) as fh:
            saved = json.load(fh)
        assert saved["train"]["max_epochs"] == 1
        assert saved["train"]["hidden_size"] == 6


class TestEvaluate:
    def test_writes_metrics_for_cv_model(self, tmp_path, data_dir,
                                         cv_model_dir, capsys):
        out = str(tmp_path / "metrics.json")
        code = main(["evaluate", "--model", cv_model_dir,
                     *cohort_args(data_dir), "--out", out])
        assert code == 0
        with open(out) as fh:
            metrics = json.load(fh)
        assert metrics["mode"] == "evaluate"
        assert metrics["summary"]["folds_evaluated"] >= 1
        assert len(metrics["folds"]) == 2

    def test_single_model_is_rejected(self, data_dir, single_model_dir, capsys):
        code = main(["evaluate", "--model", single_model_dir,
                     *cohort_args(data_dir)])
        assert code == 4
        assert "cross-validated" in capsys.readouterr().err

    def test_foldplan_against_wrong_cohort_is_integrity_error(
            self, tmp_path, cv_model_dir, capsys):
        other = str(tmp_path / "smaller")
        assert main(["generate", "--out", other, "--preset", "separable",
                     "--patients", "10", "--seed", "3"]) == 0
        code = main(["evaluate", "--model", cv_model_dir, *cohort_args(other)])
        assert code == 5
        assert "absent from the" in capsys.readouterr().err

    def test_missing_model_dir_is_config_error(self, tmp_path, data_dir, capsys):
        code = main(["evaluate", "--model", str(tmp_path / "ghost"),
                     *cohort_args(data_dir)])
        assert code == 4


class TestInterpret:
    def test_writes_all_artifacts(self, tmp_path, data_dir, cv_model_dir, capsys):
        out = str(tmp_path / "artifacts")
        code = main(["interpret", "--model", cv_model_dir,
                     *cohort_args(data_dir), "--out", out, "--bins", "10"])
        assert code == 0
        for name in ("importance.csv", "curves.json", "heatmap.json",
                     "report.txt"):
            assert os.path.exists(os.path.join(out, name))
        with open(os.path.join(out, "curves.json")) as fh:
            curves = json.load(fh)
        assert set(curves) == {"marker", "noise_a", "noise_b"}
        for entry in curves.values():
            assert "shape" in entry and "recommendation" in entry
        stdout = capsys.readouterr().out
        assert "marker" in stdout

    def test_single_model_uses_whole_cohort(self, tmp_path, data_dir,
                                            single_model_dir, capsys):
        out = str(tmp_path / "artifacts")
        code = main(["interpret", "--model", single_model_dir,
                     *cohort_args(data_dir), "--out", out, "--bins", "10"])
        assert code == 0
        assert os.path.exists(os.path.join(out, "curves.json"))


class TestPredict:
    def test_single_patient_risks(self, data_dir, single_model_dir, capsys):
        ckpt = os.path.join(single_model_dir, "fold_0", "checkpoint.json")
        code = main(["predict", "--checkpoint", ckpt, *cohort_args(data_dir),
                     "--patient", "S0001"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert len(out["patients"]) == 1
        assert out["patients"][0]["patient_id"] == "S0001"
        for visit in out["patients"][0]["visits"]:
            assert 0.0 <= visit["risk"] <= 1.0

    def test_unknown_patient_is_config_error(self, data_dir, single_model_dir,
                                             capsys):
        ckpt = os.path.join(single_model_dir, "fold_0", "checkpoint.json")
        code = main(["predict", "--checkpoint", ckpt, *cohort_args(data_dir),
                     "--patient", "nope"])
        assert code == 4

    def test_whole_cohort_to_file(self, tmp_path, data_dir, single_model_dir,
                                  capsys):
        ckpt = os.path.join(single_model_dir, "fold_0", "checkpoint.json")
        out = str(tmp_path / "preds.json")
        code = main(["predict", "--checkpoint", ckpt, *cohort_args(data_dir),
                     "--out", out])
        assert code == 0
        with open(out) as fh:
            preds = json.load(fh)
        assert len(preds["patients"]) == 30


class TestErrors:
    def test_missing_input_file_is_io_error(self, tmp_path, capsys):
        code = main(["train", "--visits", str(tmp_path / "no.csv"),
                     "--baseline", str(tmp_path / "no2.csv"),
                     "--outcomes", str(tmp_path / "no3.csv"),
                     "--out", str(tmp_path / "m"), "--folds", "1",
                     "--epochs", "1"])
        assert code == 6
        assert "io error" in capsys.readouterr().err

    def test_usage_error_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["generate"])  # --out is required
        assert exc.value.code == 2
