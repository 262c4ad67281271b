import json

import pytest

from facealign.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from facealign.errors import DataError
from facealign.pipeline import RunConfig


def write_config(path, **kw):
    cfg = {
        "corpus": {"count": 24},
        "synth": {"coordinate_noise_sigma": 0.5},
        "train": {"T": 2, "K1": 4, "K2": 4, "depth": 2,
                  "candidates_per_node": 12, "shrinkage": 0.4, "Z": 5},
        "seed": 3,
    }
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig.from_file(None)
        assert cfg.init_mode == "3d"
        assert cfg.feature_mode == "heatmap"
        assert cfg.coarse_to_fine

    def test_file_then_overrides(self, tmp_path):
        p = write_config(tmp_path / "c.json", seed=11, init_mode="mean")
        cfg = RunConfig.from_file(p)
        assert cfg.seed == 11 and cfg.init_mode == "mean"
        cfg = RunConfig.from_file(p, {"seed": 99, "init_mode": None})
        assert cfg.seed == 99          # flag beats file
        assert cfg.init_mode == "mean"  # None override leaves file value

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"bogus": 1}))
        with pytest.raises(DataError):
            RunConfig.from_file(p)


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert run(["not-a-command"]) == EXIT_USAGE
        assert run([]) == EXIT_USAGE

    def test_help_is_success(self, capsys):
        assert run(["--help"]) == EXIT_OK

    def test_missing_dataset_is_data_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        rc = run(["train", "--config", str(cfg),
                  "--dataset", str(tmp_path / "nope.jsonl"),
                  "--out", str(tmp_path / "out")])
        assert rc == EXIT_DATA

    def test_train_without_dataset(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        rc = run(["train", "--config", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == EXIT_DATA


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Full synth -> train -> predict -> eval pass through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "c.json")
    out = d / "run"
    assert run(["synth", "--config", str(cfg), "--out", str(out),
                "--no-maps"]) == EXIT_OK
    ann = out / "annotations.jsonl"
    assert run(["train", "--config", str(cfg), "--dataset", str(ann),
                "--out", str(out)]) == EXIT_OK
    return d, cfg, out


class TestPipelineCommands:
    def test_synth_outputs(self, workdir):
        _, _, out = workdir
        lines = (out / "annotations.jsonl").read_text().strip().splitlines()
        assert len(lines) == 24
        assert json.loads((out / "manifest.json").read_text())["count"] == 24

    def test_train_outputs(self, workdir):
        _, _, out = workdir
        assert (out / "model.facm").exists()
        log = (out / "training_log.txt").read_text()
        # header echoes the boosting hyperparameters
        assert "T=2" in log and "K1=4" in log and "depth=2" in log
        assert "nu=0.4" in log and "eta=0.5" in log and "Z=5" in log
        assert "stage 0" in log

    def test_predict(self, workdir, capsys):
        _, cfg, out = workdir
        ann = out / "annotations.jsonl"
        rc = run(["predict", "--config", str(cfg), "--dataset", str(ann),
                  "--model", str(out / "model.facm"), "--out", str(out)])
        assert rc == EXIT_OK
        recs = [json.loads(l) for l in
                (out / "predictions.jsonl").read_text().splitlines()]
        assert len(recs) == 24
        assert len(recs[0]["coords"]) == 24

    def test_predict_requires_model_flag(self, workdir, capsys):
        _, cfg, out = workdir
        rc = run(["predict", "--config", str(cfg)])
        assert rc == EXIT_USAGE

    def test_eval(self, workdir, capsys):
        _, cfg, out = workdir
        ann = out / "annotations.jsonl"
        rc = run(["eval", "--config", str(cfg), "--dataset", str(ann),
                  "--model", str(out / "model.facm"), "--out", str(out),
                  "--epsilon", "8"])
        assert rc == EXIT_OK
        report = (out / "report.txt").read_text()
        assert "nme:" in report and "auc_8" in report
        ced = (out / "ced.txt").read_text().splitlines()
        assert len(ced) == 24
        captured = capsys.readouterr()
        assert "nme:" in captured.out

    def test_eval_report_rerun_identical(self, workdir, capsys):
        _, cfg, out = workdir
        ann = out / "annotations.jsonl"
        args = ["eval", "--config", str(cfg), "--dataset", str(ann),
                "--model", str(out / "model.facm"), "--out", str(out)]
        assert run(args) == EXIT_OK
        first = (out / "report.txt").read_bytes()
        assert run(args) == EXIT_OK
        assert (out / "report.txt").read_bytes() == first

    def test_train_with_file_maps(self, workdir, tmp_path):
        # maps read back from disk instead of synthesized on demand
        d, cfg, out = workdir
        out2 = tmp_path / "filemaps"
        assert run(["synth", "--config", str(cfg), "--out", str(out2)]) == EXIT_OK
        assert (out2 / "maps").exists()
        rc = run(["train", "--config", str(cfg),
                  "--dataset", str(out2 / "annotations.jsonl"),
                  "--maps-dir", str(out2 / "maps"),
                  "--out", str(out2)])
        assert rc == EXIT_OK
        assert (out2 / "model.facm").exists()
