import json
import os

import pytest
import yaml

from main import main
from run_recorder import read_jsonl
from tensor import set_default_dtype

TINY_CONFIG = """\
num_domains: 3
num_classes: 3
samples_per_class: 10
image_size: 8
block_channels: [4]
rounds: 2
batch_size: 8
holdout: [2]
adapt_epochs: 1
checkpoint_every: 1
"""


@pytest.fixture(autouse=True)
def _restore_dtype():
    yield
    set_default_dtype("float32")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.yaml"
    config.write_text(TINY_CONFIG)
    data = root / "data"
    assert main(["-q", "generate", "--config", str(config), "--output", str(data)]) == 0
    runs = {}
    for method in ("fdse", "fedavg"):
        runs[method] = root / method
        argv = ["-q", "train", "--config", str(config), "--dataset", str(data),
                "--method", method, "--output", str(runs[method])]
        assert main(argv) == 0
    return {"root": root, "config": config, "data": data, "runs": runs}


class TestGenerate:
    def test_dataset_layout(self, workspace):
        manifest = json.loads((workspace["data"] / "dataset.json").read_text())
        assert manifest["domains"] == [0, 1, 2]
        assert manifest["feature_shape"] == [1, 8, 8]
        assert (workspace["data"] / "domain_2" / "test.bin").exists()

    def test_resolved_settings_are_written_next_to_the_dataset(self, workspace):
        values = yaml.safe_load((workspace["data"] / "config.yaml").read_text())
        assert values["num_domains"] == 3 and values["image_size"] == 8
        assert "consensus_granularity" in values

    def test_refuses_to_overwrite(self, workspace):
        argv = ["-q", "generate", "--config", str(workspace["config"]), "--output", str(workspace["data"])]
        assert main(argv) == 3

    def test_unknown_config_key(self, tmp_path):
        config = tmp_path / "bad.yaml"
        config.write_text("learning_rate: 0.1\n")
        assert main(["-q", "generate", "--config", str(config), "--output", str(tmp_path / "d")]) == 2

    def test_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FDSE_OUTPUT_ROOT", str(tmp_path))
        assert main(["-q", "generate", "--domains", "1", "--output", "rel/data"]) == 0
        assert (tmp_path / "rel" / "data" / "dataset.json").exists()


@pytest.mark.slow
class TestTrain:
    def test_run_directory(self, workspace):
        run = workspace["runs"]["fdse"]
        summary = json.loads((run / "summary.json").read_text())
        assert summary["method"] == "fdse" and summary["completed"]
        assert summary["domains"] == [0, 1]
        assert [r["round"] for r in read_jsonl(str(run / "metrics.jsonl"))] == [0, 1, 2]
        assert (run / "config.yaml").exists()
        assert (run / "best" / "state.json").exists()
        assert (run / "checkpoints" / "round_2" / "state.bin").exists()

    def test_resume_of_a_finished_run_adds_nothing(self, workspace):
        run = workspace["runs"]["fedavg"]
        assert main(["-q", "train", "--resume", str(run)]) == 0
        assert [r["round"] for r in read_jsonl(str(run / "metrics.jsonl"))] == [0, 1, 2]

    def test_resume_without_checkpoints(self, tmp_path, workspace):
        (tmp_path / "config.yaml").write_text((workspace["runs"]["fdse"] / "config.yaml").read_text())
        assert main(["-q", "train", "--resume", str(tmp_path)]) == 4

    def test_missing_dataset(self, tmp_path, workspace):
        argv = ["-q", "train", "--config", str(workspace["config"]), "--dataset", str(tmp_path / "none"),
                "--output", str(tmp_path / "run")]
        assert main(argv) == 3


@pytest.mark.slow
class TestAdaptAndReport:
    def test_adapt_to_the_held_out_domain(self, workspace):
        run = workspace["runs"]["fdse"]
        assert main(["-q", "adapt", str(run), "--target", "2"]) == 0
        result = json.loads((run / "adapt_2.json").read_text())
        assert result["method"] == "fdse" and result["epochs"] == 1
        assert len(result["con_trace"]) == 2
        assert result["con_trace"][1] <= result["con_trace"][0]
        settings = yaml.safe_load((run / "adapt_2.yaml").read_text())
        train_settings = yaml.safe_load((run / "config.yaml").read_text())
        assert settings["adapt_epochs"] == 1
        assert settings["beta"] == train_settings["beta"]
        assert settings["clip_norm"] == train_settings["clip_norm"]

    def test_unknown_target(self, workspace):
        assert main(["-q", "adapt", str(workspace["runs"]["fdse"]), "--target", "9"]) == 3

    def test_method_mismatch(self, workspace):
        assert main(["-q", "adapt", str(workspace["runs"]["fdse"]), "--target", "2", "--method", "fedbn"]) == 4

    def test_report(self, workspace, capsys):
        out = workspace["root"] / "report"
        argv = ["-q", "report", str(workspace["runs"]["fdse"]), str(workspace["runs"]["fedavg"]),
                "--output", str(out)]
        assert main(argv) == 0
        printed = capsys.readouterr().out
        assert "fdse" in printed and "fedavg" in printed and "mean AVG" in printed
        rows = json.loads((out / "report.json").read_text())["rows"]
        assert [r["method"] for r in rows] == ["fdse", "fedavg"]
        assert os.path.exists(out / "per_domain_series.csv")


class TestSurface:
    def test_show_config(self, capsys):
        assert main(["--show-config"]) == 0
        assert "consensus_granularity" in capsys.readouterr().out

    def test_no_command_prints_help(self, capsys):
        assert main([]) == 0
        assert "generate" in capsys.readouterr().out
