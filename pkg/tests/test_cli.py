"""Command-line surface: exit codes, output layout and determinism."""

import json
import os
import subprocess
import sys

import pytest

from decompgail import evaluation as ev
from decompgail.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main

SMALL = {"world": {"n_scenarios": 12}, "train": {"batch": 2, "iterations": 1, "bc_steps": 3},
         "eval": {"rollouts": 1}}


def tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


@pytest.fixture(scope="module")
def pipeline(cfg_path, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    data, bc = str(root / "data"), str(root / "bc")
    assert main(["gen-data", "--config", cfg_path, "--seed", "1", "--out", data]) == EXIT_OK
    assert main(["pretrain-bc", "--config", cfg_path, "--seed", "1", "--data", data, "--out", bc]) == EXIT_OK
    return root, data, os.path.join(bc, "checkpoint")


class TestUsage:
    def test_eval_without_config(self, capsys):
        assert main(["eval"]) == EXIT_CONFIG
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, cfg_path, capsys):
        assert main(["gen-data", "--config", cfg_path, "--bogus"]) == EXIT_CONFIG
        assert "usage" in capsys.readouterr().err

    def test_help_is_success(self):
        assert main(["--help"]) == EXIT_OK

    def test_bad_config(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"train": {"gamma": 2}}')
        assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_missing_checkpoint(self, cfg_path, tmp_path):
        assert main(["eval", "--config", cfg_path, "--checkpoint", str(tmp_path / "nope"),
                     "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_bad_cap(self, cfg_path, pipeline, tmp_path):
        _, data, ckpt = pipeline
        assert main(["train-psgail", "--config", cfg_path, "--data", data, "--checkpoint", ckpt, "--cap", "x",
                     "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "decompgail", "eval"], capture_output=True, text=True)
        assert r.returncode == EXIT_CONFIG and "usage" in r.stderr


class TestPipeline:
    def test_gen_data_deterministic(self, cfg_path, tmp_path):
        for d in ("a", "b"):
            assert main(["gen-data", "--config", cfg_path, "--seed", "1", "--out", str(tmp_path / d)]) == EXIT_OK
        a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
        assert a == b and set(a) == {"scenarios.jsonl", "vocab.json", "demos.jsonl", "split.json"}

    def test_bc_outputs(self, pipeline):
        root = pipeline[0]
        log = ev.read_csv((root / "bc" / "bc_log.csv").read_text())
        assert [int(r["step"]) for r in log] == [0, 2]
        held = ev.read_csv((root / "bc" / "bc_heldout.csv").read_text())[0]
        assert 0 <= float(held["top1"]) <= 1

    @pytest.mark.parametrize("cmd,extra", [("train-decompgail", ["--variant", "no_scene"]),
                                           ("train-psgail", ["--cap", "5"])])
    def test_training(self, cfg_path, pipeline, tmp_path, cmd, extra):
        _, data, ckpt = pipeline
        assert main([cmd, "--config", cfg_path, "--data", data, "--checkpoint", ckpt, "--out", str(tmp_path)]
                    + extra) == EXIT_OK
        rows = ev.read_csv((tmp_path / "train_log.csv").read_text())
        assert len(rows) == 1
        assert (tmp_path / "checkpoint" / "manifest.json").exists()

    def test_divergence_exit(self, pipeline, tmp_path):
        _, data, ckpt = pipeline
        p = tmp_path / "div.json"
        p.write_text(json.dumps({**SMALL, "train": {**SMALL["train"], "divergence_logit": 1e-9}}))
        assert main(["train-decompgail", "--config", str(p), "--data", data, "--checkpoint", ckpt,
                     "--out", str(tmp_path)]) == EXIT_DIVERGED

    def test_eval_deterministic(self, cfg_path, pipeline, tmp_path):
        _, data, ckpt = pipeline
        for d in ("a", "b"):
            assert main(["eval", "--config", cfg_path, "--data", data, "--checkpoint", ckpt, "--rollouts", "2",
                         "--out", str(tmp_path / d)]) == EXIT_OK
        a = (tmp_path / "a" / "metrics.csv").read_text()
        assert a == (tmp_path / "b" / "metrics.csv").read_text()
        assert ev.MetricsReport.from_csv(a).rollouts == 2

    def test_stability_and_ablation(self, cfg_path, pipeline, tmp_path, capsys):
        _, data, ckpt = pipeline
        assert main(["stability", "--config", cfg_path, "--data", data, "--checkpoint", ckpt, "--iterations", "0",
                     "--out", str(tmp_path)]) == EXIT_OK
        assert "verdict" in capsys.readouterr().out
        summ = ev.read_csv((tmp_path / "stability_summary.csv").read_text())
        assert len(summ) == 4
        assert main(["ablation", "--config", cfg_path, "--data", data, "--checkpoint", ckpt, "--iterations", "0",
                     "--out", str(tmp_path)]) == EXIT_OK
        assert len(ev.read_ablation_csv((tmp_path / "ablation.csv").read_text())) == 7
        assert len(os.listdir(tmp_path / "checkpoints")) == 7
