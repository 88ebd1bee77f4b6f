import json

import jsonschema
import numpy as np
import pytest

from med2n.cli import main
from med2n.config import load_config
from med2n.pipeline import GATE_STATS_SCHEMA, MetricsLog, Workspace


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["pipeline", "--profile", "smoke", "--seed", "0", "--out", str(out)]) == 0
    return out


def test_pipeline_artifacts(run_dir):
    ws = Workspace(run_dir)
    for name in ("pretrain", "st_teacher", "tt_teacher", "m_base", "student_me", "student"):
        assert ws.checkpoint(name).exists()
    for fig in ("results.png", "gate_stats.png", "activations.png", "loss_student.png"):
        assert (run_dir / "figures" / fig).stat().st_size > 0
    summary = json.loads((run_dir / "summary.json").read_text())
    assert {"student.target_test.both", "m_base.target_test.std", "student_me.source_test.std"} <= set(summary)


def test_metrics_one_line_per_epoch(run_dir):
    cfg = load_config(profile="smoke").train
    ws = Workspace(run_dir)
    expected = {"pretrain": cfg.pretrain_epochs, "st_teacher": cfg.teacher_epochs, "tt_teacher": cfg.teacher_epochs,
                "m_base": cfg.mbase_epochs, "student": cfg.student_epochs}
    for stage, n in expected.items():
        records = MetricsLog.read(ws, stage)
        assert [r["epoch"] for r in records] == list(range(n))
        assert all(set(r) == {"stage", "epoch", "losses"} for r in records)


def test_results_document(run_dir):
    doc = json.loads((run_dir / "results.json").read_text())
    assert doc["format"] == "med2n-results/1"
    keys = [(r["split"], r["strategy"]) for r in doc["reports"]]
    assert keys == [("target_test", "std"), ("target_test", "dsg"), ("target_test", "both"), ("source_test", "both")]
    for r in doc["reports"]:
        assert r["mean_accuracy"] == pytest.approx(np.mean(r["accuracies"]))


def test_gate_stats_document(run_dir):
    doc = json.loads((run_dir / "gate_stats.json").read_text())
    jsonschema.validate(doc, GATE_STATS_SCHEMA)
    for b in doc["blocks"]:
        assert b["source_count"] + b["target_count"] == b["total"]


def test_activation_maps(run_dir):
    doc = json.loads((run_dir / "activations" / "activations.json").read_text())
    cfg = load_config(profile="smoke")
    side = cfg.data.image_size // 2 ** (doc["block"] - 1)  # post-gate, pre-pool
    for dom in ("source", "target"):
        grid = np.load(run_dir / "activations" / doc["maps"][dom]["npy"])
        assert grid.shape == (side, side)
        assert grid.min() >= 0 and grid.max() <= 1
        pgm = (run_dir / "activations" / doc["maps"][dom]["pgm"]).read_bytes()
        assert pgm.startswith(f"P5\n{side} {side}\n255\n".encode())


def test_eval_and_gate_stats_are_repeatable(run_dir, capsys):
    before = (run_dir / "results.json").read_bytes()
    assert main(["eval", "--profile", "smoke", "--seed", "0", "--out", str(run_dir)]) == 0
    assert (run_dir / "results.json").read_bytes() == before
    capsys.readouterr()
    assert main(["gate-stats", "--profile", "smoke", "--seed", "0", "--out", str(run_dir)]) == 0
    blocks = json.loads(capsys.readouterr().out)
    assert blocks == json.loads((run_dir / "gate_stats.json").read_text())["blocks"]


def test_mbase_rejects_dsg(run_dir, capsys):
    code = main(["eval", "--profile", "smoke", "--seed", "0", "--out", str(run_dir), "--checkpoint", "m_base",
                 "--strategy", "dsg"])
    assert code == 2 and "gate matrix" in capsys.readouterr().err


def test_student_needs_teachers(tmp_path, capsys):
    code = main(["train-student", "--profile", "smoke", "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == 3
    assert "teacher checkpoint required" in err and "train-teacher --domain source" in err


def test_bad_override_exit_code(tmp_path, capsys):
    assert main(["pretrain", "--profile", "smoke", "--out", str(tmp_path), "--set", "train.lr=-1"]) == 2
    assert "lr" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path, capsys):
    code = main(["pretrain", "--profile", "smoke", "--out", str(tmp_path), "--set", "train.lr=1e30"])
    assert code == 4 and "non-finite" in capsys.readouterr().err


def test_stages_are_deterministic(tmp_path):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        args = ["--profile", "smoke", "--seed", "5", "--out", str(out)]
        assert main(["pretrain", *args]) == 0
        assert main(["train-teacher", "--domain", "source", *args]) == 0
        outs.append(out)
    for stage in ("pretrain", "st_teacher"):
        a = (outs[0] / "metrics" / f"{stage}.jsonl").read_bytes()
        assert a == (outs[1] / "metrics" / f"{stage}.jsonl").read_bytes()
    ck = "checkpoints/st_teacher.ckpt"
    assert (outs[0] / ck).read_bytes() == (outs[1] / ck).read_bytes()


def test_gen_data(tmp_path):
    assert main(["gen-data", "--profile", "smoke", "--out", str(tmp_path)]) == 0
    assert any((tmp_path / "data").iterdir())
