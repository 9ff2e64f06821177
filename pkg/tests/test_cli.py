import json
from pathlib import Path

import numpy as np
import pytest

from fedsim import report
from fedsim.cli import main

CONFIG = {
    "data": {
        "source": {"kind": "synthetic", "classes": 4, "dims": 8, "examples": 600, "cluster_spread": 0.8},
        "partition": {"kind": "iid", "clients": 8},
    },
    "federation": {
        "sampled_clients": 4,
        "max_rounds": 10,
        "seed": 3,
        "server_optimizer": {"kind": "adam", "learning_rate": 0.01},
    },
    "strategy": {"kind": "softmax", "beta": 5.0},
    "eval": {"metric": "val_acc", "target": None},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(CONFIG))
    return path


class TestRunCommand:
    def test_run_writes_all_artifacts(self, tmp_path, config_path, capsys):
        out = tmp_path / "run1"
        assert main(["run", "--config", str(config_path), "--out", str(out)]) == 0
        for name in ("config.json", "metrics.jsonl", "checkpoint.json", "summary.json"):
            assert (out / name).exists(), name
        assert "run complete" in capsys.readouterr().out

        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 10
        first = json.loads(lines[0])
        assert list(first) == [
            "round", "clients", "weights", "client_losses",
            "val_loss", "val_acc", "weight_entropy", "wall_ms",
        ]

    def test_refuses_overwrite_without_force(self, tmp_path, config_path, capsys):
        out = tmp_path / "run1"
        assert main(["run", "--config", str(config_path), "--out", str(out)]) == 0
        assert main(["run", "--config", str(config_path), "--out", str(out)]) == 2
        assert "force" in capsys.readouterr().err
        assert main(["run", "--config", str(config_path), "--out", str(out), "--force"]) == 0

    def test_deterministic_reruns_byte_identical(self, tmp_path, config_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(config_path), "--out", str(a)])
        main(["run", "--config", str(config_path), "--out", str(b)])
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()

    def test_seed_override_changes_run(self, tmp_path, config_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(config_path), "--out", str(a)])
        main(["run", "--config", str(config_path), "--out", str(b), "--seed", "99"])
        assert (a / "metrics.jsonl").read_bytes() != (b / "metrics.jsonl").read_bytes()
        assert json.loads((b / "summary.json").read_text())["seed"] == 99

    def test_early_stop_with_target(self, tmp_path):
        cfg = dict(CONFIG)
        cfg["eval"] = {"metric": "val_acc", "target": 0.8}
        cfg["federation"] = dict(CONFIG["federation"], max_rounds=60)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        assert main(["run", "--config", str(path), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["rounds_to_target"] == summary["rounds_completed"]
        assert summary["early_stopped"] is True

    def test_no_output_dir_is_error(self, config_path, capsys):
        assert main(["run", "--config", str(config_path)]) == 2
        assert "output" in capsys.readouterr().err

    def test_config_error_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
        assert "error" in capsys.readouterr().err

    def test_rl_run_writes_agent_checkpoint(self, tmp_path, config_path):
        cfg = dict(CONFIG)
        cfg["strategy"] = {"kind": "rl"}
        cfg["federation"] = dict(CONFIG["federation"], max_rounds=3)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = tmp_path / "rl"
        assert main(["run", "--config", str(path), "--out", str(out)]) == 0
        agent = json.loads((out / "agent_checkpoint.json").read_text())
        assert agent["architecture"]["layer_dims"][0] == 3 * 4
        assert agent["optimizer"]["t"] == 3

    def test_summary_recomputable_from_jsonl(self, tmp_path, config_path):
        out = tmp_path / "run"
        main(["run", "--config", str(config_path), "--out", str(out)])
        summary = json.loads((out / "summary.json").read_text())
        history = report.load_history(out)
        assert summary["rounds_completed"] == len(history)
        assert summary["final_val_acc"] == history[-1].val_acc
        assert summary["final_val_loss"] == history[-1].val_loss
        assert summary["best_val_acc"] == max(m.val_acc for m in history)
        assert summary["wall_ms_total"] == sum(m.wall_ms for m in history)


class TestPartitionCommand:
    def test_manifest_covers_training_split(self, tmp_path, config_path, capsys):
        manifest_path = tmp_path / "manifest.json"
        assert main(["partition", "--config", str(config_path), "--manifest", str(manifest_path)]) == 0
        manifest = json.loads(manifest_path.read_text())
        assert len(manifest) == 8
        all_idx = np.concatenate([np.asarray(v) for v in manifest.values()])
        assert len(np.unique(all_idx)) == len(all_idx)  # disjoint
        # 600 examples minus 10% validation and 10% rehearsal
        assert len(all_idx) == 480
        assert "8 clients" in capsys.readouterr().out

    def test_manifest_is_reproducible(self, tmp_path, config_path):
        p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
        main(["partition", "--config", str(config_path), "--manifest", str(p1)])
        main(["partition", "--config", str(config_path), "--manifest", str(p2)])
        assert p1.read_bytes() == p2.read_bytes()


class TestCompareCommand:
    def test_compare_two_runs(self, tmp_path, config_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(config_path), "--out", str(a), "--label", "one"])
        main(["run", "--config", str(config_path), "--out", str(b), "--label", "two", "--seed", "9"])
        out = tmp_path / "cmp"
        code = main([
            "compare", str(a), str(b),
            "--metric", "val_acc", "--target", "0.5", "--out", str(out),
        ])
        assert code == 0
        for name in ("comparison.csv", "speedups.csv", "curves.csv", "convergence.png"):
            assert (out / name).exists(), name
        text = capsys.readouterr().out
        assert "one" in text and "two" in text

    def test_compare_missing_dir_fails(self, tmp_path, config_path, capsys):
        a = tmp_path / "a"
        main(["run", "--config", str(config_path), "--out", str(a)])
        assert main(["compare", str(a), str(tmp_path / "ghost"), "--target", "0.5"]) == 1
        assert "ghost" in capsys.readouterr().err

    def test_no_figure_flag(self, tmp_path, config_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", "--config", str(config_path), "--out", str(a)])
        main(["run", "--config", str(config_path), "--out", str(b), "--seed", "5"])
        out = tmp_path / "cmp"
        main(["compare", str(a), str(b), "--target", "0.5", "--out", str(out), "--no-figure"])
        assert not (out / "convergence.png").exists()
        assert (out / "comparison.csv").exists()


class TestWorkersFlag:
    def test_worker_override_keeps_bytes_identical(self, tmp_path, config_path):
        outs = []
        for w in (1, 4):
            out = tmp_path / f"w{w}"
            main(["run", "--config", str(config_path), "--out", str(out), "--workers", str(w)])
            outs.append((out / "metrics.jsonl").read_bytes())
        assert outs[0] == outs[1]
