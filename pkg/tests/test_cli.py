import json

import numpy as np
import pytest

from bridgeforge import cli


def run(args):
    return cli.main(args)


@pytest.fixture()
def ou_small(tmp_path):
    cfg = {
        "scenario": "ou",
        "seed": 7,
        "out_dir": str(tmp_path / "run"),
        "data": {"n_train": 48, "n_val": 16},
        "train": {
            "batch_size": 16,
            "max_epochs": 0,
            "sinkhorn": {"epsilon": 0.5, "train_iters": 20},
        },
        "metrics": {"mdd_repeats": 2, "mdd_samples": 40, "eval_points": 5,
                    "cdd_initial": 4, "cdd_traj": 3},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, tmp_path / "run"


class TestGenerate:
    def test_deterministic_outputs(self, tmp_path):
        for sub in ("a", "b"):
            code = run(["--scenario", "ou", "--seed", "7",
                        "--out-dir", str(tmp_path / sub), "generate"])
            assert code == 0
        a = (tmp_path / "a" / "snapshots.csv").read_bytes()
        b = (tmp_path / "b" / "snapshots.csv").read_bytes()
        assert a == b

    def test_ou_group_sizes(self, tmp_path):
        out = tmp_path / "ou"
        assert run(["--scenario", "ou", "--seed", "1", "--out-dir", str(out),
                    "generate"]) == 0
        lines = (out / "snapshots.csv").read_text().strip().splitlines()[1:]
        trains = [ln for ln in lines if ln.split(",")[1] == "train"]
        by_time = {}
        for ln in trains:
            by_time.setdefault(ln.split(",")[0], 0)
            by_time[ln.split(",")[0]] += 1
        assert set(by_time) == {"0", "1", "2", "3", "4"}
        assert all(v == 2048 for v in by_time.values())
        assert (out / "oracle_trajectories.jsonl").exists()

    def test_box_scenario_two_snapshots(self, tmp_path):
        out = tmp_path / "box"
        assert run(["--scenario", "box", "--seed", "2", "--out-dir", str(out),
                    "generate"]) == 0
        lines = (out / "snapshots.csv").read_text().strip().splitlines()[1:]
        assert {ln.split(",")[0] for ln in lines} == {"0", "1"}

    def test_config_echo(self, tmp_path):
        out = tmp_path / "echo"
        run(["--scenario", "hill", "--out-dir", str(out), "generate"])
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["scenario"] == "hill"


class TestConfigHandling:
    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"scenario": "ou", "typo_key": 1}))
        assert run(["--config", str(bad), "generate"]) == cli.EXIT_CONFIG

    def test_nested_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        assert run(["--config", str(bad), "generate"]) == cli.EXIT_CONFIG

    def test_unknown_scenario_exit_code(self, tmp_path):
        assert run(["--scenario", "maze", "--out-dir", str(tmp_path / "x"),
                    "generate"]) == cli.EXIT_CONFIG

    def test_io_failure_exit_code(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("file, not a directory")
        code = run(["--scenario", "ou", "--out-dir", str(blocker / "nested"),
                    "generate"])
        assert code == cli.EXIT_IO

    def test_threads_env_mirror(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "3")
        cfg = cli.load_config(None)
        assert cfg["threads"] == 3


class TestTrainEval:
    def test_zero_epoch_train_and_eval(self, ou_small):
        config_path, out = ou_small
        assert run(["--config", str(config_path), "train"]) == 0
        ckpt_path = out / "checkpoint.json"
        assert ckpt_path.exists()
        payload = json.loads(ckpt_path.read_text())
        assert payload["version"]
        assert "potential" in payload and "diffusion" in payload
        assert (out / "training_log.csv").exists()
        assert run(["--config", str(config_path), "eval",
                    "--checkpoint", str(ckpt_path)]) == 0
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "metric,time,mean,std,n_runs"
        assert any(ln.startswith("mdd,") for ln in metrics[1:])
        assert any(ln.startswith("cdd,") for ln in metrics[1:])

    def test_lambda_flag_override(self, ou_small):
        config_path, out = ou_small
        assert run(["--config", str(config_path), "train",
                    "--lambda-e", "0", "--lambda-h", "0"]) == 0
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["train"]["lambda_e"] == 0.0

    def test_eval_dimension_mismatch(self, ou_small, tmp_path):
        config_path, out = ou_small
        run(["--config", str(config_path), "train"])
        code = run(["--config", str(config_path), "--scenario", "box", "eval",
                    "--checkpoint", str(out / "checkpoint.json")])
        assert code == cli.EXIT_CONFIG

    def test_exclude_time_drops_snapshot(self, ou_small):
        config_path, out = ou_small
        assert run(["--config", str(config_path), "train",
                    "--exclude-time", "2"]) == 0
        ckpt = json.loads((out / "checkpoint.json").read_text())
        assert len(ckpt["config"]["grid"]) == 4
        assert 2.0 not in ckpt["config"]["grid"]

    def test_cdd_between_two_checkpoints(self, ou_small, tmp_path):
        config_path, out = ou_small
        run(["--config", str(config_path), "train"])
        other = tmp_path / "other"
        run(["--config", str(config_path), "--seed", "8",
             "--out-dir", str(other), "train"])
        assert run(["--config", str(config_path), "eval",
                    "--checkpoint", str(out / "checkpoint.json"),
                    "--against", str(other / "checkpoint.json")]) == 0
        rows = (out / "metrics.csv").read_text().splitlines()
        assert any(ln.startswith("cdd,") for ln in rows[1:])


class TestSimulateExport:
    def test_simulate_and_export(self, ou_small):
        config_path, out = ou_small
        run(["--config", str(config_path), "train"])
        assert run(["--config", str(config_path), "simulate",
                    "--checkpoint", str(out / "checkpoint.json"),
                    "--n-traj", "6"]) == 0
        traj = out / "trajectories.jsonl"
        assert traj.exists()
        assert run(["--config", str(config_path), "export-plot",
                    "--trajectories", str(traj)]) == 0
        payload = json.loads((out / "plot_data.json").read_text())
        mean = np.asarray(payload["band"]["mean"])
        lower = np.asarray(payload["band"]["lower"])
        upper = np.asarray(payload["band"]["upper"])
        assert np.all(upper >= mean) and np.all(mean >= lower)

    def test_constant_trajectories_zero_band(self, tmp_path):
        from bridgeforge import sde
        times = [0.0, 1.0]
        clouds = [np.ones((1, 4)), np.ones((1, 4))]
        traj = tmp_path / "t.jsonl"
        sde.write_trajectories(traj, times, clouds)
        assert run(["--out-dir", str(tmp_path / "plot"), "export-plot",
                    "--trajectories", str(traj)]) == 0
        payload = json.loads((tmp_path / "plot" / "plot_data.json").read_text())
        assert np.allclose(payload["band"]["lower"], payload["band"]["upper"])

    def test_missing_trajectory_file(self, tmp_path):
        code = run(["--out-dir", str(tmp_path / "p"), "export-plot",
                    "--trajectories", str(tmp_path / "missing.jsonl")])
        assert code == cli.EXIT_IO
