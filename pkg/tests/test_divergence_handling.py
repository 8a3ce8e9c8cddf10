import json

import numpy as np
import pytest

from bridgeforge import cli, datasets, lagrangian, sde, training
from bridgeforge.ot import SinkhornConfig
from bridgeforge.training import TrainConfig


def exploding_config():
    return TrainConfig(grid=(0.0, 0.2), lambda_e=(0.1,), lambda_h=(0.0,),
                       batch_size=8, dt=0.01, max_epochs=1, patience=5, seed=0,
                       sinkhorn=SinkhornConfig(epsilon=0.5, train_iters=10))


def make_exploding_store(cfg):
    store = training.init_param_store(1, cfg)
    # a monstrous quadratic tail makes the first drift step blow past the
    # divergence guard
    store.set_values({"A": np.full_like(store["A"].value, 1e6)})
    return store


def test_loss_step_raises_diverged():
    cfg = exploding_config()
    store = make_exploding_store(cfg)
    batches = [np.ones((8, 1)), np.ones((8, 1))]
    with pytest.raises(sde.SimulationDivergedError):
        training.loss_step(store, cfg, lagrangian.potential_free(), batches,
                           sde.NoisePlan(0), (0, 0))


def test_train_aborts_after_repeated_divergence(monkeypatch):
    rng = np.random.default_rng(0)
    grid = np.array([0.0, 0.2])
    samples = [rng.normal(size=(24, 1)) for _ in grid]
    splits = [np.array(["train"] * 16 + ["val"] * 8) for _ in grid]
    data = datasets.SnapshotDataset(grid, samples, splits)
    cfg = TrainConfig(grid=(0.0, 0.2), lambda_e=(0.1,), lambda_h=(0.0,),
                      batch_size=4, dt=0.01, max_epochs=3, patience=5, seed=0,
                      sinkhorn=SinkhornConfig(epsilon=0.5, train_iters=10))
    # sabotage initialization so every step diverges
    real_init = training.init_param_store

    def bad_init(d, config):
        store = real_init(d, config)
        store.set_values({"A": np.full_like(store["A"].value, 1e6)})
        return store

    monkeypatch.setattr(training, "init_param_store", bad_init)
    with pytest.raises(training.TrainingAbortedError) as err, pytest.warns(UserWarning):
        training.train(data, cfg)
    assert "epoch" in err.value.diagnostics


def test_cli_simulate_divergence_exit_code(tmp_path):
    cfg = {"scenario": "ou", "seed": 1, "out_dir": str(tmp_path / "run"),
           "data": {"n_train": 16, "n_val": 8},
           "metrics": {"eval_points": 4, "mdd_samples": 16}}
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(cfg))
    tconf = TrainConfig(grid=(0.0, 1.0, 2.0, 3.0, 4.0),
                        lambda_e=0.0, lambda_h=0.0, batch_size=8, max_epochs=0)
    store = training.init_param_store(1, tconf)
    values = store.values_dict()
    values["A"] = np.full_like(values["A"], 1e6)
    ckpt = training.Checkpoint(
        config=tconf,
        potential={k: v for k, v in values.items() if not k.startswith("g_")},
        diffusion={k: v for k, v in values.items() if k.startswith("g_")})
    ckpt_path = tmp_path / "bad_ckpt.json"
    ckpt.save(ckpt_path)
    code = cli.main(["--config", str(config_path), "simulate",
                     "--checkpoint", str(ckpt_path), "--n-traj", "4"])
    assert code == cli.EXIT_DIVERGED
