"""Config-driven command line: data generation, training, evaluation,
simulation and plot-data export.

A single JSON config file drives every command; flags override individual
entries and the effective config is echoed into the output directory.  Exit
codes are stable: 0 success, 2 configuration error, 3 numeric divergence,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets, ot, sde, training
from .datasets import DataError, OuConfig, SnapshotDataset
from .lagrangian import ConfigurationError
from .ot import SinkhornConfig
from .training import Checkpoint, ConfigError, TrainConfig, TrainingAbortedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

THREADS_ENV = "BRIDGE_FORGE_THREADS"

DEFAULT_CONFIG = {
    "scenario": "ou",
    "seed": 0,
    "out_dir": "runs/latest",
    "threads": 1,
    "data": {
        "path": None,
        "grid": None,
        "n_train": 2048,
        "n_val": 512,
        "ou": {"mu": 0.4, "theta": 0.1, "sigma": 0.8, "t_end": 4.0, "sim_dt": 1e-3},
    },
    "train": {
        "grid": None,
        "lambda_e": (0.3, 0.1, 0.01, 0.01),
        "lambda_h": (0.2, 0.01, 0.0001, 0.0001),
        "batch_size": 512,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps_adam": 1e-8,
        "dt": 0.01,
        "max_epochs": 100,
        "patience": 20,
        "hjb_sign": 1.0,
        "preset": "potential_free",
        "lagrangian_options": {},
        "pot_width": 2,
        "pot_depth": 2,
        "pot_step": 1.0,
        "pot_rank": 10,
        "diff_hidden": 16,
        "diff_scale": 1.0,
        "sinkhorn": {"epsilon": None, "max_iters": 5000, "tol": 1e-9,
                     "train_iters": 200, "self_iters": None},
    },
    "metrics": {
        "mdd_repeats": 10,
        "mdd_samples": 1000,
        "eval_points": 12,
        "cdd_initial": 100,
        "cdd_traj": 20,
        "exclude_time": None,
    },
}


def _merge_validate(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge_validate(base[key], val, here)
        else:
            out[key] = val
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path:
        with open(path) as fh:
            user = json.load(fh)
        cfg = _merge_validate(cfg, user)
    if overrides:
        cfg = _merge_validate(cfg, overrides)
    env_threads = os.environ.get(THREADS_ENV)
    if env_threads and "threads" not in (overrides or {}):
        cfg["threads"] = int(env_threads)
    return cfg


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2)


def _build_train_config(cfg: dict, grid) -> TrainConfig:
    t = dict(cfg["train"])
    t["grid"] = tuple(grid) if t.get("grid") is None else tuple(t["grid"])
    t["seed"] = cfg["seed"]
    sk = t.pop("sinkhorn")
    n_int = len(t["grid"]) - 1
    for key in ("lambda_e", "lambda_h"):
        vals = t[key]
        if np.isscalar(vals):
            t[key] = (float(vals),) * n_int
        else:
            t[key] = tuple(vals)
    return TrainConfig(sinkhorn=SinkhornConfig(**sk), **t)


def _ou_config(cfg: dict) -> OuConfig:
    d = cfg["data"]
    grid = d["grid"] or (0.0, 1.0, 2.0, 3.0, 4.0)
    return OuConfig(grid=tuple(grid), n_train=d["n_train"], n_val=d["n_val"],
                    seed=cfg["seed"], **d["ou"])


def _load_dataset(cfg: dict) -> tuple[SnapshotDataset, object]:
    scenario = cfg["scenario"]
    if scenario == "ou":
        ou = _ou_config(cfg)
        return datasets.generate_ou(ou), ou
    if scenario == "csv":
        path = cfg["data"]["path"]
        grid = cfg["data"]["grid"]
        if not path or grid is None:
            raise ConfigError("csv scenario requires data.path and data.grid")
        return datasets.load_snapshots(path, grid, split_seed=cfg["seed"]), None
    data, info = datasets.generate_endpoints_2d(
        scenario, n_train=cfg["data"]["n_train"], n_val=cfg["data"]["n_val"],
        seed=cfg["seed"])
    return data, info


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    _echo_config(cfg, out_dir)
    data, extra = _load_dataset(cfg)
    datasets.save_snapshots(out_dir / "snapshots.csv", data)
    if cfg["scenario"] == "ou":
        ou = extra
        times = np.linspace(ou.grid[0], ou.grid[-1], cfg["metrics"]["eval_points"])
        paths = datasets.ou_paths(ou, cfg["metrics"]["mdd_samples"], seed=9,
                                  at_times=times)
        sde.write_trajectories(out_dir / "oracle_trajectories.jsonl", times,
                               [p[None, :] for p in paths])
    print(f"wrote {out_dir / 'snapshots.csv'}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    _echo_config(cfg, out_dir)
    data, info = _load_dataset(cfg)
    exclude = cfg["metrics"]["exclude_time"]
    if exclude is not None:
        k = int(exclude)
        n_int = len(data.grid) - 1
        data = data.drop_time(k)
        cfg = json.loads(json.dumps(cfg))
        for key in ("lambda_e", "lambda_h"):
            vals = cfg["train"][key]
            if not np.isscalar(vals) and len(vals) == n_int:
                # the merged interval keeps the left sub-interval's weight
                cfg["train"][key] = [v for i, v in enumerate(vals) if i != k]
    tconf = _build_train_config(cfg, data.grid)
    spec = None
    if getattr(info, "u_field", None) is not None or getattr(info, "R", None) is not None:
        spec, _ = training.build_spec(tconf, data.dim, dataset=data,
                                      u_field=getattr(info, "u_field", None))
    ckpt, history = training.train(data, tconf, spec=spec,
                                   log_path=out_dir / "training_log.csv",
                                   quiet=False)
    ckpt.save(out_dir / "checkpoint.json")
    print(f"wrote {out_dir / 'checkpoint.json'} (val={ckpt.val_metric:.5f})")
    return EXIT_OK


def cmd_train_reverse(cfg: dict, checkpoint: str, max_epochs: int | None) -> int:
    out_dir = Path(cfg["out_dir"])
    _echo_config(cfg, out_dir)
    ckpt = Checkpoint.load(checkpoint)
    data, _ = _load_dataset(cfg)
    out, history = training.train_reverse_corrector(
        ckpt, data, max_epochs=max_epochs,
        log_path=out_dir / "reverse_log.csv", quiet=False)
    out.save(out_dir / "checkpoint_reverse.json")
    print(f"wrote {out_dir / 'checkpoint_reverse.json'}")
    return EXIT_OK


def _mdd_rows(ckpt: Checkpoint, cfg: dict, data: SnapshotDataset, extra) -> list:
    """MDD at observation times (all-step prediction from the first
    snapshot), repeated over simulation seeds."""
    m = cfg["metrics"]
    grid = list(data.grid)
    sim = training.forward_simulator(ckpt)
    rows = []
    if cfg["scenario"] == "ou":
        ou = extra
        per_rep = []
        for rep in range(m["mdd_repeats"]):
            start = datasets.ou_paths(ou, m["mdd_samples"], seed=300 + rep,
                                      at_times=[grid[0]])[0][:, None]
            clouds = sim(start, grid, stream=("mdd", rep))
            gt = datasets.ou_paths(ou, m["mdd_samples"], seed=600 + rep, at_times=grid)
            per_rep.append([ot.mdd(gt[k][:, None], clouds[k]) for k in range(len(grid))])
        arr = np.asarray(per_rep)
        for k, t in enumerate(grid):
            rows.append(("mdd", t, arr[:, k].mean(), arr[:, k].std(), len(arr)))
        times12 = np.linspace(grid[0], grid[-1], m["eval_points"])
        per_rep = []
        for rep in range(m["mdd_repeats"]):
            start = datasets.ou_paths(ou, m["mdd_samples"], seed=300 + rep,
                                      at_times=[grid[0]])[0][:, None]
            clouds = sim(start, times12, stream=("mdd12", rep))
            gt = datasets.ou_paths(ou, m["mdd_samples"], seed=900 + rep,
                                   at_times=times12)
            per_rep.append([ot.mdd(gt[k][:, None], clouds[k])
                            for k in range(len(times12))])
        arr = np.asarray(per_rep)
        for k, t in enumerate(times12):
            rows.append(("mdd_dense", t, arr[:, k].mean(), arr[:, k].std(), len(arr)))
    else:
        test_groups = data.by_split("test")
        if any(len(g) == 0 for g in test_groups):
            test_groups = data.by_split("val")
        per_rep = []
        for rep in range(m["mdd_repeats"]):
            start = test_groups[0]
            clouds = sim(start, grid, stream=("mdd", rep))
            per_rep.append([ot.mdd(test_groups[k], clouds[k])
                            for k in range(1, len(grid))])
        arr = np.asarray(per_rep)
        for k, t in enumerate(grid[1:]):
            rows.append(("mdd", t, arr[:, k].mean(), arr[:, k].std(), len(arr)))
    return rows


def _cdd_rows(ckpt: Checkpoint, cfg: dict, data: SnapshotDataset, extra,
              against: Checkpoint | None) -> list:
    m = cfg["metrics"]
    grid = list(data.grid)
    times = np.linspace(grid[0], grid[-1], m["eval_points"])
    sim_model = training.forward_simulator(ckpt)
    if against is not None:
        sim_other = training.forward_simulator(against)
        seeds = (11, 12)
    elif cfg["scenario"] == "ou":
        ou = extra

        def sim_other(starts, eval_times, stream):
            flat = np.asarray(starts)[:, 0]
            out = datasets.ou_paths(ou, len(flat), seed=training._stream_seed(71, stream),
                                    at_times=eval_times, x0=flat)
            return out[:, :, None]

        seeds = (11, 12)
    else:
        return []
    starts = data.by_split("val")[0][: m["cdd_initial"]]
    vals = ot.cdd(sim_model, sim_other, starts, times, n_traj=m["cdd_traj"],
                  seed_model=seeds[0], seed_truth=seeds[1],
                  threads=cfg.get("threads", 1))
    return [("cdd", t, v, 0.0, m["cdd_initial"]) for t, v in zip(times, vals)]


def cmd_eval(cfg: dict, checkpoint: str, against: str | None) -> int:
    out_dir = Path(cfg["out_dir"])
    _echo_config(cfg, out_dir)
    ckpt = Checkpoint.load(checkpoint)
    data, extra = _load_dataset(cfg)
    if ckpt.dim != data.dim:
        raise ConfigError(
            f"checkpoint dimension {ckpt.dim} != dataset dimension {data.dim}")
    rows = _mdd_rows(ckpt, cfg, data, extra)
    other = Checkpoint.load(against) if against else None
    rows += _cdd_rows(ckpt, cfg, data, extra, other)
    ot.write_metrics_csv(out_dir / "metrics.csv", rows)
    print(f"wrote {out_dir / 'metrics.csv'} ({len(rows)} rows)")
    return EXIT_OK


def cmd_simulate(cfg: dict, checkpoint: str, reverse: bool, n_traj: int) -> int:
    out_dir = Path(cfg["out_dir"])
    _echo_config(cfg, out_dir)
    ckpt = Checkpoint.load(checkpoint)
    data, _ = _load_dataset(cfg)
    grid = list(data.grid)
    times = np.linspace(grid[0], grid[-1], cfg["metrics"]["eval_points"])
    if reverse:
        sim = training.reverse_simulator(ckpt)
        starts = data.by_split("val")[-1][:n_traj]
        clouds = sim(starts, times[::-1], stream=("sim", 0))
        path = out_dir / "trajectories_reverse.jsonl"
        sde.write_trajectories(path, times[::-1], [c.T for c in clouds])
    else:
        sim = training.forward_simulator(ckpt)
        starts = data.by_split("val")[0][:n_traj]
        clouds = sim(starts, times, stream=("sim", 0))
        path = out_dir / "trajectories.jsonl"
        sde.write_trajectories(path, times, [c.T for c in clouds])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_export_plot(cfg: dict, trajectories: str, metrics: str | None,
                    snapshots: str | None) -> int:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    times, clouds, ids = sde.read_trajectories(trajectories)
    stack = np.stack([c for c in clouds])        # (T, d, n)
    mean = stack.mean(axis=2)
    std = stack.std(axis=2)
    payload = {
        "times": [float(t) for t in times],
        "band": {
            "mean": mean.T.tolist(),
            "lower": (mean - std).T.tolist(),
            "upper": (mean + std).T.tolist(),
        },
        "trajectories": [
            {"traj_id": int(tid), "y": stack[:, :, j].tolist()}
            for j, tid in enumerate(ids[: min(len(ids), 50)])
        ],
    }
    if snapshots:
        grid_guess = cfg["data"]["grid"] or (0.0, 1.0, 2.0, 3.0, 4.0)
        data = datasets.load_snapshots(snapshots, grid_guess, split_seed=cfg["seed"])
        payload["snapshots"] = [
            {"t": float(t), "points": data.samples[k].tolist()}
            for k, t in enumerate(data.grid)
        ]
    if metrics:
        payload["metrics"] = ot.read_metrics_csv(metrics)
    with open(out_dir / "plot_data.json", "w") as fh:
        json.dump(payload, fh)
    print(f"wrote {out_dir / 'plot_data.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing

def _collect_overrides(args) -> dict:
    over: dict = {}

    def put(path, value):
        node = over
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value

    if args.scenario:
        put(("scenario",), args.scenario)
    if args.seed is not None:
        put(("seed",), args.seed)
    if args.out_dir:
        put(("out_dir",), args.out_dir)
    if args.threads is not None:
        put(("threads",), args.threads)
    if getattr(args, "preset", None):
        put(("train", "preset"), args.preset.replace("-", "_"))
    if getattr(args, "lambda_e", None) is not None:
        put(("train", "lambda_e"), _parse_lams(args.lambda_e))
    if getattr(args, "lambda_h", None) is not None:
        put(("train", "lambda_h"), _parse_lams(args.lambda_h))
    if getattr(args, "max_epochs", None) is not None:
        put(("train", "max_epochs"), args.max_epochs)
    if getattr(args, "batch_size", None) is not None:
        put(("train", "batch_size"), args.batch_size)
    if getattr(args, "exclude_time", None) is not None:
        put(("metrics", "exclude_time"), args.exclude_time)
    if getattr(args, "data_path", None):
        put(("data", "path"), args.data_path)
    return over


def _parse_lams(text: str):
    parts = [float(p) for p in str(text).split(",")]
    return parts[0] if len(parts) == 1 else parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridgeforge",
        description="Neural-SDE population trajectory inference")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--scenario", help="ou | box | slit | hill | well | lqr | opinion | csv")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir")
    parser.add_argument("--threads", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write snapshot CSV (+ OU oracle trajectories)")

    p_train = sub.add_parser("train", help="fit drift and diffusion")
    p_train.add_argument("--preset")
    p_train.add_argument("--lambda-e")
    p_train.add_argument("--lambda-h")
    p_train.add_argument("--max-epochs", type=int)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--exclude-time", type=int)
    p_train.add_argument("--data-path")

    p_rev = sub.add_parser("train-reverse", help="fit the reverse-time corrector")
    p_rev.add_argument("--checkpoint", required=True)
    p_rev.add_argument("--max-epochs", type=int)

    p_eval = sub.add_parser("eval", help="MDD/CDD metrics to CSV")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--against", help="second checkpoint for CDD comparison")
    p_eval.add_argument("--exclude-time", type=int)
    p_eval.add_argument("--data-path")

    p_sim = sub.add_parser("simulate", help="dump model trajectories")
    p_sim.add_argument("--checkpoint", required=True)
    p_sim.add_argument("--reverse", action="store_true")
    p_sim.add_argument("--n-traj", type=int, default=100)

    p_plot = sub.add_parser("export-plot", help="tidy JSON series for plotting")
    p_plot.add_argument("--trajectories", required=True)
    p_plot.add_argument("--metrics")
    p_plot.add_argument("--snapshots")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _collect_overrides(args))
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "train-reverse":
            return cmd_train_reverse(cfg, args.checkpoint, args.max_epochs)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.against)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.checkpoint, args.reverse, args.n_traj)
        if args.command == "export-plot":
            return cmd_export_plot(cfg, args.trajectories, args.metrics,
                                   args.snapshots)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, ConfigurationError, DataError, json.JSONDecodeError,
            ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (sde.SimulationDivergedError, TrainingAbortedError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
