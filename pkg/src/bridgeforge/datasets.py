"""Ground-truth generators and snapshot ingestion.

Provides the time-dependent 1-D Ornstein-Uhlenbeck benchmark (with its
closed-form moments, used as the simulation oracle), the 2-D endpoint
scenarios (obstacle potentials, quadratic-penalty transport, opinion
endpoints), and CSV snapshot round-tripping with deterministic splits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "val", "test")

SNAPSHOT_HEADER = "t_index,split"


class DataError(ValueError):
    pass


@dataclass
class SnapshotDataset:
    """Samples grouped by observation time with per-sample split tags.

    ``samples[k]`` is an (n_k, d) array aligned with ``splits[k]``.
    """

    grid: np.ndarray
    samples: list
    splits: list

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if len(self.samples) != len(self.grid):
            raise DataError("one sample group per grid time required")
        dims = {s.shape[1] for s in self.samples}
        if len(dims) != 1:
            raise DataError(f"inconsistent sample dimensions: {sorted(dims)}")
        for k, (arr, tags) in enumerate(zip(self.samples, self.splits)):
            if len(arr) != len(tags):
                raise DataError(f"time index {k}: split tags do not match samples")

    @property
    def dim(self) -> int:
        return self.samples[0].shape[1]

    def group(self, k: int, split: str) -> np.ndarray:
        tags = np.asarray(self.splits[k])
        return self.samples[k][tags == split]

    def by_split(self, split: str) -> list[np.ndarray]:
        return [self.group(k, split) for k in range(len(self.grid))]

    def drop_time(self, k: int) -> "SnapshotDataset":
        """Training variant with the snapshot at grid index k removed."""
        if k <= 0 or k >= len(self.grid) - 1:
            raise DataError("only intermediate snapshots can be dropped")
        keep = [i for i in range(len(self.grid)) if i != k]
        return SnapshotDataset(self.grid[keep],
                               [self.samples[i] for i in keep],
                               [self.splits[i] for i in keep])


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck benchmark

@dataclass
class OuConfig:
    mu: float = 0.4
    theta: float = 0.1
    sigma: float = 0.8
    t_end: float = 4.0
    grid: tuple = (0.0, 1.0, 2.0, 3.0, 4.0)
    n_train: int = 2048
    n_val: int = 512
    sim_dt: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0 or self.t_end <= 0:
            raise DataError("sigma and t_end must be positive")
        g = np.asarray(self.grid, dtype=float)
        if g.min() < 0 or g.max() > self.t_end or np.any(np.diff(g) <= 0):
            raise DataError("grid must be increasing within [0, t_end]")

    def drift(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.mu * t - self.theta * x

    def gdiag(self, x: np.ndarray, t: float) -> np.ndarray:
        return np.full_like(x, 2.0 * t * self.sigma / self.t_end)


def _decay_weighted_power(t: float, rate: float, power: int) -> float:
    """integral of (t - u)^power * exp(-rate * u) over [0, t].

    The closed form cancels catastrophically when rate * t is small, so a
    geometric series in (-rate * t) is used there.
    """
    x = rate * t
    if x < 0.5:
        # sum over k of (-x)^k * power! / (k + power + 1)!, times t^(power+1)
        term = 1.0 / (power + 1)
        total = term
        for k in range(1, 80):
            term *= -x / (power + 1 + k)
            total += term
            if abs(term) < 1e-18 * abs(total):
                break
        return float(total * t ** (power + 1))
    if power == 1:
        return float(t / rate - (1.0 - np.exp(-x)) / rate ** 2)
    if power == 2:
        return float(t * t / rate - 2.0 * t / rate ** 2
                     + 2.0 * (1.0 - np.exp(-x)) / rate ** 3)
    raise ValueError("power must be 1 or 2")


def ou_mean_var(cfg: OuConfig, t: float, mean0: float = 0.0, var0: float = 1.0):
    """Closed-form mean and variance of the OU marginal at time t.

    dm/dt = mu t - theta m and dV/dt = -2 theta V + (2 sigma t / t_end)^2,
    integrated from (mean0, var0) at t = 0.
    """
    th, mu = cfg.theta, cfg.mu
    a = 2.0 * cfg.sigma / cfg.t_end
    if t == 0:
        return float(mean0), float(var0)
    # m(t) = m0 e^{-th t} + mu * int_0^t s e^{-th (t-s)} ds, and the integral
    # rewrites as int_0^t (t-u) e^{-th u} du after substituting u = t - s.
    mean = mean0 * np.exp(-th * t) + mu * _decay_weighted_power(t, th, 1)
    var = var0 * np.exp(-2.0 * th * t) + a * a * _decay_weighted_power(t, 2.0 * th, 2)
    return float(mean), float(var)


def ou_paths(cfg: OuConfig, n: int, seed: int, at_times,
             x0: np.ndarray | None = None) -> np.ndarray:
    """Euler-Maruyama paths of the ground-truth SDE; returns (T, n) states
    recorded at ``at_times`` (which must be sorted, within [0, t_end])."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 0xC0FFEE]))
    at_times = np.asarray(at_times, dtype=float)
    x = rng.standard_normal(n) if x0 is None else np.array(x0, dtype=float)
    out = np.empty((len(at_times), n))
    t = 0.0
    next_idx = 0
    while next_idx < len(at_times) and at_times[next_idx] <= t + 1e-12:
        out[next_idx] = x
        next_idx += 1
    while next_idx < len(at_times):
        target = at_times[next_idx]
        while t < target - 1e-12:
            h = min(cfg.sim_dt, target - t)
            x = x + cfg.drift(x, t) * h + cfg.gdiag(x, t) * rng.standard_normal(n) * np.sqrt(h)
            t += h
        out[next_idx] = x
        next_idx += 1
    return out


def generate_ou(cfg: OuConfig) -> SnapshotDataset:
    """Snapshot dataset at the configured grid: disjoint train/val streams."""
    grid = np.asarray(cfg.grid, dtype=float)
    train = ou_paths(cfg, cfg.n_train, seed=1, at_times=grid)
    val = ou_paths(cfg, cfg.n_val, seed=2, at_times=grid)
    samples, splits = [], []
    for k in range(len(grid)):
        block = np.concatenate([train[k], val[k]])[:, None]
        tags = np.array(["train"] * cfg.n_train + ["val"] * cfg.n_val)
        samples.append(block)
        splits.append(tags)
    return SnapshotDataset(grid, samples, splits)


# ---------------------------------------------------------------------------
# 2-D endpoint scenarios

SCENARIOS_2D = ("box", "slit", "hill", "well", "lqr", "opinion")

SIGMOID_SHARPNESS = 50.0


def _sig(z):
    return 1.0 / (1.0 + np.exp(-SIGMOID_SHARPNESS * z))


def _dsig(z):
    s = _sig(z)
    return SIGMOID_SHARPNESS * s * (1.0 - s)


def box_potential(x: np.ndarray, t: float = 0.0):
    """Smoothed -100 inside [-0.5, 0.5]^2; returns (values (1,n), grad (2,n))."""
    px, py = x[0], x[1]
    ax, bx = _sig(px + 0.5), _sig(0.5 - px)
    ay, by = _sig(py + 0.5), _sig(0.5 - py)
    inside = ax * bx * ay * by
    vals = -100.0 * inside
    gx = -100.0 * (_dsig(px + 0.5) * bx - ax * _dsig(0.5 - px)) * ay * by
    gy = -100.0 * (_dsig(py + 0.5) * by - ay * _dsig(0.5 - py)) * ax * bx
    return vals[None, :], np.stack([gx, gy])


def slit_potential(x: np.ndarray, t: float = 0.0):
    """-100 on the wall x in [-0.1, 0.1] except the opening |y| < 0.25."""
    px, py = x[0], x[1]
    wall = _sig(px + 0.1) * _sig(0.1 - px)
    opening = _sig(py + 0.25) * _sig(0.25 - py)
    vals = -100.0 * wall * (1.0 - opening)
    d_wall = _dsig(px + 0.1) * _sig(0.1 - px) - _sig(px + 0.1) * _dsig(0.1 - px)
    d_open = _dsig(py + 0.25) * _sig(0.25 - py) - _sig(py + 0.25) * _dsig(0.25 - py)
    gx = -100.0 * d_wall * (1.0 - opening)
    gy = 100.0 * wall * d_open
    return vals[None, :], np.stack([gx, gy])


def hill_potential(x: np.ndarray, t: float = 0.0):
    vals = -2.5 * np.sum(x * x, axis=0, keepdims=True)
    return vals, -5.0 * x


def well_potential(x: np.ndarray, t: float = 0.0):
    r2 = np.sum(x * x, axis=0, keepdims=True)
    vals = -10.0 * np.exp(-r2)
    return vals, 20.0 * x * np.exp(-r2)


SCENARIO_POTENTIALS = {
    "box": box_potential,
    "slit": slit_potential,
    "hill": hill_potential,
    "well": well_potential,
}


@dataclass
class ScenarioInfo:
    name: str
    u_field: object = None
    R: np.ndarray | None = None
    xi: np.ndarray | None = None


def generate_endpoints_2d(scenario: str, n_train: int = 2048, n_val: int = 512,
                          seed: int = 0, lqr_weights=(10.0, 0.1)):
    """K = 2 endpoint dataset for a named scenario plus its Lagrangian
    ingredients (obstacle potential, quadratic penalty matrix, or the
    opinion information vector)."""
    if scenario not in SCENARIOS_2D:
        raise DataError(f"unknown scenario {scenario!r}; choose from {SCENARIOS_2D}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, SCENARIOS_2D.index(scenario)]))
    n = n_train + n_val

    if scenario == "opinion":
        start = rng.multivariate_normal([0, 0], np.diag([0.5, 0.25]), size=n)
        end = rng.multivariate_normal([0, 0], np.diag([3.0, 3.0]), size=n)
        info = ScenarioInfo("opinion", xi=np.array([1.0, 0.0]))
    else:
        start = np.column_stack([rng.uniform(-1.25, -1.0, n), rng.uniform(-1.0, 1.0, n)])
        end = np.column_stack([rng.uniform(1.0, 1.25, n), rng.uniform(-1.0, 1.0, n)])
        info = ScenarioInfo(scenario, u_field=SCENARIO_POTENTIALS.get(scenario),
                            R=np.diag(lqr_weights) if scenario == "lqr" else None)

    tags = np.array(["train"] * n_train + ["val"] * n_val)
    dataset = SnapshotDataset(np.array([0.0, 1.0]), [start, end], [tags, tags.copy()])
    return dataset, info


# ---------------------------------------------------------------------------
# snapshot CSV round-trip

def save_snapshots(path, dataset: SnapshotDataset) -> None:
    d = dataset.dim
    cols = ",".join(f"x_{i}" for i in range(d))
    with open(path, "w") as fh:
        fh.write(f"{SNAPSHOT_HEADER},{cols}\n")
        for k in range(len(dataset.grid)):
            for row, tag in zip(dataset.samples[k], dataset.splits[k]):
                vals = ",".join(f"{v:.17g}" for v in row)
                fh.write(f"{k},{tag},{vals}\n")


def load_snapshots(path, grid, split_seed: int = 0,
                   val_fraction: float = 0.1, test_fraction: float = 0.0) -> SnapshotDataset:
    """Read a snapshot CSV, grouping rows by time index.

    A missing ``split`` column triggers a deterministic seeded split.
    Malformed rows and unknown time indices raise :class:`DataError` with
    the offending line number; a grid time with no rows is an error naming
    that time.
    """
    grid = np.asarray(grid, dtype=float)
    rows = {k: [] for k in range(len(grid))}
    tags = {k: [] for k in range(len(grid))}
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise DataError(f"{path}: empty file")
        names = header.split(",")
        has_split = "split" in names
        expected = len(names)
        d = expected - (2 if has_split else 1)
        if d < 1:
            raise DataError(f"{path}: no coordinate columns in header")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != expected:
                raise DataError(f"{path}:{lineno}: expected {expected} fields, got {len(parts)}")
            try:
                k = int(parts[0])
                coords = [float(v) for v in parts[-d:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if k not in rows:
                raise DataError(f"{path}:{lineno}: unknown time index {k}")
            rows[k].append(coords)
            if has_split:
                tag = parts[1]
                if tag not in SPLITS:
                    raise DataError(f"{path}:{lineno}: unknown split {tag!r}")
                tags[k].append(tag)
    for k in range(len(grid)):
        if not rows[k]:
            raise DataError(f"{path}: no samples for grid time t={grid[k]:g} (index {k})")
    samples = [np.asarray(rows[k], dtype=np.float64) for k in range(len(grid))]
    if has_split:
        splits = [np.asarray(tags[k]) for k in range(len(grid))]
    else:
        splits = []
        rng = np.random.default_rng(split_seed)
        for k in range(len(grid)):
            n = len(samples[k])
            n_val = int(round(val_fraction * n))
            n_test = int(round(test_fraction * n))
            tag = np.array(["train"] * n)
            order = rng.permutation(n)
            tag[order[:n_val]] = "val"
            tag[order[n_val:n_val + n_test]] = "test"
            splits.append(tag)
    return SnapshotDataset(grid, samples, splits)
