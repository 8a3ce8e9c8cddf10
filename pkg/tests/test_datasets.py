import numpy as np
import pytest

from bridgeforge import datasets as ds


class TestOu:
    def test_diffusion_vanishes_at_time_zero(self):
        cfg = ds.OuConfig()
        assert np.all(cfg.gdiag(np.ones(5), 0.0) == 0.0)

    def test_drift_only_integration(self):
        cfg = ds.OuConfig(theta=0.0, sigma=1e-300, seed=3)
        x0 = np.array([1.0, -2.0, 0.5])
        out = ds.ou_paths(cfg, 3, seed=0, at_times=[4.0], x0=x0)
        # X(t) = X0 + mu t^2 / 2 when theta = sigma = 0 (left-endpoint Euler
        # carries an O(dt) bias of mu * t * dt / 2 = 8e-4)
        assert np.allclose(out[0], x0 + 0.4 * 16 / 2, atol=2e-3)

    def test_mean_matches_closed_form(self):
        cfg = ds.OuConfig(seed=1)
        n = 4000
        out = ds.ou_paths(cfg, n, seed=5, at_times=[1.0, 2.0, 4.0])
        for row, t in zip(out, [1.0, 2.0, 4.0]):
            mean_ref, var_ref = ds.ou_mean_var(cfg, t)
            se = row.std() / np.sqrt(n)
            assert abs(row.mean() - mean_ref) < 3 * se + 5 * cfg.sim_dt

    def test_variance_matches_closed_form(self):
        cfg = ds.OuConfig(seed=1)
        n = 4000
        out = ds.ou_paths(cfg, n, seed=6, at_times=[2.0, 4.0])
        for row, t in zip(out, [2.0, 4.0]):
            _, var_ref = ds.ou_mean_var(cfg, t)
            se = row.var() * np.sqrt(2.0 / (n - 1))
            assert abs(row.var() - var_ref) < 3 * se + 0.05

    def test_closed_form_theta_limit(self):
        # the small-theta branch must agree with the general formula nearby
        a = ds.ou_mean_var(ds.OuConfig(theta=1e-13), 3.0)
        b = ds.ou_mean_var(ds.OuConfig(theta=1e-6), 3.0)
        assert abs(a[0] - b[0]) < 1e-4 and abs(a[1] - b[1]) < 1e-4

    def test_deterministic_and_disjoint_splits(self):
        cfg = ds.OuConfig(n_train=64, n_val=16, seed=9)
        d1 = ds.generate_ou(cfg)
        d2 = ds.generate_ou(cfg)
        for a, b in zip(d1.samples, d2.samples):
            assert np.array_equal(a, b)
        train = d1.group(0, "train")
        val = d1.group(0, "val")
        assert len(train) == 64 and len(val) == 16
        assert not np.isin(val, train).all()

    def test_grid_validation(self):
        with pytest.raises(ds.DataError):
            ds.OuConfig(grid=(0.0, 5.0))
        with pytest.raises(ds.DataError):
            ds.OuConfig(grid=(1.0, 0.5))


class TestEndpointScenarios:
    def test_box_potential_values(self):
        vals, _ = ds.box_potential(np.array([[0.0], [0.0]]))
        assert abs(vals[0, 0] + 100.0) < 1e-6
        vals, _ = ds.box_potential(np.array([[1.0], [1.0]]))
        assert abs(vals[0, 0]) < 1e-6

    def test_hill_and_well_values(self):
        vals, _ = ds.hill_potential(np.array([[1.0], [1.0]]))
        assert vals[0, 0] == -5.0
        vals, _ = ds.well_potential(np.array([[0.0], [0.0]]))
        assert vals[0, 0] == -10.0

    def test_slit_opening(self):
        wall, _ = ds.slit_potential(np.array([[0.0], [0.5]]))
        opening, _ = ds.slit_potential(np.array([[0.0], [0.0]]))
        assert wall[0, 0] < -95.0
        assert abs(opening[0, 0]) < 1e-3

    def test_potential_gradients_match_fd(self):
        rng = np.random.default_rng(0)
        for fn in (ds.box_potential, ds.slit_potential, ds.hill_potential,
                   ds.well_potential):
            x = rng.uniform(-1.2, 1.2, size=(2, 40))
            vals, grad = fn(x)
            h = 1e-6
            for i in range(2):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                num = (fn(xp)[0] - fn(xm)[0]) / (2 * h)
                assert np.max(np.abs(num - grad[i])) < 1e-3

    def test_smoothed_edges_are_c1(self):
        # probe across the box wall: finite-difference gradient stays bounded
        xs = np.linspace(-0.7, -0.3, 400)
        probe = np.stack([xs, np.zeros_like(xs)])
        _, grad = ds.box_potential(probe)
        jumps = np.abs(np.diff(grad[0]))
        assert np.max(np.abs(grad)) < 100.0 * ds.SIGMOID_SHARPNESS
        assert np.max(jumps) < 1e3

    def test_scenario_shapes_and_determinism(self):
        for name in ds.SCENARIOS_2D:
            d1, info1 = ds.generate_endpoints_2d(name, n_train=32, n_val=8, seed=4)
            d2, _ = ds.generate_endpoints_2d(name, n_train=32, n_val=8, seed=4)
            assert len(d1.grid) == 2 and d1.dim == 2
            assert np.array_equal(d1.samples[0], d2.samples[0])
        assert info1.xi is not None  # opinion carries the information vector
        _, lqr = ds.generate_endpoints_2d("lqr", n_train=8, n_val=4, seed=0)
        assert np.allclose(lqr.R, np.diag([10.0, 0.1]))

    def test_unknown_scenario(self):
        with pytest.raises(ds.DataError):
            ds.generate_endpoints_2d("maze", 8, 4, 0)

    def test_uniform_endpoint_ranges(self):
        data, _ = ds.generate_endpoints_2d("hill", n_train=256, n_val=64, seed=1)
        start, end = data.samples
        assert start[:, 0].min() >= -1.25 and start[:, 0].max() <= -1.0
        assert end[:, 0].min() >= 1.0 and end[:, 0].max() <= 1.25
        assert abs(start[:, 1]).max() <= 1.0


class TestSnapshotCsv:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        grid = [0.0, 1.0, 2.0]
        samples = [rng.normal(size=(4, 3)) * 10.0 ** rng.integers(-8, 8)
                   for _ in grid]
        splits = [np.array(["train", "val", "test", "train"]) for _ in grid]
        data = ds.SnapshotDataset(grid, samples, splits)
        path = tmp_path / "snap.csv"
        ds.save_snapshots(path, data)
        back = ds.load_snapshots(path, grid)
        for a, b in zip(data.samples, back.samples):
            assert np.array_equal(a, b)
        for a, b in zip(data.splits, back.splits):
            assert list(a) == list(b)

    def test_missing_time_named_in_error(self, tmp_path):
        path = tmp_path / "snap.csv"
        path.write_text("t_index,split,x_0\n0,train,1.0\n")
        with pytest.raises(ds.DataError, match="t=1"):
            ds.load_snapshots(path, [0.0, 1.0])

    def test_ragged_row_line_number(self, tmp_path):
        path = tmp_path / "snap.csv"
        path.write_text("t_index,split,x_0\n0,train,1.0\n0,train\n")
        with pytest.raises(ds.DataError, match=":3"):
            ds.load_snapshots(path, [0.0])

    def test_unknown_time_index(self, tmp_path):
        path = tmp_path / "snap.csv"
        path.write_text("t_index,split,x_0\n5,train,1.0\n")
        with pytest.raises(ds.DataError, match="unknown time index"):
            ds.load_snapshots(path, [0.0])

    def test_seeded_split_when_column_absent(self, tmp_path):
        path = tmp_path / "snap.csv"
        rows = ["t_index,x_0,x_1"] + [f"0,{i}.0,0.0" for i in range(20)]
        path.write_text("\n".join(rows) + "\n")
        a = ds.load_snapshots(path, [0.0], split_seed=3, val_fraction=0.25)
        b = ds.load_snapshots(path, [0.0], split_seed=3, val_fraction=0.25)
        assert list(a.splits[0]) == list(b.splits[0])
        assert (np.asarray(a.splits[0]) == "val").sum() == 5

    def test_drop_time(self):
        rng = np.random.default_rng(6)
        grid = [0.0, 1.0, 2.0]
        data = ds.SnapshotDataset(
            grid, [rng.normal(size=(4, 1)) for _ in grid],
            [np.array(["train"] * 4) for _ in grid])
        dropped = data.drop_time(1)
        assert list(dropped.grid) == [0.0, 2.0]
        with pytest.raises(ds.DataError):
            data.drop_time(0)
