import numpy as np
import pytest

from bridgeforge import autodiff as ad
from bridgeforge import ot
from bridgeforge.ot import SinkhornConfig


class TestSinkhornCost:
    def test_identical_singletons(self):
        res = ot.sinkhorn_cost(np.array([[0.0]]), np.array([[0.0]]),
                               SinkhornConfig(epsilon=0.5))
        assert float(res.value) == 0.0

    def test_forced_coupling(self):
        # one coupling only; the plan is deterministic so the cost is exact
        for eps in (0.5, 1e-3):
            res = ot.sinkhorn_cost(np.array([[0.0]]), np.array([[1.0]]),
                                   SinkhornConfig(epsilon=eps))
            assert abs(float(res.value) - 1.0) < 1e-12

    def test_matches_exact_emd_at_small_eps(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n = int(rng.integers(2, 17))
            d = int(rng.integers(1, 4))
            x = rng.normal(size=(n, d))
            y = rng.normal(size=(n, d)) + 0.5
            scale = np.sqrt(np.median(ot._sqdist_values(x, y)))
            x, y = x / scale, y / scale
            res = ot.sinkhorn_cost(x, y, SinkhornConfig(epsilon=1e-3,
                                                        max_iters=30000, tol=1e-9))
            assert abs(float(res.value) - ot.emd_exact(x, y)) < 1e-3

    def test_gap_monotone_in_eps(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(10, 2))
        y = rng.normal(size=(10, 2)) + 0.4
        scale = np.sqrt(np.median(ot._sqdist_values(x, y)))
        x, y = x / scale, y / scale
        em = ot.emd_exact(x, y)
        gaps = []
        for eps in (0.1, 0.01, 1e-3):
            v = float(ot.sinkhorn_cost(x, y, SinkhornConfig(
                epsilon=eps, max_iters=30000, tol=1e-9)).value)
            gaps.append(v - em)
        assert gaps[0] > gaps[1] > gaps[2]
        assert abs(gaps[2]) < 1e-3


class TestSinkhornDivergence:
    def test_identical_clouds_vanish(self):
        rng = np.random.default_rng(2)
        for n, d in ((5, 1), (12, 2), (64, 3)):
            a = rng.normal(size=(n, d))
            res = ot.sinkhorn_divergence(a, a.copy())
            assert abs(float(res.value)) < 1e-8

    def test_separated_1d_clouds(self):
        a = np.array([[0.0], [1.0]])
        b = np.array([[2.0], [3.0]])
        res = ot.sinkhorn_divergence(a, b, SinkhornConfig(epsilon=1e-3,
                                                          max_iters=30000))
        assert abs(float(res.value) - 4.0) < 1e-3

    def test_monotone_decrease_toward_target(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(20, 2))
        y = rng.normal(size=(20, 2)) + 1.0
        prev = np.inf
        for lam in (0.0, 0.5, 0.9):
            moved = y + lam * (x - y)
            val = float(ot.sinkhorn_divergence(x, moved,
                                               SinkhornConfig(epsilon=0.05)).value)
            assert val < prev
            prev = val

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(15, 2))
        b = rng.normal(size=(15, 2)) + 0.3
        cfg = SinkhornConfig(epsilon=0.05)
        ab = float(ot.sinkhorn_divergence(a, b, cfg).value)
        ba = float(ot.sinkhorn_divergence(b, a, cfg).value)
        assert abs(ab - ba) < 1e-9
        assert ab > -1e-9

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(6, 2))
        b = rng.normal(size=(8, 2)) + 0.3
        cfg = SinkhornConfig(epsilon=0.1, train_iters=150)
        node = ad.Node(a)
        res = ot.sinkhorn_divergence(node, b, cfg)
        ad.backward(res.value)
        h = 1e-6

        def val(x):
            return float(ad.value_of(ot.sinkhorn_divergence(ad.Node(x), b, cfg).value))

        num = np.zeros_like(a)
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                ap, am = a.copy(), a.copy()
                ap[i, j] += h
                am[i, j] -= h
                num[i, j] = (val(ap) - val(am)) / (2 * h)
        rel = np.abs(num - node.grad) / (1 + np.abs(num))
        assert rel.max() < 1e-4

    def test_warning_status_on_non_convergence(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(30, 2))
        b = rng.normal(size=(30, 2)) + 2.0
        res = ot.sinkhorn_divergence(a, b, SinkhornConfig(epsilon=1e-4, max_iters=20))
        assert not res.converged


class TestEmdExact:
    def test_1d_equals_sorted_pairing(self):
        rng = np.random.default_rng(7)
        for n in (8, 200, 1024):
            a = rng.normal(size=(n, 1))
            b = rng.normal(size=(n, 1))
            sorted_cost = float(np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2))
            assert ot.emd_exact(a, b) == pytest.approx(sorted_cost, abs=1e-12)

    def test_two_point_enumeration(self):
        a = np.array([[0.0, 0.0], [1.0, 0.0]])
        b = np.array([[1.0, 0.0], [2.0, 0.0]])
        # pairings: identity -> (1+1)/2 = 1; swap -> (4+0)/2 = 2
        assert ot.emd_exact(a, b) == pytest.approx(1.0, abs=1e-15)
        assert ot.mdd(a, b) == pytest.approx(1.0, abs=1e-15)

    def test_permutation_is_zero(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(20, 3))
        b = a[rng.permutation(20)]
        assert ot.emd_exact(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_euclidean_cost(self):
        a = np.array([[0.0], [0.0]])
        b = np.array([[3.0], [3.0]])
        assert ot.emd_exact(a, b, "euclidean") == pytest.approx(3.0)

    def test_unequal_sizes_lp(self):
        a = np.array([[0.0]])
        b = np.array([[-1.0], [1.0]])
        # the single source splits evenly: cost = 0.5*1 + 0.5*1
        assert ot.emd_exact(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_unknown_cost_rejected(self):
        with pytest.raises(ValueError):
            ot.emd_exact(np.zeros((2, 1)), np.zeros((2, 1)), "manhattan")


class TestMdd:
    def test_identical_zero_and_symmetry(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(40, 2))
        b = rng.normal(size=(40, 2))
        assert ot.mdd(a, a.copy()) == pytest.approx(0.0, abs=1e-8)
        assert ot.mdd(a, b) == pytest.approx(ot.mdd(b, a), abs=1e-12)

    def test_matches_1d_sorted_noise_floor(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((1000, 1))
        b = rng.standard_normal((1000, 1))
        floor = np.sqrt(np.mean((np.sort(a[:, 0]) - np.sort(b[:, 0])) ** 2))
        assert ot.mdd(a, b) == pytest.approx(floor, abs=1e-12)


class TestCdd:
    @staticmethod
    def make_sim(delta: float, noise_scale: float = 0.0):
        def sim(starts, eval_times, stream):
            starts = np.atleast_2d(starts)
            rng = np.random.default_rng(abs(hash(tuple(np.atleast_1d(stream).tolist()))) % (2**32)
                                        if not np.isscalar(stream) else stream)
            out = []
            for t in eval_times:
                wobble = noise_scale * rng.standard_normal(starts.shape)
                out.append(starts + delta * t + wobble)
            return np.stack(out)
        return sim

    def test_shared_dynamics_zero(self):
        sim = self.make_sim(0.3, noise_scale=0.0)
        starts = np.random.default_rng(11).normal(size=(10, 1))
        vals = ot.cdd(sim, sim, starts, [0.0, 0.5, 1.0], n_traj=5,
                      seed_model=1, seed_truth=1)
        assert np.allclose(vals, 0.0, atol=1e-12)

    def test_constant_drift_offset(self):
        sim_a = self.make_sim(0.0)
        sim_b = self.make_sim(0.5)
        starts = np.zeros((6, 1))
        times = [0.0, 1.0, 2.0]
        vals = ot.cdd(sim_a, sim_b, starts, times, n_traj=4,
                      seed_model=1, seed_truth=2)
        assert np.allclose(vals, [0.0, 0.5, 1.0], atol=1e-12)

    def test_thread_count_invariance(self):
        sim_a = self.make_sim(0.0, noise_scale=0.1)
        sim_b = self.make_sim(0.2, noise_scale=0.1)
        starts = np.random.default_rng(12).normal(size=(8, 2))
        times = [0.5, 1.0]
        one = ot.cdd(sim_a, sim_b, starts, times, n_traj=6, threads=1)
        four = ot.cdd(sim_a, sim_b, starts, times, n_traj=6, threads=4)
        assert np.array_equal(one, four)


def test_metrics_csv_roundtrip(tmp_path):
    rows = [("mdd", 1.0, 0.25, 0.01, 10), ("cdd", 2.0, 0.5, 0.0, 100)]
    path = tmp_path / "metrics.csv"
    ot.write_metrics_csv(path, rows)
    back = ot.read_metrics_csv(path)
    assert back[0]["metric"] == "mdd" and back[0]["mean"] == 0.25
    assert back[1]["n_runs"] == 100
