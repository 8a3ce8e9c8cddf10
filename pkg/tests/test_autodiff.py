import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bridgeforge import autodiff as ad


def finite_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(np.eye(2), a), a)

    def test_hand_product(self):
        out = ad.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert out.shape == (1, 1) and out[0, 0] == 11.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        assert np.max(np.abs(ad.matmul(a, b) - ref)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestElementwise:
    def test_logcosh2_at_zero(self):
        assert abs(float(ad.logcosh2(np.zeros(1))[0]) - np.log(2.0)) < 1e-14

    def test_logcosh2_no_overflow(self):
        assert abs(float(ad.logcosh2(np.array([50.0]))[0]) - 50.0) < 1e-12
        assert np.isfinite(ad.logcosh2(np.array([-100.0, 100.0]))).all()

    def test_logcosh2_derivative_is_tanh(self):
        x = ad.Node(np.array([0.3]))
        ad.backward(ad.asum(ad.logcosh2(x)))
        assert abs(x.grad[0] - np.tanh(0.3)) < 1e-12
        num = finite_diff(lambda v: float(np.log(np.exp(v[0]) + np.exp(-v[0]))),
                          np.array([0.3]))
        assert abs(x.grad[0] - num[0]) < 1e-8

    def test_lipswish_value(self):
        x = np.array([1.3])
        expected = 1.3 / (1 + np.exp(-1.3)) / 1.1
        assert abs(float(ad.lipswish(x)[0]) - expected) < 1e-14

    def test_no_nonfinite_for_moderate_inputs(self):
        x = np.linspace(-100, 100, 41)
        for fn in (ad.tanh, ad.logcosh2, ad.lipswish, ad.square, ad.absval):
            assert np.isfinite(fn(x)).all()


class TestBackward:
    def test_sum_of_squares(self):
        p = ad.Node(np.array([1.0, 2.0, 3.0]))
        ad.backward(ad.asum(ad.square(p)))
        assert np.allclose(p.grad, [2.0, 4.0, 6.0], atol=1e-14)

    def test_w_tanh_kx_matches_fd(self):
        rng = np.random.default_rng(1)
        K = ad.Node(rng.normal(size=(4, 3)))
        w = ad.Node(rng.normal(size=(4, 1)))
        x = rng.normal(size=(3, 1))
        ad.backward(ad.asum(ad.mul(w, ad.tanh(ad.matmul(K, x)))))

        def f_k(Kv):
            return float(np.sum(w.value * np.tanh(Kv @ x)))

        def f_w(wv):
            return float(np.sum(wv * np.tanh(K.value @ x)))

        for node, f in ((K, f_k), (w, f_w)):
            num = finite_diff(f, node.value.copy())
            rel = np.abs(num - node.grad) / (1 + np.abs(num))
            assert rel.max() < 1e-6

    def test_repeat_after_zero_grads_identical(self):
        rng = np.random.default_rng(2)
        store = ad.ParamStore({"p": rng.normal(size=(3, 2))})

        def run():
            root = ad.asum(ad.square(ad.tanh(store["p"])))
            ad.backward(root)
            g = store["p"].grad.copy()
            store.zero_grads()
            return g

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ValueError):
            ad.backward(ad.Node(np.zeros((2, 2))))
        with pytest.raises(TypeError):
            ad.backward(np.zeros(()))

    def test_broadcast_bias_grad(self):
        b = ad.Node(np.array([[1.0], [2.0]]))
        x = np.ones((2, 5))
        ad.backward(ad.asum(ad.mul(ad.add(x, b), 3.0 * np.ones((2, 5)))))
        assert np.allclose(b.grad, [[15.0], [15.0]])

    def test_mm3_matches_einsum(self):
        rng = np.random.default_rng(3)
        A = ad.Node(rng.normal(size=(3, 4)))
        B = ad.Node(rng.normal(size=(4, 2, 5)))
        out = ad.mm3(A, B)
        assert np.allclose(ad.value_of(out),
                           np.einsum("pq,qrn->prn", A.value, B.value))
        ad.backward(ad.asum(ad.square(out)))
        for node, reducer in ((A, "pq"), (B, "qrn")):
            def f(v, node=node):
                old = node.value
                node.value = v
                r = float(np.sum(np.einsum("pq,qrn->prn", A.value, B.value) ** 2))
                node.value = old
                return r

            num = finite_diff(f, node.value.copy())
            assert np.max(np.abs(num - node.grad) / (1 + np.abs(num))) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_composed_gradients_match_fd(seed):
    """Reverse-mode gradient of a randomly composed scalar function agrees
    with central finite differences on inputs in [-2, 2]."""
    rng = np.random.default_rng(seed)
    p = ad.Node(rng.uniform(-2, 2, size=(3, 2)))
    W = rng.uniform(-1, 1, size=(2, 3))

    def graph(node_or_value):
        h = ad.tanh(ad.matmul(W, node_or_value))
        h = ad.add(h, ad.scale(ad.take_rows(ad.logcosh2(node_or_value), 0, 2), 0.5))
        h = ad.lipswish(ad.mul(h, h))
        return ad.amean(ad.absval(h))

    root = graph(p)
    ad.backward(root)
    num = finite_diff(lambda v: float(ad.value_of(graph(v))), p.value.copy())
    rel = np.abs(num - p.grad) / (1 + np.abs(num))
    assert rel.max() < 1e-5


def test_tape_determinism_bit_identical():
    rng = np.random.default_rng(7)
    vals = rng.normal(size=(4, 4))

    def run():
        store = ad.ParamStore({"a": vals})
        root = ad.amean(ad.square(ad.tanh(ad.matmul(store["a"], vals))))
        ad.backward(root)
        return store["a"].grad.copy()

    assert np.array_equal(run(), run())


def test_param_store_contract():
    store = ad.ParamStore({"a": np.ones((2, 2))})
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))
    with pytest.raises(ValueError):
        store.set_values({"a": np.zeros((3, 3))})
    assert np.allclose(store.grads_dict()["a"], 0.0)
    ad.backward(ad.asum(store["a"]))
    assert np.allclose(store.grads_dict()["a"], 1.0)
    store.zero_grads()
    assert store["a"].grad is None
