"""Tape and reverse-sweep correctness, checked against finite differences."""

import numpy as np
import pytest

from bsdelearn import autodiff as ad
from bsdelearn.errors import NonFiniteError, ShapeError


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at x (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return grad


def rel_err(a, b):
    denom = max(np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


class TestPrimitiveValues:
    def test_tanh_zero_and_adjoint(self):
        t = ad.Tape()
        x = t.parameter(0.0)
        y = ad.tanh(x)
        assert y.value == 0.0
        grads = ad.backward(t, y)
        assert grads[x.nid] == 1.0  # tanh'(0) = 1

    def test_matmul_identity(self):
        t = ad.Tape()
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = ad.matmul(t.constant(np.eye(3)), t.constant(a))
        np.testing.assert_array_equal(out.value, a)

    def test_sum_square_hand_chain_rule(self):
        t = ad.Tape()
        x = t.parameter([3.0, 4.0])
        loss = ad.sum_(ad.square(x))
        assert loss.value == 25.0
        grads = ad.backward(t, loss)
        np.testing.assert_allclose(grads[x.nid], [6.0, 8.0])

    def test_theta_squared(self):
        t = ad.Tape()
        th = t.parameter(3.0)
        grads = ad.backward(t, ad.square(th))
        assert grads[th.nid] == 6.0

    def test_linear_map_gradient_structure(self):
        # root = sum(W @ x): dW = outer(1, x) broadcast over output rows
        t = ad.Tape()
        rng = np.random.default_rng(1)
        w = t.parameter(rng.normal(size=(3, 4)))
        x = rng.normal(size=(4, 1))
        root = ad.sum_(ad.matmul(w, t.constant(x)))
        grads = ad.backward(t, root)
        np.testing.assert_allclose(grads[w.nid], np.tile(x.T, (3, 1)))


UNARY_CASES = [
    ("tanh", ad.tanh, None),
    ("sin", ad.sin, None),
    ("cos", ad.cos, None),
    ("exp", ad.exp, None),
    ("ln", ad.log, "positive"),
    ("square", ad.square, None),
]


class TestFiniteDifferenceOracle:
    @pytest.mark.parametrize("name,op,domain", UNARY_CASES)
    def test_unary_ops(self, name, op, domain):
        rng = np.random.default_rng(hash(name) % 2**32)
        x0 = rng.normal(size=(4, 3))
        if domain == "positive":
            x0 = 1.0 + np.abs(x0)

        def f(x):
            t = ad.Tape()
            return float(ad.sum_(ad.square(op(t.parameter(x)))).value)

        t = ad.Tape()
        x = t.parameter(x0)
        root = ad.sum_(ad.square(op(x)))
        grads = ad.backward(t, root)
        assert rel_err(grads[x.nid], central_diff(f, x0)) < 1e-5

    @pytest.mark.parametrize("case", ["add", "sub", "mul", "scale", "matmul22",
                                      "matmul33", "matmul32", "affine", "concat",
                                      "slice", "transpose", "reshape", "mean", "sum_axis"])
    def test_composite_ops(self, case):
        rng = np.random.default_rng(abs(hash(case)) % 2**32)
        a0 = rng.normal(size=(3, 4))

        def build(t, a):
            b = t.constant(rng_fixed)
            if case == "add":
                return ad.add(a, b)
            if case == "sub":
                return ad.sub(a, b)
            if case == "mul":
                return ad.mul(a, b)
            if case == "scale":
                return ad.scale(a, 1.7)
            if case == "matmul22":
                return ad.matmul(a, t.constant(m22))
            if case == "matmul33":
                return ad.matmul(ad.reshape(a, (2, 2, 3)), t.constant(m33))
            if case == "matmul32":
                return ad.matmul(ad.reshape(a, (2, 2, 3)), t.constant(m32))
            if case == "affine":
                return ad.affine(a, t.constant(m_aff), t.constant(b_aff))
            if case == "concat":
                return ad.concat([a, b], axis=1)
            if case == "slice":
                return ad.slice_axis(a, 1, 1, 3)
            if case == "transpose":
                return ad.transpose(a)
            if case == "reshape":
                return ad.reshape(a, (2, 6))
            if case == "mean":
                return ad.mean(a, axis=0)
            if case == "sum_axis":
                return ad.sum_(a, axis=1, keepdims=True)
            raise AssertionError(case)

        rng_fixed = rng.normal(size=(3, 4))
        m22 = rng.normal(size=(4, 2))
        m33 = rng.normal(size=(2, 3, 2))
        m32 = rng.normal(size=(3, 2))
        m_aff = rng.normal(size=(5, 4))
        b_aff = rng.normal(size=5)

        def f(x):
            t = ad.Tape()
            return float(ad.sum_(ad.square(build(t, t.parameter(x)))).value)

        t = ad.Tape()
        a = t.parameter(a0)
        grads = ad.backward(t, ad.sum_(ad.square(build(t, a))))
        assert rel_err(grads[a.nid], central_diff(f, a0)) < 1e-5

    def test_random_three_layer_graph(self):
        rng = np.random.default_rng(7)
        w1, w2, w3 = (rng.normal(size=(5, 5)) / np.sqrt(5) for _ in range(3))
        x = rng.normal(size=(6, 5))

        def value(params):
            a, b, c = params[:25].reshape(5, 5), params[25:50].reshape(5, 5), params[50:].reshape(5, 5)
            h = np.tanh(x @ a.T)
            h = np.tanh(h @ b.T)
            return float(np.sum(np.square(h @ c.T)))

        t = ad.Tape()
        p1, p2, p3 = t.parameter(w1), t.parameter(w2), t.parameter(w3)
        h = ad.tanh(ad.matmul(t.constant(x), ad.transpose(p1)))
        h = ad.tanh(ad.matmul(h, ad.transpose(p2)))
        root = ad.sum_(ad.square(ad.matmul(h, ad.transpose(p3))))
        grads = ad.backward(t, root)
        flat = np.concatenate([w1.ravel(), w2.ravel(), w3.ravel()])
        fd = central_diff(value, flat)
        got = np.concatenate([grads[p1.nid].ravel(), grads[p2.nid].ravel(), grads[p3.nid].ravel()])
        assert rel_err(got, fd) < 1e-5


class TestInputGradient:
    def _chain(self, tape, weights, biases, x_rows):
        v = tape.constant(x_rows)
        layers = [(tape.parameter(w), tape.parameter(b)) for w, b in zip(weights, biases)]
        hiddens = []
        h = v
        for w, b in layers[:-1]:
            h = ad.tanh(ad.affine(h, w, b))
            hiddens.append(h)
        out = ad.affine(h, *layers[-1])
        return layers, hiddens, out

    def test_one_hidden_layer_closed_form(self):
        rng = np.random.default_rng(3)
        d, eta, rows = 4, 6, 5
        w1, b1 = rng.normal(size=(eta, d)), rng.normal(size=eta)
        w2, b2 = rng.normal(size=(1, eta)), rng.normal(size=1)
        x = rng.normal(size=(rows, d))

        t = ad.Tape()
        layers, hiddens, _ = self._chain(t, [w1, w2], [b1, b2], x)
        g = ad.input_gradient_rows(layers, hiddens, rows)

        z = x @ w1.T + b1
        expected = (w2 * (1 - np.tanh(z) ** 2)) @ w1  # W2 diag(tanh') W1 per row
        np.testing.assert_allclose(g.value, expected, atol=1e-12, rtol=1e-12)

    def test_linear_chain_is_constant(self):
        rng = np.random.default_rng(4)
        c = rng.normal(size=(1, 3))
        t = ad.Tape()
        layers = [(t.parameter(c), t.parameter(np.zeros(1)))]
        g = ad.input_gradient_rows(layers, [], 7)
        np.testing.assert_allclose(g.value, np.tile(c, (7, 1)))

    def test_second_order_parameter_gradient_vs_fd(self):
        # root = |input-gradient|^2 summed over rows; FD in the parameters
        rng = np.random.default_rng(5)
        d, eta, rows = 3, 4, 4
        w1, b1 = rng.normal(size=(eta, d)), rng.normal(size=eta)
        w2, b2 = rng.normal(size=(1, eta)), rng.normal(size=1)
        x = rng.normal(size=(rows, d))
        sizes = [w1.size, b1.size, w2.size, b2.size]

        def unpack(vec):
            parts = np.split(vec, np.cumsum(sizes)[:-1])
            return (parts[0].reshape(eta, d), parts[1], parts[2].reshape(1, eta), parts[3])

        def value(vec):
            a1, c1, a2, _ = unpack(vec)
            z = x @ a1.T + c1
            g = (a2 * (1 - np.tanh(z) ** 2)) @ a1
            return float(np.sum(np.square(g)))

        t = ad.Tape()
        layers, hiddens, _ = self._chain(t, [w1, w2], [b1, b2], x)
        g = ad.input_gradient_rows(layers, hiddens, rows)
        grads = ad.backward(t, ad.sum_(ad.square(g)))
        got = np.concatenate([grads[n.nid].ravel() for pair in layers for n in pair])
        fd = central_diff(value, np.concatenate([w1.ravel(), b1, w2.ravel(), b2]))
        assert rel_err(got, fd) < 1e-4


class TestTapeContract:
    def test_disconnected_parameters_get_exact_zeros(self):
        t = ad.Tape()
        used = t.parameter([2.0])
        unused = t.parameter(np.ones((3, 2)))
        grads = ad.backward(t, ad.sum_(ad.square(used)))
        assert grads[unused.nid].shape == (3, 2)
        assert np.all(grads[unused.nid] == 0.0)

    def test_overlapping_slices_accumulate(self):
        t = ad.Tape()
        x = t.parameter(np.arange(4.0))
        a = ad.slice_axis(x, 0, 0, 3)
        b = ad.slice_axis(x, 0, 1, 4)
        grads = ad.backward(t, ad.sum_(ad.add(a, b)))
        np.testing.assert_array_equal(grads[x.nid], [1.0, 2.0, 2.0, 1.0])

    def test_deterministic_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            t = ad.Tape()
            w = t.parameter(rng.normal(size=(4, 4)))
            x = t.constant(rng.normal(size=(5, 4)))
            root = ad.sum_(ad.square(ad.tanh(ad.matmul(x, w))))
            grads = ad.backward(t, root)
            return root.value.copy(), grads[w.nid].copy()

        v1, g1 = run()
        v2, g2 = run()
        assert np.array_equal(v1, v2) and np.array_equal(g1, g2)

    def test_non_scalar_root_rejected(self):
        t = ad.Tape()
        x = t.parameter(np.ones(3))
        with pytest.raises(ShapeError):
            ad.backward(t, ad.square(x))

    def test_shape_mismatch_rejected(self):
        t = ad.Tape()
        with pytest.raises(ShapeError):
            ad.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))

    def test_check_finite_raises(self):
        t = ad.Tape(check_finite=True)
        with pytest.raises(NonFiniteError):
            ad.log(t.constant([-1.0]))

    def test_parents_precede_children(self):
        t = ad.Tape()
        x = t.parameter(np.ones(2))
        y = ad.square(ad.tanh(x))
        for node in t.nodes:
            assert all(p < node.nid for p in node.parents)
        assert y.nid == len(t.nodes) - 1
