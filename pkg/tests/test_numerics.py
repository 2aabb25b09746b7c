import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lotus import numerics as nx
from lotus.errors import DimensionError, InputError, UsageError
from lotus.numerics import Tensor


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        out = nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        out = nx.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(out - naive_matmul(a, b))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_dtype_mismatch(self):
        with pytest.raises(DimensionError):
            nx.matmul(Tensor(np.zeros((2, 2), np.float32)), Tensor(np.zeros((2, 2), np.float64)))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_closed_form(self):
        np.testing.assert_allclose(nx.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_no_overflow(self):
        out = nx.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 2))
    def test_rows_sum_to_one(self, seed, axis):
        x = np.random.default_rng(seed).uniform(-1e4, 1e4, size=(3, 4, 5))
        y = nx.softmax(Tensor(x), axis=axis).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-6)


def gelu_scalar(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


class TestActivation:
    def test_gelu_zero(self):
        assert nx.apply_activation(nx.Activation.GELU, Tensor([0.0])).data[0] == 0.0

    def test_gelu_asymptote(self):
        assert abs(nx.apply_activation("gelu", Tensor([10.0])).data[0] - 10.0) < 1e-4

    def test_gelu_matches_scalar_formula(self):
        assert abs(nx.gelu(Tensor([1.0])).data[0] - gelu_scalar(1.0)) < 1e-10

    def test_identity(self):
        x = Tensor([1.0, -2.0])
        assert nx.apply_activation(nx.Activation.IDENTITY, x) is x


class TestLayerNorm:
    def ln(self, row, eps=1e-5):
        d = len(row)
        return nx.layer_norm(Tensor([row]), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps).data[0]

    def test_constant_row(self):
        np.testing.assert_array_equal(self.ln([5.0, 5.0, 5.0]), [0, 0, 0])

    def test_normalized_row(self):
        np.testing.assert_allclose(self.ln([1.0, -1.0], eps=1e-14), [1.0, -1.0], atol=1e-12)

    def test_moments(self):
        row = np.random.default_rng(3).normal(2.0, 3.0, size=64)
        out = self.ln(row)
        assert abs(out.mean()) < 1e-6
        assert abs(out.var() - 1.0) < 1e-3

    def test_bad_gamma(self):
        with pytest.raises(DimensionError):
            nx.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


class TestCrossEntropy:
    def test_uniform(self):
        assert nx.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_saturated(self):
        assert nx.cross_entropy(Tensor([[100.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-40)

    def test_against_per_row_scalar(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(3, 5)) * 4
        y = [4, 0, 2]
        expected = 0.0
        for row, lab in zip(z, y):
            expected += -(row[lab] - math.log(sum(math.exp(v) for v in row)))
        expected /= 3
        assert abs(nx.cross_entropy(Tensor(z), y).item() - expected) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            nx.cross_entropy(Tensor([[0.0, 1.0]]), [2])


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
        with nx.Tape() as tape:
            loss = nx.sum_all(x)
        nx.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = leaf([1.0, 2.0])
        with nx.Tape() as tape:
            loss = nx.sum_all(nx.mul(x, x))
        nx.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulates_over_branches(self):
        x = leaf([0.5, -3.0, 2.0])
        with nx.Tape() as tape:
            a = nx.scale(x, 1.0)
            loss = nx.sum_all(nx.mul(a, x))
        nx.backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_loss(self):
        x = leaf([1.0, 2.0])
        with nx.Tape() as tape:
            y = nx.scale(x, 2.0)
        with pytest.raises(UsageError):
            nx.backward(y, tape)

    def test_reverse_order_and_topology(self):
        x = leaf([1.0])
        with nx.Tape() as tape:
            y = nx.scale(x, 3.0)
            z = nx.mul(y, y)
            loss = nx.sum_all(z)
        ids = {id(x)}
        for node in tape.nodes:
            assert all(id(t) in ids for t in node.inputs)
            ids.add(id(node.output))
        nx.backward(loss, tape)
        assert x.grad[0] == pytest.approx(18.0)

    def test_no_tape_no_record(self):
        x = leaf([1.0])
        y = nx.scale(x, 2.0)
        assert not y.requires_grad


def finite_diff_check(build, tensors, h=1e-5, rng=None, per_tensor=5):
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    with nx.Tape() as tape:
        loss = build()
    nx.backward(loss, tape)
    for t in tensors:
        for j in rng.choice(t.data.size, min(per_tensor, t.data.size), replace=False):
            idx = np.unravel_index(j, t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            up = build().item()
            t.data[idx] = orig - h
            down = build().item()
            t.data[idx] = orig
            fd = (up - down) / (2 * h)
            an = t.grad[idx]
            diff = abs(fd - an)
            assert diff <= 1e-8 or diff / max(abs(fd), abs(an)) < 1e-6, (t.name, idx, fd, an)


class TestOpGradients:
    def test_composed_graph(self):
        rng = np.random.default_rng(11)
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = leaf(rng.normal(size=(4, 6)))
        b = leaf(rng.normal(size=6))
        g = leaf(rng.normal(size=6))
        beta = leaf(rng.normal(size=6))
        emb = leaf(rng.normal(size=(5, 6)))
        idx = np.array([[0, 4, 4], [1, 2, 0]])

        def build():
            h = nx.add_bias(nx.matmul(x, w), b)
            h = nx.add(h, nx.take(emb, idx))
            h = nx.layer_norm(h, g, beta)
            h = nx.gelu(h)
            h = nx.reshape(nx.transpose(h, (0, 2, 1)), (2, 6, 3))
            att = nx.softmax(nx.matmul(h, nx.transpose(h, (0, 2, 1))), axis=-1)
            h = nx.concat([nx.select(att, 1, 0), nx.select(att, 1, 5)], axis=1)
            return nx.cross_entropy(h, [3, 7])

        finite_diff_check(build, [x, w, b, g, beta, emb], rng=rng)


class TestAdam:
    def test_first_step_is_sign(self):
        p = {"w": leaf([1.0, -1.0, 0.5])}
        g = np.array([0.3, -2.0, 1e-3])
        st_ = nx.AdamState(lr=0.1, eps=1e-12)
        nx.adam_step(p, {"w": g}, st_)
        np.testing.assert_allclose(p["w"].data, np.array([1.0, -1.0, 0.5]) - 0.1 * np.sign(g), atol=1e-8)
        assert st_.t == 1

    def test_zero_grad_keeps_params(self):
        p = {"w": leaf([1.0, 2.0])}
        nx.adam_step(p, {"w": np.zeros(2)}, nx.AdamState())
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])

    def test_scalar_descent(self):
        w = leaf([0.0])
        state = nx.AdamState(lr=0.1)
        for _ in range(10):
            w.grad = None
            with nx.Tape() as tape:
                d = nx.add(w, Tensor([-3.0]))
                loss = nx.sum_all(nx.mul(d, d))
            nx.backward(loss, tape)
            nx.adam_step({"w": w}, {"w": w.grad}, state)
        assert abs(w.data[0] - 3.0) < 3.0
        assert state.t == 10

    def test_mask_pins_zeros(self):
        p = {"w": leaf([1.0, 2.0, 3.0])}
        keep = {"w": np.array([1, 0, 1], dtype=np.uint8)}
        st_ = nx.AdamState(lr=0.1)
        for _ in range(5):
            nx.adam_step(p, {"w": np.array([0.5, 0.5, -0.5])}, st_, mask=keep)
        assert p["w"].data[1] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            nx.adam_step({"w": leaf([1.0])}, {"w": np.zeros(2)}, nx.AdamState())
