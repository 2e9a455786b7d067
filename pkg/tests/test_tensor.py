import math
import struct

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clcsca import tensor as tt
from clcsca.errors import ContractError, FormatError, ShapeError
from clcsca.tensor import Tensor


def triple_loop(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i][p] * b[p][j]
            out[i][j] = s
    return np.array(out)


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(tt.matmul(Tensor(a), Tensor(np.eye(3))).data, a)

    def test_hand_example(self):
        out = tt.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        got = tt.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - triple_loop(a.tolist(), b.tolist())).max() <= 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
        arrays(np.float64, (4, 2), elements=st.floats(-10, 10)),
    )
    def test_matches_triple_loop_on_bounded_inputs(self, a, b):
        got = tt.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - triple_loop(a.tolist(), b.tolist())).max() <= 1e-12


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(tt.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_large_values_do_not_overflow(self):
        out = tt.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        np.testing.assert_array_equal(out, [[0.5, 0.5]])

    def test_against_high_precision(self):
        mpmath.mp.dps = 50
        e1, e2 = mpmath.e, mpmath.e**2
        expected = [float(e1 / (e1 + e2)), float(e2 / (e1 + e2))]
        np.testing.assert_allclose(tt.softmax_rows(Tensor([[1.0, 2.0]])).data[0], expected, rtol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-1e300, 1e300)))
    def test_rows_sum_to_one(self, x):
        out = tt.softmax_rows(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


class TestLinear:
    def test_identity_weight(self):
        x = np.random.default_rng(2).normal(size=(3, 4))
        np.testing.assert_array_equal(tt.linear(Tensor(x), Tensor(np.eye(4))).data, x)

    def test_zero_input_gives_bias(self):
        b = np.array([1.0, -2.0, 0.5])
        out = tt.linear(Tensor(np.zeros((4, 2))), Tensor(np.ones((2, 3))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (4, 1)))

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        x, W, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        expected = triple_loop(x.tolist(), W.tolist()) + b
        got = tt.linear(Tensor(x), Tensor(W), Tensor(b)).data
        assert np.abs(got - expected).max() <= 1e-12

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            tt.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(tt.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_max_over_rows(self):
        np.testing.assert_array_equal(tt.max_over_rows(Tensor([[1, 5], [3, 2]])).data, [[3, 5]])

    def test_concat_cols(self):
        a, b = np.arange(6.0).reshape(3, 2), -np.arange(3.0).reshape(3, 1)
        out = tt.concat_cols(Tensor(a), Tensor(b)).data
        assert out.shape == (3, 3)
        np.testing.assert_array_equal(out[:, :2], a)
        np.testing.assert_array_equal(out[:, 2:], b)

    def test_mean_transpose(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(tt.mean_over_rows(Tensor(x)).data, [[1.5, 2.5, 3.5]])
        np.testing.assert_array_equal(tt.transpose(Tensor(x)).data, x.T)

    def test_only_bias_broadcast_is_allowed(self):
        tt.add(Tensor(np.ones((3, 2))), Tensor(np.ones(2)))
        with pytest.raises(ShapeError):
            tt.add(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 1))))
        with pytest.raises(ShapeError):
            tt.mul(Tensor(np.ones((3, 2))), Tensor(np.ones(2)))

    def test_group_max(self):
        x = Tensor([[1.0, 0.0], [2.0, -1.0], [0.0, 5.0], [4.0, 1.0]])
        np.testing.assert_array_equal(tt.group_max(x, 2).data, [[2, 0], [4, 5]])


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        tt.backward(tt.sum_all(tt.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_relu_negative(self):
        x = Tensor([-2.0], requires_grad=True)
        tt.backward(tt.sum_all(tt.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_relu_kink_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        tt.backward(tt.sum_all(tt.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_non_scalar_loss_is_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            tt.backward(tt.scale(x, 2.0))

    def test_leaf_grad_matches_value_shape(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        tt.backward(tt.sum_all(tt.relu(x)))
        assert x.grad.size == x.values.size

    def test_tape_is_topological_and_reversed(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = tt.relu(tt.matmul(x, x))
        loss = tt.sum_all(tt.add(y, x))
        nodes = tt.trace(loss)
        position = {t.node: i for i, t in enumerate(nodes)}
        for t in nodes:
            for p in t._parents:
                assert position[p.node] < position[t.node]
        assert [t.node for t in nodes] == sorted(t.node for t in nodes)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
        grads = []
        for _ in range(2):
            ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            tt.backward(tt.sum_all(tt.softmax_rows(tt.matmul(ta, tb))))
            grads.append((ta.grad.copy(), tb.grad.copy()))
        assert grads[0][0].tobytes() == grads[1][0].tobytes()
        assert grads[0][1].tobytes() == grads[1][1].tobytes()

    def test_gather_rows_accumulates_repeats(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        tt.backward(tt.sum_all(tt.gather_rows(x, [2, 0, 2, 2])))
        np.testing.assert_array_equal(x.grad, [[1, 1], [0, 0], [3, 3]])


def _rand(rng, shape):
    # keep away from relu's kink and from max ties
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < 0.05, 0.3, x)


OPS = {
    "matmul": (lambda a, b: tt.matmul(a, b), [(3, 4), (4, 2)]),
    "linear": (lambda x, W, b: tt.linear(x, W, b), [(4, 3), (3, 2), (2,)]),
    "add": (lambda a, b: tt.add(a, b), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: tt.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: tt.sub(a, b), [(2, 3), (2, 3)]),
    "mul": (lambda a, b: tt.mul(a, b), [(4, 4), (4, 4)]),
    "scale": (lambda a: tt.scale(a, -1.7), [(3, 3)]),
    "relu": (lambda a: tt.relu(a), [(4, 4)]),
    "transpose": (lambda a: tt.transpose(a), [(2, 4)]),
    "concat_cols": (lambda a, b: tt.concat_cols(a, b), [(3, 2), (3, 3)]),
    "max_over_rows": (lambda a: tt.max_over_rows(a), [(4, 3)]),
    "group_max": (lambda a: tt.group_max(a, 2), [(4, 3)]),
    "mean_over_rows": (lambda a: tt.mean_over_rows(a), [(4, 3)]),
    "standardize_rows": (lambda a: tt.standardize_rows(a), [(5, 3)]),
    "softmax_rows": (lambda a: tt.softmax_rows(a), [(3, 4)]),
    "gather_rows": (lambda a: tt.gather_rows(a, [1, 0, 1, 3]), [(4, 2)]),
    "sum_all": (lambda a: tt.sum_all(a), [(3, 2)]),
    "nll": (lambda a: tt.log_softmax_nll(a, [0, 2, 1]), [(3, 4)]),
}


def test_standardize_rows_worksheet():
    x = Tensor(np.array([[1.0, 10.0], [3.0, 10.0]]))
    y = tt.standardize_rows(x, eps=1e-12).data
    # column 0: mean 2, std 1; column 1 is constant, so only eps keeps it finite
    np.testing.assert_allclose(y[:, 0], [-1.0, 1.0], atol=1e-9)
    np.testing.assert_array_equal(y[:, 1], [0.0, 0.0])
    z = tt.standardize_rows(Tensor(np.random.default_rng(1).normal(3, 5, size=(50, 4)))).data
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-6)


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(6))
def test_op_gradients_match_finite_differences(name, seed):
    fn, shapes = OPS[name]
    rng = np.random.default_rng([seed, len(name)])
    inputs = [Tensor(_rand(rng, s)) for s in shapes]
    report = tt.finite_diff_check(fn, inputs, step=1e-5, tol=1e-4)
    assert report.passed, (name, report.max_rel_err)


class TestFiniteDiffCheck:
    def test_identity_has_no_error(self):
        x = Tensor(np.random.default_rng(5).normal(size=(3, 3)))
        report = tt.finite_diff_check(lambda a: a, x)
        assert report.max_rel_err <= 1e-9

    def test_softmax(self):
        x = Tensor(np.random.default_rng(6).normal(size=(3, 3)))
        assert tt.finite_diff_check(tt.softmax_rows, x).max_rel_err <= 1e-4

    def test_detects_wrong_gradient(self):
        def broken(a):
            out = tt.scale(a, 2.0)
            out._backward = lambda g: tt._accumulate(a, g)  # claims slope 1
            return out

        report = tt.finite_diff_check(broken, Tensor(np.ones((2, 2))))
        assert not report.passed


class TestCheckpointFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        named = {"a.W": rng.normal(size=(3, 2)), "b": rng.normal(size=4), "ü": np.ones((1, 1, 2))}
        tt.save_tensors(tmp_path / "x.clcw", named)
        back = tt.load_tensors(tmp_path / "x.clcw")
        assert list(back) == list(named)
        for k in named:
            assert back[k].tobytes() == named[k].tobytes()
        tt.save_tensors(tmp_path / "y.clcw", back)
        assert (tmp_path / "x.clcw").read_bytes() == (tmp_path / "y.clcw").read_bytes()

    def test_layout(self, tmp_path):
        tt.save_tensors(tmp_path / "x.clcw", {"w": np.array([[1.5, -2.0]])})
        raw = (tmp_path / "x.clcw").read_bytes()
        assert raw[:4] == b"CLCW"
        assert struct.unpack_from("<III", raw, 4) == (1, 1, 1)
        assert raw[16:17] == b"w"
        assert struct.unpack_from("<I2Q", raw, 17) == (2, 1, 2)
        assert struct.unpack_from("<2d", raw, 37) == (1.5, -2.0)
        assert len(raw) == 53

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.clcw").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(FormatError, match="magic"):
            tt.load_tensors(tmp_path / "x.clcw")

    def test_truncated(self, tmp_path):
        tt.save_tensors(tmp_path / "x.clcw", {"w": np.ones((4, 4))})
        raw = (tmp_path / "x.clcw").read_bytes()
        (tmp_path / "x.clcw").write_bytes(raw[:-5])
        with pytest.raises(FormatError) as err:
            tt.load_tensors(tmp_path / "x.clcw")
        assert err.value.offset is not None

    def test_bad_version(self, tmp_path):
        (tmp_path / "x.clcw").write_bytes(b"CLCW" + struct.pack("<II", 9, 0))
        with pytest.raises(FormatError, match="version"):
            tt.load_tensors(tmp_path / "x.clcw")
