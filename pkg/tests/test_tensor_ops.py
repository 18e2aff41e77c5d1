"""Tensor engine and op contracts, checked against finite differences.

The numeric oracle (gradcheck.grad_check) re-evaluates forward passes with
perturbed inputs; it shares no code with Tensor.backward().
"""

import numpy as np
import pytest

from mcrnet import ops
from mcrnet.errors import ConfigError, GeometryError, ShapeError
from mcrnet.gradcheck import grad_check
from mcrnet.tensor import Parameter, ParameterSet, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestDense:
    def test_sum_case(self):
        y = ops.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
        assert np.allclose(y.data, [[3.0]])

    def test_identity(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        y = ops.dense(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.array_equal(y.data, x)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 1\)"):
            ops.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 1))), Tensor(np.zeros(1)))

    def test_weight_gradient_of_sum(self, rng):
        # sum-of-outputs form; the projection trick reduces to a constant scale
        x, w, b = rng.standard_normal((5, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4)
        err = grad_check(lambda x_, w_, b_: ops.dense(x_, w_, b_).sum(), [x, w, b], wrt=[1])
        assert err < 1e-6

    def test_all_gradients(self, rng):
        x, w, b = rng.standard_normal((5, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4)
        assert grad_check(ops.dense, [x, w, b]) < 1e-6

    def test_batched_matches_loop(self, rng):
        x = rng.standard_normal((6, 5, 3))
        w, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
        batched = ops.dense(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(6):
            single = ops.dense(Tensor(x[i]), Tensor(w), Tensor(b)).data
            assert np.array_equal(batched[i], single)


class TestConv1d:
    def test_length_formula_paper_sizes(self, rng):
        x = rng.standard_normal((1024, 1))
        w, b = rng.standard_normal((3, 1, 8)), np.zeros(8)
        y = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1)
        assert y.shape == (512, 8)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((5, 1))
        y = ops.conv1d(Tensor(x), Tensor(np.ones((1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
        assert np.array_equal(y.data, x)

    def test_invalid_geometry(self):
        x = Tensor(np.zeros((2, 1)))
        with pytest.raises(GeometryError):
            ops.conv1d(x, Tensor(np.zeros((5, 1, 1))), Tensor(np.zeros(1)), stride=1, pad=0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_gradients(self, rng, stride, pad):
        x = rng.standard_normal((9, 2))
        w, b = rng.standard_normal((3, 2, 4)), rng.standard_normal(4)
        err = grad_check(
            lambda x_, w_, b_: ops.conv1d(x_, w_, b_, stride, pad), [x, w, b]
        )
        assert err < 1e-6

    def test_batched_matches_loop(self, rng):
        x = rng.standard_normal((4, 10, 2))
        w, b = rng.standard_normal((3, 2, 3)), rng.standard_normal(3)
        batched = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
        for i in range(4):
            single = ops.conv1d(Tensor(x[i]), Tensor(w), Tensor(b), 2, 1).data
            assert np.array_equal(batched[i], single)


class TestConvTranspose1d:
    @pytest.mark.parametrize("l_in,l_out", [(128, 256), (256, 512), (512, 1024)])
    def test_length_formula_paper_sizes(self, rng, l_in, l_out):
        x = rng.standard_normal((l_in, 2)).astype(np.float32)
        w = rng.standard_normal((3, 2, 2)).astype(np.float32)
        y = ops.conv_transpose1d(Tensor(x), Tensor(w), Tensor(np.zeros(2, np.float32)),
                                 stride=2, pad=1, output_pad=1)
        assert y.shape == (l_out, 2)

    def test_output_pad_must_be_less_than_stride(self):
        with pytest.raises(GeometryError):
            ops.conv_transpose1d(Tensor(np.zeros((4, 1))), Tensor(np.zeros((3, 1, 1))),
                                 Tensor(np.zeros(1)), stride=2, pad=1, output_pad=2)

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_of_conv1d(self, seed):
        # forward of the transpose == backward-input of the conv, same geometry
        rng = np.random.default_rng(seed)
        length, k, stride, pad = 7 + seed, [1, 3, 5][seed % 3], 1 + seed % 2, seed % 2
        c_in, c_out = 2, 3
        x = rng.standard_normal((length, c_in))
        w = rng.standard_normal((k, c_in, c_out))
        l_out = (length + 2 * pad - k) // stride + 1
        g = rng.standard_normal((l_out, c_out))

        xt = Tensor(x.copy())
        y = ops.conv1d(xt, Tensor(w), Tensor(np.zeros(c_out)), stride, pad)
        y.backward(g)

        out_pad = length + 2 * pad - k - (l_out - 1) * stride
        w_t = np.ascontiguousarray(np.swapaxes(w, 1, 2))
        fwd = ops.conv_transpose1d(Tensor(g.copy()), Tensor(w_t), Tensor(np.zeros(c_in)),
                                   stride, pad, out_pad)
        assert fwd.shape == (length, c_in)
        assert np.max(np.abs(fwd.data - xt.grad)) < 1e-10

    @pytest.mark.parametrize("stride,pad,out_pad", [(1, 0, 0), (2, 1, 1), (2, 0, 1), (2, 1, 0)])
    def test_gradients(self, rng, stride, pad, out_pad):
        x = rng.standard_normal((6, 2))
        w, b = rng.standard_normal((3, 2, 3)), rng.standard_normal(3)
        err = grad_check(
            lambda x_, w_, b_: ops.conv_transpose1d(x_, w_, b_, stride, pad, out_pad), [x, w, b]
        )
        assert err < 1e-6


class TestLengthFormulaSweep:
    """Output lengths must follow the documented formulas across the whole grid."""

    @pytest.mark.parametrize("k", [1, 3, 5])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("pad", [0, 1])
    def test_conv1d_lengths(self, k, stride, pad):
        for length in range(4, 33):
            if length + 2 * pad < k:
                continue
            expected = (length + 2 * pad - k) // stride + 1
            y = ops.conv1d(Tensor(np.zeros((length, 1))), Tensor(np.zeros((k, 1, 1))),
                           Tensor(np.zeros(1)), stride, pad)
            assert y.shape == (expected, 1), (length, k, stride, pad)

    @pytest.mark.parametrize("k", [1, 3, 5])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("pad", [0, 1])
    @pytest.mark.parametrize("out_pad", [0, 1])
    def test_conv_transpose1d_lengths(self, k, stride, pad, out_pad):
        if out_pad >= stride:
            return
        for length in range(4, 33):
            expected = (length - 1) * stride - 2 * pad + k + out_pad
            if expected < 1:
                continue
            y = ops.conv_transpose1d(Tensor(np.zeros((length, 1))), Tensor(np.zeros((k, 1, 1))),
                                     Tensor(np.zeros(1)), stride, pad, out_pad)
            assert y.shape == (expected, 1), (length, k, stride, pad, out_pad)


class TestDwconv1d:
    def test_k1_identity(self, rng):
        x = rng.standard_normal((6, 3))
        y = ops.dwconv1d(Tensor(x), Tensor(np.ones((1, 3))), Tensor(np.zeros(3)))
        assert np.array_equal(y.data, x)

    def test_k3_centered_delta(self, rng):
        x = rng.standard_normal((6, 3))
        w = np.zeros((3, 3))
        w[1, :] = 1.0
        y = ops.dwconv1d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        assert np.array_equal(y.data, x)

    def test_explicit_pad_must_preserve_length(self):
        with pytest.raises(GeometryError):
            ops.dwconv1d(Tensor(np.zeros((4, 2))), Tensor(np.zeros((3, 2))),
                         Tensor(np.zeros(2)), pad=0)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_gradients(self, rng, k):
        x = rng.standard_normal((8, 3))
        w, b = rng.standard_normal((k, 3)), rng.standard_normal(3)
        assert grad_check(ops.dwconv1d, [x, w, b]) < 1e-6


class TestActivations:
    def test_sigmoid_values(self):
        assert ops.sigmoid(Tensor(0.0)).item() == 0.5
        assert abs(ops.sigmoid(Tensor(1.0)).item() - 0.7310585786300049) < 1e-12

    def test_sigmoid_symmetry(self, rng):
        x = rng.standard_normal(64)
        lhs = ops.sigmoid(Tensor(-x)).data
        rhs = 1.0 - ops.sigmoid(Tensor(x)).data
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_sigmoid_extremes_stay_finite(self):
        y = ops.sigmoid(Tensor(np.array([-1e4, 1e4])))
        assert np.all(np.isfinite(y.data))
        assert np.all((y.data > 0) & (y.data < 1) | (y.data == 0) | (y.data == 1))

    def test_swish_values(self):
        assert ops.swish(Tensor(0.0), Tensor(1.0)).item() == 0.0
        got = ops.swish(Tensor(1.0), Tensor(1.0)).item()
        assert abs(got - 0.7310585786300049) < 1e-12

    def test_swish_beta_gradient_at_origin(self):
        # d/dbeta [x * sigmoid(beta x)] = x^2 sigma'(beta x) -> 0.25 at x=1, beta=0
        beta = Tensor(np.asarray(0.0))
        y = ops.swish(Tensor(1.0), beta)
        y.backward()
        assert abs(float(beta.grad) - 0.25) < 1e-12
        assert grad_check(ops.swish, [np.array(1.0), np.array(0.0)]) < 1e-6

    def test_swish_gradients(self, rng):
        x = rng.standard_normal((4, 5))
        assert grad_check(ops.swish, [x, np.array(0.7)]) < 1e-6

    def test_gelu_values(self):
        assert ops.gelu(Tensor(0.0)).item() == 0.0
        assert abs(ops.gelu(Tensor(1.0)).item() - 0.8413447460685429) < 1e-12
        assert abs(ops.gelu(Tensor(10.0)).item() - 10.0) < 1e-6

    def test_gelu_gradients(self, rng):
        assert grad_check(ops.gelu, [rng.standard_normal((3, 4))]) < 1e-6

    def test_relu_values_and_mask(self, rng):
        assert ops.relu(Tensor(-3.0)).item() == 0.0
        assert ops.relu(Tensor(3.0)).item() == 3.0
        x = rng.standard_normal((4, 4))
        x[np.abs(x) < 0.05] = 0.5  # keep finite differences away from the kink
        assert grad_check(ops.relu, [x]) < 1e-6

    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor(np.zeros(3))
        ops.relu(x).backward(np.ones(3))
        assert np.array_equal(x.grad, np.zeros(3))


class TestSoftmax:
    def test_uniform_row(self):
        y = ops.softmax(Tensor(np.zeros((1, 5))))
        assert np.allclose(y.data, 0.2)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((3, 6))
        a = ops.softmax(Tensor(x)).data
        b = ops.softmax(Tensor(x + 17.3)).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_rows_sum_to_one(self, rng):
        x = rng.standard_normal((10, 8)) * 30.0
        y = ops.softmax(Tensor(x)).data
        assert np.all(y >= 0)
        assert np.max(np.abs(y.sum(axis=-1) - 1.0)) < 1e-12

    def test_jacobian(self, rng):
        assert grad_check(ops.softmax, [rng.standard_normal((2, 5))]) < 1e-6


class TestLayerNorm:
    def test_normalizes_channels(self, rng):
        x = rng.standard_normal((4, 8)) * 3 + 1
        y = ops.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.max(np.abs(y.data.mean(axis=-1))) < 1e-12
        assert np.max(np.abs(y.data.std(axis=-1) - 1.0)) < 1e-4

    def test_gradients(self, rng):
        x = rng.standard_normal((3, 6))
        g, b = rng.standard_normal(6), rng.standard_normal(6)
        assert grad_check(ops.layer_norm, [x, g, b]) < 1e-5


class TestMhsa:
    @staticmethod
    def _params(rng, c, heads, dtype=np.float64):
        d_k = c // heads
        mk = lambda *s: rng.standard_normal(s).astype(dtype)
        wq = [Tensor(mk(c, d_k)) for _ in range(heads)]
        wk = [Tensor(mk(c, d_k)) for _ in range(heads)]
        wv = [Tensor(mk(c, d_k)) for _ in range(heads)]
        wo = Tensor(mk(c, c))
        return wq, wk, wv, wo

    def test_single_position_reduces_to_value_path(self, rng):
        c, heads = 8, 2
        wq, wk, wv, wo = self._params(rng, c, heads)
        x = rng.standard_normal((1, c))
        y = ops.mhsa(Tensor(x), heads, wq, wk, wv, wo)
        expected = np.concatenate([x @ w.data for w in wv], axis=-1) @ wo.data
        assert np.max(np.abs(y.data - expected)) < 1e-12

    def test_permutation_equivariance(self, rng):
        c, heads, length = 8, 2, 6
        wq, wk, wv, wo = self._params(rng, c, heads)
        x = rng.standard_normal((length, c))
        perm = rng.permutation(length)
        y = ops.mhsa(Tensor(x), heads, wq, wk, wv, wo).data
        y_perm = ops.mhsa(Tensor(x[perm]), heads, wq, wk, wv, wo).data
        assert np.max(np.abs(y[perm] - y_perm)) < 1e-12

    def test_heads_must_divide_channels(self, rng):
        wq, wk, wv, wo = self._params(rng, 8, 2)
        with pytest.raises(ConfigError):
            ops.mhsa(Tensor(np.zeros((4, 8))), 3, wq, wk, wv, wo)

    def test_projection_gradients(self, rng):
        c, heads, length = 8, 2, 4
        x = rng.standard_normal((length, c))
        mats = [rng.standard_normal((c, c // heads)) for _ in range(3 * heads)]
        wo = rng.standard_normal((c, c))

        def fn(x_, q0, q1, k0, k1, v0, v1, wo_):
            return ops.mhsa(x_, heads, [q0, q1], [k0, k1], [v0, v1], wo_)

        assert grad_check(fn, [x, *mats, wo]) < 1e-5

    def test_batched_matches_loop(self, rng):
        c, heads = 8, 2
        wq, wk, wv, wo = self._params(rng, c, heads)
        x = rng.standard_normal((3, 5, c))
        batched = ops.mhsa(Tensor(x), heads, wq, wk, wv, wo).data
        for i in range(3):
            single = ops.mhsa(Tensor(x[i]), heads, wq, wk, wv, wo).data
            assert np.max(np.abs(batched[i] - single)) < 1e-12


class TestElementwiseMulAndLoss:
    def test_mul_identities(self, rng):
        a = rng.standard_normal((3, 4))
        assert np.array_equal(ops.elementwise_mul(Tensor(a), Tensor(np.ones_like(a))).data, a)
        assert np.array_equal(
            ops.elementwise_mul(Tensor(a), Tensor(np.zeros_like(a))).data, np.zeros_like(a)
        )

    def test_mul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.elementwise_mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_mul_gradient_is_other_operand(self, rng):
        a, b = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
        ops.elementwise_mul(a, b).backward(np.ones(5))
        assert np.array_equal(a.grad, b.data)
        assert grad_check(ops.elementwise_mul,
                          [rng.standard_normal(5), rng.standard_normal(5)]) < 1e-6

    def test_mse_values(self, rng):
        x = rng.standard_normal((4, 4))
        assert ops.mse_loss(Tensor(x), Tensor(x.copy())).item() == 0.0
        assert ops.mse_loss(Tensor([2.0]), Tensor([0.0])).item() == 4.0

    def test_mse_gradient_formula(self, rng):
        p, t = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        pt, tt = Tensor(p.copy()), Tensor(t.copy())
        ops.mse_loss(pt, tt).backward()
        assert np.max(np.abs(pt.grad - 2 * (p - t) / p.size)) < 1e-12
        assert grad_check(ops.mse_loss, [p, t]) < 1e-6


OP_INSTANCES = {
    "dense": lambda rng: (ops.dense, [rng.standard_normal((int(rng.integers(2, 16)), 3)),
                                      rng.standard_normal((3, 4)), rng.standard_normal(4)]),
    "conv1d": lambda rng: (
        lambda x, w, b, s=int(rng.integers(1, 3)): ops.conv1d(x, w, b, s, 1),
        [rng.standard_normal((int(rng.integers(6, 16)), 2)),
         rng.standard_normal((3, 2, 3)), rng.standard_normal(3)]),
    "conv_transpose1d": lambda rng: (
        lambda x, w, b: ops.conv_transpose1d(x, w, b, 2, 1, 1),
        [rng.standard_normal((int(rng.integers(4, 16)), 2)),
         rng.standard_normal((3, 2, 3)), rng.standard_normal(3)]),
    "dwconv1d": lambda rng: (ops.dwconv1d,
                             [rng.standard_normal((int(rng.integers(4, 16)), 3)),
                              rng.standard_normal((3, 3)), rng.standard_normal(3)]),
    "sigmoid": lambda rng: (ops.sigmoid, [rng.standard_normal((4, 4))]),
    "swish": lambda rng: (ops.swish, [rng.standard_normal((4, 4)),
                                      rng.standard_normal(())]),
    "gelu": lambda rng: (ops.gelu, [rng.standard_normal((4, 4))]),
    "softmax": lambda rng: (ops.softmax, [rng.standard_normal((3, 6))]),
    "layer_norm": lambda rng: (ops.layer_norm, [rng.standard_normal((4, 6)),
                                                rng.standard_normal(6),
                                                rng.standard_normal(6)]),
    "elementwise_mul": lambda rng: (ops.elementwise_mul, [rng.standard_normal((4, 4)),
                                                          rng.standard_normal((4, 4))]),
    "mse_loss": lambda rng: (ops.mse_loss, [rng.standard_normal((4, 4)),
                                            rng.standard_normal((4, 4))]),
}


@pytest.mark.parametrize("op_name", sorted(OP_INSTANCES))
@pytest.mark.parametrize("seed", range(10))
def test_grad_check_sweep(op_name, seed):
    """Every differentiable op: 10 random instances, rel. err < 1e-5."""
    rng = np.random.default_rng(1000 * seed + hash(op_name) % 1000)
    fn, inputs = OP_INSTANCES[op_name](rng)
    assert grad_check(fn, inputs) < 1e-5


class TestEngine:
    def test_zero_upstream_gradient_gives_zero_param_gradients(self, rng):
        x = Tensor(rng.standard_normal((4, 3)))
        w = Parameter(rng.standard_normal((3, 2)), "w")
        b = Parameter(rng.standard_normal(2), "b")
        y = ops.dense(x, w, b)
        y.backward(np.zeros(y.shape))
        assert np.array_equal(w.grad, np.zeros_like(w.data))
        assert np.array_equal(b.grad, np.zeros_like(b.data))

    def test_forward_determinism(self, rng):
        x = rng.standard_normal((16, 2)).astype(np.float32)
        w = rng.standard_normal((3, 2, 4)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        run = lambda: ops.conv1d(Tensor(x.copy()), Tensor(w.copy()), Tensor(b.copy()), 2, 1).data
        assert np.array_equal(run(), run())

    def test_gradient_accumulation_across_backward_calls(self, rng):
        w = Parameter(rng.standard_normal((3, 2)), "w")
        x = Tensor(rng.standard_normal((4, 3)))
        (x @ w).sum().backward()
        once = w.grad.copy()
        (x @ w).sum().backward()
        assert np.allclose(w.grad, 2 * once)

    def test_zero_grad_resets_to_zeros(self, rng):
        w = Parameter(rng.standard_normal((3, 2)), "w")
        (Tensor(rng.standard_normal((2, 3))) @ w).sum().backward()
        assert np.any(w.grad != 0)
        w.zero_grad()
        assert np.array_equal(w.grad, np.zeros_like(w.data))

    def test_broadcast_add_unbroadcasts_gradient(self, rng):
        a = Tensor(rng.standard_normal((4, 3)))
        b = Tensor(rng.standard_normal(3))
        (a + b).sum().backward()
        assert b.grad.shape == (3,)
        assert np.allclose(b.grad, 4.0)

    def test_batched_matmul_gradients(self, rng):
        a = rng.standard_normal((3, 4, 2))
        b = rng.standard_normal((2, 5))
        assert grad_check(lambda a_, b_: a_ @ b_, [a, b]) < 1e-6

    def test_non_scalar_backward_without_seed_raises(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2))).backward()

    def test_parameter_set_rejects_duplicates(self):
        ps = ParameterSet([Parameter(np.zeros(2), "a")])
        with pytest.raises(ShapeError):
            ps.add(Parameter(np.zeros(2), "a"))

    def test_parameter_set_clone_is_detached(self, rng):
        ps = ParameterSet([Parameter(rng.standard_normal(3), "a")])
        clone = ps.clone()
        clone["a"].data += 1.0
        assert not np.array_equal(clone["a"].data, ps["a"].data)
