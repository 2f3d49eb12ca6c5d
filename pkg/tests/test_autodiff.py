import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf, expit

from ecmamba.autodiff import ContractError, Tape, Tensor, backward, gradcheck, no_grad, ops

TOL = 1e-4


def t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def loss_of(y, rng=None):
    # weighted sum so every output entry gets a distinct upstream gradient
    w = np.random.default_rng(99).standard_normal(y.shape)
    return ops.sum(ops.mul(y, w))


class TestForwardValues:
    def test_gelu_zero(self):
        assert ops.gelu(Tensor(np.zeros(1))).item() == 0.0

    def test_gelu_matches_erf_form(self, rng):
        x = rng.standard_normal(50) * 3
        ref = 0.5 * x * (1 + erf(x / math.sqrt(2)))
        np.testing.assert_allclose(ops.gelu(Tensor(x)).data, ref, rtol=0, atol=1e-14)

    def test_sigmoid_half(self):
        assert ops.sigmoid(Tensor(np.zeros(1))).item() == 0.5

    def test_silu_softplus_oracles(self, rng):
        x = rng.standard_normal(50) * 10
        np.testing.assert_allclose(ops.silu(Tensor(x)).data, x * expit(x), rtol=1e-14)
        np.testing.assert_allclose(ops.softplus(Tensor(x)).data, np.logaddexp(0, x), rtol=1e-14)

    def test_conv_ones_center(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0

    def test_conv_matches_direct_loops(self, rng):
        x, w, b = rng.standard_normal((2, 4, 7, 6)), rng.standard_normal((6, 2, 3, 3)), rng.standard_normal(6)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1, groups=2).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for o in range(6):
            g = o // 3
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[:, 2 * g:2 * g + 2, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[:, o, i, j] = (patch * w[o]).sum(axis=(1, 2, 3)) + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_transposed_conv_is_adjoint_of_conv(self, rng):
        # <conv(x), y> == <x, conv_transpose(y)> for the same weight
        x, w = rng.standard_normal((1, 3, 8, 8)), rng.standard_normal((3, 5, 4, 4))
        y = ops.conv2d(Tensor(x), Tensor(w.transpose(1, 0, 2, 3)), stride=2, padding=1).data
        z = rng.standard_normal(y.shape)
        back = ops.conv_transpose2d(Tensor(z), Tensor(w.transpose(1, 0, 2, 3)), stride=2, padding=1).data
        assert back.shape == x.shape
        assert abs((y * z).sum() - (x * back).sum()) < 1e-10

    def test_bilinear_sample_values(self):
        src = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        coords = Tensor(np.array([[[0.5, 0.5], [2.0, 1.0], [-3.0, 10.0]]]))
        out = ops.bilinear_sample(src, coords).data[0, 0]
        np.testing.assert_allclose(out, [2.0, 7.0, 2.0])

    def test_layer_norm_moments(self, rng):
        y = ops.layer_norm(t(rng, 4, 16, scale=3.0), eps=0.0).data
        np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(-1), 1, atol=1e-12)

    def test_shape_mismatch_names_primitive(self):
        with pytest.raises(ContractError, match="add"):
            ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))
        with pytest.raises(ContractError, match="conv2d"):
            ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))

    def test_conv_groups_must_divide(self):
        with pytest.raises(ContractError):
            ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), groups=2)

    def test_validity_check(self):
        assert not Tensor(np.array([1.0, np.nan])).is_finite()
        with pytest.raises(ContractError):
            Tensor(np.array([np.inf])).check_valid()


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4, 5)))

    def test_square_sum(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_repeated_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(x)
        backward(loss, tape)
        with pytest.raises(ContractError, match="consumed"):
            backward(loss, tape)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, 2.0)
        with pytest.raises(ContractError, match="scalar"):
            backward(y, tape)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                ops.exp(x)
        assert len(tape) == 0

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.add(ops.mul(x, x), ops.mul(x, 3.0)))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def _positive(rng, *shape):
    return Tensor(np.abs(rng.standard_normal(shape)) + 0.5)


# each case: (name, builder(rng) -> (fn, targets))
def _cases():
    def unary(op, make=t):
        def build(rng):
            x = make(rng, 3, 4)
            return (lambda: loss_of(op(x))), [x]
        return build

    def binary(op):
        def build(rng):
            a, b = t(rng, 3, 4), _positive(rng, 1, 4)
            return (lambda: loss_of(op(a, b))), [a, b]
        return build

    def conv(stride, padding, groups, k, c_in=4, c_out=4):
        def build(rng):
            x, w, b = t(rng, 2, c_in, 6, 5), t(rng, c_out, c_in // groups, k, k), t(rng, c_out)
            return (lambda: loss_of(ops.conv2d(x, w, b, stride, padding, groups))), [x, w, b]
        return build

    def conv_t(rng):
        x, w, b = t(rng, 1, 3, 4, 3), t(rng, 3, 2, 2, 2), t(rng, 2)
        return (lambda: loss_of(ops.conv_transpose2d(x, w, b, stride=2))), [x, w, b]

    def linear(rng):
        x, w, b = t(rng, 2, 5, 4), t(rng, 3, 4), t(rng, 3)
        return (lambda: loss_of(ops.linear(x, w, b))), [x, w, b]

    def layer_norm(rng):
        x, w, b = t(rng, 3, 6), t(rng, 6), t(rng, 6)
        return (lambda: loss_of(ops.layer_norm(x, w, b))), [x, w, b]

    def matmul(rng):
        a, b = t(rng, 2, 3, 4), t(rng, 4, 5)
        return (lambda: loss_of(ops.matmul(a, b))), [a, b]

    def mean(rng):
        x = t(rng, 3, 4, 5)
        return (lambda: loss_of(ops.mean(x, axis=1))), [x]

    def gather(rng):
        x = t(rng, 3, 5)
        idx = rng.integers(0, 5, (3, 7))
        return (lambda: loss_of(ops.gather(x, idx, axis=1))), [x]

    def scatter(rng):
        x = t(rng, 3, 7)
        idx = rng.integers(0, 5, (3, 7))
        return (lambda: loss_of(ops.scatter(x, idx, axis=1, size=5))), [x]

    def permute(rng):
        x = t(rng, 2, 6, 3)
        idx = np.stack([rng.permutation(6) for _ in range(2)])[:, :, None]
        return (lambda: loss_of(ops.permute(x, idx, axis=1))), [x]

    def bilinear(rng):
        src = t(rng, 2, 3, 5, 4)
        # keep coordinates away from integer grid lines where the sampler has kinks
        base = rng.integers(0, 3, (2, 6, 2)) + rng.uniform(0.2, 0.8, (2, 6, 2))
        coords = Tensor(base)
        return (lambda: loss_of(ops.bilinear_sample(src, coords))), [src, coords]

    def avg_pool(rng):
        x = t(rng, 1, 2, 4, 6)
        return (lambda: loss_of(ops.avg_pool2d(x, 2))), [x]

    return {
        "add": binary(ops.add), "sub": binary(ops.sub), "mul": binary(ops.mul), "div": binary(ops.div),
        "exp": unary(ops.exp), "log": unary(ops.log, _positive), "sqrt": unary(ops.sqrt, _positive),
        "sigmoid": unary(ops.sigmoid), "silu": unary(ops.silu), "softplus": unary(ops.softplus),
        "gelu": unary(ops.gelu), "square": unary(ops.square),
        "conv_dense": conv(1, 1, 1, 3), "conv_strided": conv(2, 1, 1, 4),
        "conv_grouped": conv(1, 1, 2, 3), "conv_depthwise": conv(1, 2, 4, 5),
        "conv_depthwise_strided": conv(2, 1, 4, 3), "conv_pointwise": conv(1, 0, 1, 1, 4, 6),
        "conv_transpose": conv_t, "linear": linear, "layer_norm": layer_norm, "matmul": matmul,
        "mean": mean, "gather": gather, "scatter": scatter, "permute": permute,
        "bilinear_sample": bilinear, "avg_pool": avg_pool,
    }


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradcheck(name, rng):
    fn, targets = CASES[name](rng)
    assert gradcheck(fn, targets, max_probes=None) < TOL


def test_bilinear_clamped_coordinate_gets_zero_grad(rng):
    src = t(rng, 1, 2, 4, 4)
    coords = Tensor(np.array([[[-2.0, 1.5], [1.5, 9.0]]]), requires_grad=True)
    with Tape() as tape:
        loss = loss_of(ops.bilinear_sample(src, coords))
    backward(loss, tape)
    assert coords.grad[0, 0, 0] == 0 and coords.grad[0, 1, 1] == 0
    assert coords.grad[0, 0, 1] != 0 and coords.grad[0, 1, 0] != 0


def test_composite_graph_gradcheck(rng):
    x, w = t(rng, 1, 3, 5, 5), t(rng, 4, 3, 3, 3, scale=0.3)

    def fn():
        h = ops.silu(ops.conv2d(x, w, padding=1))
        return ops.mean(ops.square(ops.layer_norm(ops.transpose(h, (0, 2, 3, 1)))))

    assert gradcheck(fn, [x, w]) < TOL


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)), st.integers(0, 2**16))
def test_gather_then_inverse_scatter_is_identity(values, seed):
    perm = np.random.default_rng(seed).permutation(values.shape[1])
    idx = np.broadcast_to(perm, values.shape)
    inverse = np.argsort(perm)
    back = ops.scatter(ops.gather(Tensor(values), idx, axis=1), idx, axis=1, size=values.shape[1])
    np.testing.assert_array_equal(back.data, values)
    again = ops.gather(ops.gather(Tensor(values), idx, axis=1), np.broadcast_to(inverse, values.shape), axis=1)
    np.testing.assert_array_equal(again.data, values)


@given(st.integers(0, 2**16))
def test_forward_determinism(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    a = ops.gelu(ops.conv2d(Tensor(x), Tensor(w), padding=1)).data
    b = ops.gelu(ops.conv2d(Tensor(x.copy()), Tensor(w.copy()), padding=1)).data
    assert a.tobytes() == b.tobytes()


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
def test_softplus_positive_and_above_relu(x):
    y = ops.softplus(Tensor(x)).data
    assert (y > 0).all() or (x < -30).any()
    assert (y >= np.maximum(x, 0)).all()
