import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xmac_edge import autodiff as ad
from xmac_edge.autodiff import Rng, ShapeError, Tensor

from conftest import gradcheck

TOL = 1e-5


def _bn(training):
    def op(x, g, b):
        c = x.shape[1]
        return ad.batchnorm2d(x, g, b, np.zeros(c), np.ones(c), training)

    return op


# ---------------------------------------------------------------- conv2d


def test_conv2d_identity_1x1():
    x = np.random.default_rng(0).random((2, 3, 4, 5)).astype(np.float32)
    k = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    assert np.array_equal(ad.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv2d_hand_value():
    x = Tensor(np.array([[[[1, 2], [3, 4]]]], dtype=np.float32))
    out = ad.conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


@pytest.mark.parametrize(
    "n,cin,h,w,cout,k,stride,pad",
    [(1, 1, 4, 4, 1, 3, 1, 1), (2, 3, 5, 5, 4, 3, 2, 1), (1, 2, 6, 5, 3, 1, 1, 0), (2, 2, 7, 7, 2, 5, 2, 2),
     (1, 4, 3, 3, 2, 3, 1, 0)],
)
def test_conv2d_gradcheck(n, cin, h, w, cout, k, stride, pad):
    r = np.random.default_rng(h * 7 + k)
    arrays = [r.normal(size=(n, cin, h, w)), r.normal(size=(cout, cin, k, k)), r.normal(size=cout)]
    err = gradcheck(lambda x, kk, b: ad.conv2d(x, kk, b, stride, pad), arrays)
    assert err <= TOL


def test_conv2d_output_size_formula():
    x = Tensor(np.zeros((1, 2, 9, 7)))
    out = ad.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError, match="channels"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


# ---------------------------------------------------------------- depthwise


def test_depthwise_zero_kernel():
    x = Tensor(np.random.default_rng(1).random((1, 3, 4, 4)))
    assert not ad.depthwise_conv2d(x, Tensor(np.zeros((3, 1, 3, 3))), padding=1).data.any()


def test_depthwise_per_channel_scale():
    x = np.random.default_rng(2).random((1, 2, 3, 3)).astype(np.float32)
    k = np.array([2.0, 3.0], dtype=np.float32).reshape(2, 1, 1, 1)
    out = ad.depthwise_conv2d(Tensor(x), Tensor(k)).data
    np.testing.assert_allclose(out[0, 0], 2 * x[0, 0], rtol=1e-6)
    np.testing.assert_allclose(out[0, 1], 3 * x[0, 1], rtol=1e-6)


def test_depthwise_channel_independence():
    r = np.random.default_rng(3)
    x = r.random((1, 3, 5, 5))
    k = Tensor(r.normal(size=(3, 1, 3, 3)))
    base = ad.depthwise_conv2d(Tensor(x), k, padding=1).data
    x2 = x.copy()
    x2[0, 0] += 5.0
    x2[0, 2] -= 1.0
    moved = ad.depthwise_conv2d(Tensor(x2), k, padding=1).data
    assert np.array_equal(base[0, 1], moved[0, 1])


def test_depthwise_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.depthwise_conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))))


@pytest.mark.parametrize("c,h,k,stride,pad", [(2, 5, 3, 1, 1), (3, 6, 3, 2, 1), (1, 4, 1, 1, 0), (4, 7, 5, 2, 2)])
def test_depthwise_gradcheck(c, h, k, stride, pad):
    r = np.random.default_rng(c * 11 + h)
    arrays = [r.normal(size=(2, c, h, h)), r.normal(size=(c, 1, k, k))]
    assert gradcheck(lambda x, kk: ad.depthwise_conv2d(x, kk, stride, pad), arrays) <= TOL


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_train_normalizes():
    x = np.random.default_rng(4).normal(3.0, 2.0, size=(8, 3, 4, 4)).astype(np.float32)
    out = ad.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batchnorm_constant_channel_gives_beta():
    x = np.full((2, 2, 3, 3), 7.0, dtype=np.float32)
    beta = np.array([0.25, -1.5])
    out = ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(beta), np.zeros(2), np.ones(2), True).data
    np.testing.assert_allclose(out[:, 0], 0.25, atol=1e-6)
    np.testing.assert_allclose(out[:, 1], -1.5, atol=1e-6)


def test_batchnorm_running_stats_update():
    x = np.random.default_rng(5).normal(size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    with ad.precision("float64"):
        ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True, momentum=0.9)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_infer_uses_running_stats():
    x = np.random.default_rng(6).normal(size=(1, 2, 2, 2))
    with ad.precision("float64"):
        out = ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.array([1.0, -1.0]),
                             np.array([4.0, 1.0]), False, eps=0.0).data
    np.testing.assert_allclose(out[0, 0], (x[0, 0] - 1.0) / 2.0)
    np.testing.assert_allclose(out[0, 1], x[0, 1] + 1.0)


def test_batchnorm_zero_extent_error():
    with pytest.raises(ShapeError):
        ad.batchnorm2d(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       np.zeros(2), np.ones(2), True)


@pytest.mark.parametrize("shape", [(2, 3, 2, 2), (4, 2, 3, 1), (1, 1, 3, 4)])
def test_batchnorm_gradcheck_train(shape):
    r = np.random.default_rng(sum(shape))
    c = shape[1]
    arrays = [r.normal(size=shape), r.normal(1.0, 0.3, size=c), r.normal(size=c)]
    assert gradcheck(_bn(True), arrays) <= TOL


def test_batchnorm_gradcheck_infer():
    r = np.random.default_rng(9)
    arrays = [r.normal(size=(2, 3, 2, 2)), r.normal(size=3), r.normal(size=3)]
    assert gradcheck(_bn(False), arrays) <= TOL


# ---------------------------------------------------------------- relu / concat / pooling


def test_relu_values():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert not ad.relu(Tensor(-np.arange(1, 6, dtype=np.float32))).data.any()


def test_relu_subgradient_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.tensor_sum(ad.relu(x))
    ad.backward(tape, y)
    assert np.array_equal(x.grad, np.zeros(3))


def test_relu_gradcheck_away_from_kink():
    r = np.random.default_rng(10)
    x = r.normal(size=(3, 4))
    x[np.abs(x) < 1e-2] = 0.5
    assert gradcheck(ad.relu, [x]) <= TOL


def test_concat_layout_and_grad():
    a = Tensor(np.full((1, 1, 2, 2), 1.0), requires_grad=True)
    b = Tensor(np.full((1, 2, 2, 2), 2.0), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.concat_channels(a, b)
        s = ad.tensor_sum(out)
    assert np.array_equal(out.data[:, :1], a.data)
    assert np.array_equal(out.data[:, 1:], b.data)
    ad.backward(tape, s)
    assert np.array_equal(a.grad, np.ones_like(a.data))
    assert np.array_equal(b.grad, np.ones_like(b.data))


def test_concat_empty_channel():
    x = Tensor(np.random.default_rng(11).random((2, 3, 2, 2)))
    out = ad.concat_channels(x, Tensor(np.zeros((2, 0, 2, 2))))
    assert np.array_equal(out.data, x.data)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        ad.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2))))


def test_concat_gradcheck():
    r = np.random.default_rng(12)
    assert gradcheck(ad.concat_channels, [r.normal(size=(2, 2, 3, 3)), r.normal(size=(2, 3, 3, 3))]) <= TOL


def test_global_avg_pool_values():
    assert ad.global_avg_pool(Tensor(np.full((1, 1, 3, 3), 4.5))).data.item() == pytest.approx(4.5)
    assert ad.global_avg_pool(Tensor(np.array([[[[1, 2], [3, 4]]]]))).data.item() == pytest.approx(2.5)


def test_global_avg_pool_backward_uniform():
    x = Tensor(np.random.default_rng(13).random((1, 2, 2, 3)), requires_grad=True)
    with ad.Tape() as tape:
        s = ad.tensor_sum(ad.global_avg_pool(x))
    ad.backward(tape, s)
    np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 6), rtol=1e-6)


def test_global_avg_pool_gradcheck():
    assert gradcheck(ad.global_avg_pool, [np.random.default_rng(14).normal(size=(2, 3, 4, 2))]) <= TOL


# ---------------------------------------------------------------- linear / matmul


def test_linear_identity_and_hand_value():
    x = np.random.default_rng(15).random((2, 3)).astype(np.float32)
    assert np.array_equal(ad.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    out = ad.linear(Tensor([[2.0, 3.0]]), Tensor([[1.0, 1.0]]), Tensor([1.0]))
    assert out.data.tolist() == [[6.0]]


def test_linear_mismatch():
    with pytest.raises(ShapeError):
        ad.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("n,din,dout", [(1, 1, 1), (3, 4, 2), (5, 7, 6)])
def test_linear_gradcheck(n, din, dout):
    r = np.random.default_rng(n + din + dout)
    arrays = [r.normal(size=(n, din)), r.normal(size=(dout, din)), r.normal(size=dout)]
    assert gradcheck(ad.linear, arrays) <= TOL


def test_matmul_values():
    out = ad.matmul_batched(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]
    a = np.random.default_rng(16).random((2, 3, 3)).astype(np.float32)
    assert np.allclose(ad.matmul_batched(Tensor(a), Tensor(np.broadcast_to(np.eye(3), (2, 3, 3)))).data, a)


def test_matmul_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul_batched(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((2, 3, 4))))


@pytest.mark.parametrize("shape_a,shape_b", [((2, 3), (3, 4)), ((2, 3, 4), (2, 4, 2)), ((1, 5, 1), (1, 1, 5))])
def test_matmul_gradcheck(shape_a, shape_b):
    r = np.random.default_rng(len(shape_a) * 3 + shape_a[-1])
    assert gradcheck(ad.matmul_batched, [r.normal(size=shape_a), r.normal(size=shape_b)]) <= TOL


# ---------------------------------------------------------------- softmax


def test_softmax_values():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros((2, 4)))).data, 0.25)
    np.testing.assert_allclose(ad.softmax(Tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]], rtol=1e-6)


def test_softmax_shift_invariance():
    x = np.random.default_rng(17).normal(size=(3, 5))
    with ad.precision("float64"):
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + 123.0)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=10))
def test_softmax_stable_sum(vals):
    p = ad.softmax(Tensor(np.array([vals]))).data
    assert np.all(np.isfinite(p))
    assert abs(float(p.sum()) - 1.0) <= 1e-6


@pytest.mark.parametrize("shape", [(4,), (2, 3), (2, 2, 5)])
def test_softmax_and_log_softmax_gradcheck(shape):
    x = np.random.default_rng(len(shape)).normal(size=shape)
    assert gradcheck(ad.softmax, [x]) <= TOL
    assert gradcheck(ad.log_softmax, [x]) <= TOL


# ---------------------------------------------------------------- dropout


def test_dropout_identities():
    x = Tensor(np.random.default_rng(18).random((4, 4)))
    assert ad.dropout(x, 0.0, Rng(0), True).data is x.data
    assert ad.dropout(x, 0.7, Rng(0), False) is x


def test_dropout_rate_error():
    with pytest.raises(ValueError):
        ad.dropout(Tensor(np.ones(3)), 1.0, Rng(0), True)


def test_dropout_survivor_fraction_and_scaling():
    out = ad.dropout(Tensor(np.ones(100_000)), 0.3, Rng(42), True).data
    alive = out != 0
    assert abs(alive.mean() - 0.7) <= 0.01
    np.testing.assert_allclose(out[alive], 1 / 0.7, rtol=1e-6)


def test_dropout_reproducible():
    x = Tensor(np.ones((50, 50)))
    assert np.array_equal(ad.dropout(x, 0.5, Rng(7), True).data, ad.dropout(x, 0.5, Rng(7), True).data)


def test_dropout_gradcheck_fixed_mask():
    x = np.random.default_rng(19).normal(size=(3, 4))
    assert gradcheck(lambda t: ad.dropout(t, 0.4, Rng(3), True), [x]) <= TOL


# ---------------------------------------------------------------- tape / backward


def test_backward_sum_and_square():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with ad.Tape() as tape:
        s = ad.tensor_sum(x)
    ad.backward(tape, s)
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    with ad.Tape() as tape:
        s = ad.tensor_sum(ad.mul(x, x))
    ad.backward(tape, s)
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_fan_out_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.add(ad.mul(x, x), ad.mul(x, Tensor([3.0])))
        s = ad.tensor_sum(y)
    ad.backward(tape, s)
    assert x.grad.tolist() == [7.0]


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.relu(x)
    with pytest.raises(ShapeError):
        ad.backward(tape, y)


def test_tape_topological_and_no_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        a = ad.relu(x)
        with ad.no_grad():
            ad.relu(a)
        b = ad.tensor_sum(a)
    assert [n.op for n in tape.nodes] == ["relu", "sum"]
    produced = set()
    for node in tape.nodes:
        for t in node.inputs:
            assert t is x or id(t) in produced
        produced.add(id(node.output))
    assert b.requires_grad


def test_broadcast_add_mul_gradcheck():
    r = np.random.default_rng(20)
    arrays = [r.normal(size=(2, 3, 4)), r.normal(size=(1, 3, 1))]
    assert gradcheck(ad.add, arrays) <= TOL
    assert gradcheck(ad.mul, arrays) <= TOL


def test_reshape_swap_gradcheck():
    x = np.random.default_rng(21).normal(size=(2, 3, 4))
    assert gradcheck(lambda t: ad.reshape(t, (6, 4)), [x]) <= TOL
    assert gradcheck(ad.swap_last_axes, [x]) <= TOL


def test_composite_gradcheck_conv_bn_relu_pool_linear():
    r = np.random.default_rng(22)
    arrays = [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(4, 3)), r.normal(size=4)]

    def op(x, k, w, b):
        h = ad.conv2d(x, k, None, 2, 1)
        h = ad.batchnorm2d(h, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True)
        return ad.log_softmax(ad.linear(ad.global_avg_pool(ad.relu(h)), w, b))

    assert gradcheck(op, arrays) <= TOL


# ---------------------------------------------------------------- rng / precision


def test_rng_streams():
    assert np.array_equal(Rng(5).random(10), Rng(5).random(10))
    assert not np.array_equal(Rng(5).random(10), Rng(6).random(10))
    r = Rng(5)
    assert np.array_equal(r.child(1, 2).random(4), Rng(5).child(1).child(2).random(4))
    assert not np.array_equal(r.child(1).random(4), r.child(2).random(4))


def test_precision_context():
    assert Tensor([1.0]).data.dtype == np.float32
    with ad.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert ad.default_dtype() == np.float32


# ---------------------------------------------------------------- bilinear


def test_bilinear_constant_and_identity():
    np.testing.assert_allclose(ad.bilinear_resize(np.full((3, 4), 2.5), 7, 5), 2.5)
    m = np.random.default_rng(23).random((4, 6))
    np.testing.assert_array_equal(ad.bilinear_resize(m, 4, 6), m)


def test_bilinear_2x2_to_3x3():
    m = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = ad.bilinear_resize(m, 3, 3)
    # half-pixel sampling: output centres map to -1/6, 1/2, 7/6 in source coordinates (clamped)
    assert out[0, 0] == 0.0 and out[0, 2] == 1.0 and out[2, 0] == 2.0 and out[2, 2] == 3.0
    assert out[1, 1] == pytest.approx(1.5)
    assert out[0, 1] == pytest.approx(0.5)


def test_bilinear_zero_size():
    with pytest.raises(ShapeError):
        ad.bilinear_resize(np.ones((2, 2)), 0, 3)
