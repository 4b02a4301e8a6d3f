import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melmood import ops
from melmood.tensor import Tensor, no_grad


def _t(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------- tensor core


def test_tensor_coerces_integer_input_to_float64():
    t = Tensor(np.zeros(3, dtype=np.int64))
    assert t.dtype == np.float64


def test_backward_requires_scalar():
    x = _t(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ops.relu(x).backward()


def test_grad_accumulates_over_reuse():
    x = _t([1.0, 2.0])
    y = ops.sum_all(ops.add(x, x))
    y.backward()
    npt.assert_allclose(x.grad, [2.0, 2.0])


def test_zero_grad_and_detach():
    x = _t([3.0])
    ops.sum_all(x).backward()
    npt.assert_allclose(x.grad, [1.0])
    x.zero_grad()
    assert x.grad is None
    d = x.detach()
    assert not d.requires_grad
    assert np.shares_memory(d.data, x.data)


def test_no_grad_blocks_tape():
    x = _t([1.0, -2.0])
    with no_grad():
        y = ops.relu(x)
    y2 = ops.sum_all(_t(y.data))
    y2.backward()
    assert x.grad is None


def test_diamond_graph_topological_order():
    # f = sum(relu(x) + relu6(x)) visits x once with summed contributions
    x = _t([0.5, 2.0, 7.0])
    f = ops.sum_all(ops.add(ops.relu(x), ops.relu6(x)))
    f.backward()
    npt.assert_allclose(x.grad, [2.0, 2.0, 1.0])


# ----------------------------------------------------------- forward oracles


def _conv2d_loops(x, w, b, stride, padding):
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[ni, co, i, j] = np.sum(patch * w[co])
            if b is not None:
                out[ni, co] += b[co]
    return out


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1)])
def test_conv2d_matches_loop_oracle(stride, padding, k):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = ops.conv2d(_t(x), _t(w), _t(b), stride=stride, padding=padding)
    npt.assert_allclose(got.data, _conv2d_loops(x, w, b, stride, padding), rtol=1e-10, atol=1e-12)


def test_depthwise_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 5, 7, 7))
    w = rng.standard_normal((5, 3, 3))
    got = ops.depthwise_conv2d(_t(x), _t(w), stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((2, 5, 4, 4))
    for ni in range(2):
        for c in range(5):
            for i in range(4):
                for j in range(4):
                    out[ni, c, i, j] = np.sum(xp[ni, c, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[c])
    npt.assert_allclose(got.data, out, rtol=1e-10, atol=1e-12)


def test_maxpool2d_matches_loop_oracle():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 3, 7, 7))
    got = ops.maxpool2d(_t(x), k=3, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    out = np.zeros((2, 3, 4, 4))
    for ni in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    out[ni, c, i, j] = xp[ni, c, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3].max()
    npt.assert_allclose(got.data, out)


def test_maxpool_floor_semantics_drops_ragged_edge():
    x = _t(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5))
    out = ops.maxpool2d(x, k=2, stride=2)
    assert out.shape == (1, 1, 2, 2)
    npt.assert_allclose(out.data[0, 0], [[6, 8], [16, 18]])


def test_linear_matches_matmul():
    rng = np.random.default_rng(14)
    x, w, b = rng.standard_normal((4, 6)), rng.standard_normal((3, 6)), rng.standard_normal(3)
    got = ops.linear(_t(x), _t(w), _t(b))
    npt.assert_allclose(got.data, x @ w.T + b, rtol=1e-12)


def test_global_avgpool():
    x = _t(np.arange(16, dtype=np.float64).reshape(1, 2, 2, 4))
    npt.assert_allclose(ops.global_avgpool(x).data, [[3.5, 11.5]])


def test_relu_and_relu6_clamps():
    x = _t([-3.0, 0.0, 2.5, 6.0, 9.0])
    npt.assert_allclose(ops.relu(x).data, [0.0, 0.0, 2.5, 6.0, 9.0])
    npt.assert_allclose(ops.relu6(x).data, [0.0, 0.0, 2.5, 6.0, 6.0])


def test_flatten_and_concat():
    a = _t(np.ones((2, 3, 2, 2)))
    b = _t(np.zeros((2, 1, 2, 2)))
    cat = ops.channel_concat([a, b])
    assert cat.shape == (2, 4, 2, 2)
    flat = ops.flatten(cat)
    assert flat.shape == (2, 16)


# ------------------------------------------------------------- normalization


def test_batchnorm_train_normalizes_batch():
    rng = np.random.default_rng(15)
    x = rng.standard_normal((8, 4, 5, 5)) * 3 + 2
    gamma, beta = _t(np.ones(4)), _t(np.zeros(4))
    mean, var = np.zeros(4), np.ones(4)
    out = ops.batchnorm2d(_t(x), gamma, beta, mean, var, training=True)
    npt.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    npt.assert_allclose(out.data.std(axis=(0, 2, 3)), 1.0, atol=1e-4)
    # running stats moved 10% of the way toward the batch stats
    npt.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-10)
    batch_var = x.var(axis=(0, 2, 3))
    npt.assert_allclose(var, 0.9 + 0.1 * batch_var, rtol=1e-10)


def test_batchnorm_eval_uses_running_stats():
    x = np.full((2, 1, 2, 2), 5.0)
    mean, var = np.array([3.0]), np.array([4.0])
    out = ops.batchnorm2d(_t(x), _t(np.ones(1)), _t(np.zeros(1)), mean, var, training=False)
    npt.assert_allclose(out.data, (5.0 - 3.0) / np.sqrt(4.0 + 1e-5), rtol=1e-7)
    npt.assert_allclose(mean, [3.0])


def test_batchnorm_train_rejects_single_sample():
    with pytest.raises(ValueError):
        ops.batchnorm2d(_t(np.ones((1, 2, 3, 3))), _t(np.ones(2)), _t(np.zeros(2)),
                        np.zeros(2), np.ones(2), training=True)


def test_dropout_semantics():
    rng = np.random.default_rng(16)
    x = _t(np.ones((4, 100)))
    out = ops.dropout(x, 0.5, training=True, rng=rng)
    kept = out.data != 0
    npt.assert_allclose(out.data[kept], 2.0)
    assert 0.2 < kept.mean() < 0.8
    assert ops.dropout(x, 0.5, training=False).data is x.data
    assert ops.dropout(x, 0.0, training=True).data is x.data
    with pytest.raises(ValueError):
        ops.dropout(x, 0.5, training=True)


# ----------------------------------------------------------- loss and softmax


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(17)
    out = ops.softmax(_t(rng.standard_normal((5, 3)) * 10))
    npt.assert_allclose(out.data.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(out.data > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, shift):
    logits = np.random.default_rng(seed).standard_normal((3, 4)) * 5
    a = ops.softmax(_t(logits)).data
    b = ops.softmax(_t(logits + shift)).data
    npt.assert_allclose(a, b, atol=1e-6)


def test_cross_entropy_matches_manual():
    logits = np.array([[2.0, -1.0], [0.5, 0.5], [-3.0, 1.0]])
    targets = np.array([0, 1, 1])
    got = float(ops.cross_entropy(_t(logits), targets).data)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(p[np.arange(3), targets]))
    npt.assert_allclose(got, expected, rtol=1e-12)


def test_cross_entropy_uniform_is_ln2():
    logits = _t(np.zeros((4, 2)))
    npt.assert_allclose(float(ops.cross_entropy(logits, np.array([0, 1, 0, 1])).data),
                        np.log(2.0), atol=1e-12)


def test_cross_entropy_stable_at_extreme_logits():
    logits = _t(np.array([[1000.0, -1000.0]]))
    assert np.isfinite(float(ops.cross_entropy(logits, np.array([1])).data))


def test_conv_output_hw():
    assert ops.conv_output_hw(64, 64, 3, 3, stride=2, padding=1) == (32, 32)
    assert ops.conv_output_hw(7, 7, 7, 7, stride=1, padding=0) == (1, 1)
