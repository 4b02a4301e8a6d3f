import numpy as np
import pytest

from melmood import ops
from melmood.gradcheck import grad_check, verify_ops
from melmood.tensor import Tensor, make_result


def test_ops_pass_randomized_checks():
    errs = verify_ops(seed=123, trials=2)
    assert set(errs) >= {"conv2d", "depthwise_conv2d", "maxpool2d", "linear",
                        "batchnorm2d_train", "batchnorm2d_eval", "relu", "relu6",
                        "dropout", "channel_concat", "add", "flatten",
                        "global_avgpool", "softmax", "cross_entropy"}
    worst = max(errs.values())
    assert worst < 1e-4, errs


def _buggy_scale(t: Tensor) -> Tensor:
    # forward computes 3x but backward claims the slope is 2: a planted bug
    out = 3.0 * t.data

    def backward(g):
        return (np.broadcast_to(g, t.data.shape) * 2.0,)

    return make_result(out, (t,), backward)


def test_grad_check_catches_wrong_backward():
    x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
    err = grad_check(lambda ts: ops.sum_all(_buggy_scale(ts[0])), [x])
    assert err > 0.2


def test_grad_check_refinement_dismisses_kink_crossing():
    # x sits close enough to the relu kink that the default step straddles it;
    # shrinking the step must reveal the analytic gradient as correct.
    x = Tensor(np.array([1e-5, 1.0]), requires_grad=True)
    err = grad_check(lambda ts: ops.sum_all(ops.relu(ts[0])), [x], eps=1e-4)
    assert err < 1e-6


def test_grad_check_rejects_nondeterministic_function():
    state = {"calls": 0}

    def noisy(ts):
        state["calls"] += 1
        w = Tensor(np.full(4, float(state["calls"])))
        return ops.sum_all(ops.add(ts[0], w))

    x = Tensor(np.zeros(4), requires_grad=True)
    with pytest.raises(ValueError, match="deterministic"):
        grad_check(noisy, [x])


def test_grad_check_coordinate_subsampling_runs():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    err = grad_check(
        lambda ts: ops.sum_all(ops.linear(ts[0], ts[1])),
        [x, w],
        max_coords_per_input=3,
        rng=np.random.default_rng(5),
    )
    assert err < 1e-8
