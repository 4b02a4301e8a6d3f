"""Central-finite-difference verification of analytic gradients.

grad_check reruns the program twice to prove determinism, then compares the
tape's gradients against central differences coordinate by coordinate. The
verification suites cover every differentiable op on randomized small shapes
and each architecture end to end in double precision.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, make_result, no_grad


def grad_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    max_coords_per_input: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    refine: bool = True,
) -> float:
    """Max over checked coordinates of |analytic - numeric| / max(1, |numeric|).

    fn must map the given tensors to a scalar Tensor and be deterministic;
    two forward passes that differ raise. When max_coords_per_input is set,
    a random subset of coordinates per input is probed instead of all.

    A step that straddles a relu/maxpool kink makes the central difference
    spuriously disagree even when the analytic gradient is exact, and that
    discrepancy vanishes as the step shrinks while a genuine gradient bug
    does not. With refine on, suspect coordinates are re-probed at eps/10
    and eps/100 and the smallest error is kept.
    """
    with no_grad():
        ref1 = fn(inputs).data.copy()
        ref2 = fn(inputs).data.copy()
    if not np.array_equal(ref1, ref2):
        raise ValueError("grad_check requires a deterministic program (two forward passes differ)")

    for t in inputs:
        t.grad = None
    loss = fn(inputs)
    loss.backward()

    if max_coords_per_input is not None and rng is None:
        rng = np.random.default_rng(0)

    def probe(flat: np.ndarray, idx: int, analytic: float, step: float) -> float:
        orig = flat[idx]
        flat[idx] = orig + step
        with no_grad():
            up = float(fn(inputs).data)
        flat[idx] = orig - step
        with no_grad():
            down = float(fn(inputs).data)
        flat[idx] = orig
        numeric = (up - down) / (2.0 * step)
        return abs(analytic - numeric) / max(1.0, abs(numeric))

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_input is None or n <= max_coords_per_input:
            coords = range(n)
        else:
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        a_flat = analytic.reshape(-1)
        for idx in coords:
            err = probe(flat, idx, float(a_flat[idx]), eps)
            if refine and err > 1e-7:
                for step in (eps / 10.0, eps / 100.0):
                    err = min(err, probe(flat, idx, float(a_flat[idx]), step))
                    if err <= 1e-7:
                        break
            if err > worst:
                worst = err
    return worst


def _rt(rng: np.random.Generator, shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _project(t: Tensor, w: np.ndarray) -> Tensor:
    """Fixed-weight scalar projection so upstream gradients are non-uniform."""
    out = np.asarray((t.data * w).sum(), dtype=t.data.dtype)

    def backward(g):
        return (np.broadcast_to(g, t.data.shape) * w,)

    return make_result(out, (t,), backward)


def _op_cases(rng: np.random.Generator) -> Dict[str, Callable[[], float]]:
    """One randomized-shape grad check per differentiable op, double precision."""
    ri = rng.integers

    def conv2d_case() -> float:
        n, c, oc = int(ri(1, 3)), int(ri(1, 4)), int(ri(1, 5))
        hw, k = int(ri(4, 8)), int(ri(1, 4))
        stride, pad = int(ri(1, 3)), int(ri(0, 2))
        x = _rt(rng, (n, c, hw, hw))
        w = _rt(rng, (oc, c, k, k), scale=0.5)
        b = _rt(rng, (oc,))
        return grad_check(
            lambda ts: ops.sum_all(ops.conv2d(ts[0], ts[1], ts[2], stride=stride, padding=pad)), [x, w, b]
        )

    def depthwise_case() -> float:
        n, c = int(ri(1, 3)), int(ri(1, 5))
        hw, k = int(ri(4, 8)), int(ri(1, 4))
        stride, pad = int(ri(1, 3)), int(ri(0, 2))
        x = _rt(rng, (n, c, hw, hw))
        w = _rt(rng, (c, k, k), scale=0.5)
        return grad_check(
            lambda ts: ops.sum_all(ops.depthwise_conv2d(ts[0], ts[1], stride=stride, padding=pad)), [x, w]
        )

    def maxpool_case() -> float:
        n, c, hw = int(ri(1, 3)), int(ri(1, 4)), int(ri(4, 9))
        k = int(ri(2, 4))
        x = _rt(rng, (n, c, hw, hw))
        return grad_check(lambda ts: ops.sum_all(ops.maxpool2d(ts[0], k=k, stride=2)), [x])

    def gap_case() -> float:
        x = _rt(rng, (int(ri(1, 4)), int(ri(1, 6)), int(ri(2, 6)), int(ri(2, 6))))
        return grad_check(lambda ts: ops.sum_all(ops.global_avgpool(ts[0])), [x])

    def linear_case() -> float:
        n, f, o = int(ri(1, 5)), int(ri(1, 7)), int(ri(1, 6))
        x = _rt(rng, (n, f))
        w = _rt(rng, (o, f))
        b = _rt(rng, (o,))
        return grad_check(lambda ts: ops.sum_all(ops.linear(ts[0], ts[1], ts[2])), [x, w, b])

    def batchnorm_train_case() -> float:
        n, c, hw = int(ri(2, 5)), int(ri(1, 5)), int(ri(2, 5))
        x = _rt(rng, (n, c, hw, hw))
        gamma = Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True)
        beta = _rt(rng, (c,))
        proj = rng.standard_normal((n, c, hw, hw))

        def f(ts):
            y = ops.batchnorm2d(ts[0], ts[1], ts[2], np.zeros(c), np.ones(c), training=True)
            return _project(y, proj)

        return grad_check(f, [x, gamma, beta])

    def batchnorm_eval_case() -> float:
        n, c, hw = int(ri(1, 4)), int(ri(1, 5)), int(ri(2, 5))
        x = _rt(rng, (n, c, hw, hw))
        gamma = Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True)
        beta = _rt(rng, (c,))
        rm = rng.standard_normal(c)
        rv = rng.uniform(0.5, 2.0, c)
        return grad_check(
            lambda ts: ops.sum_all(ops.batchnorm2d(ts[0], ts[1], ts[2], rm, rv, training=False)),
            [x, gamma, beta],
        )

    def relu_case() -> float:
        x = _rt(rng, (int(ri(1, 5)), int(ri(1, 9))))
        w = rng.standard_normal(x.shape)
        return grad_check(lambda ts: _project(ops.relu(ts[0]), w), [x])

    def relu6_case() -> float:
        x = Tensor(rng.uniform(-3, 9, (int(ri(1, 5)), int(ri(1, 9)))), requires_grad=True)
        w = rng.standard_normal(x.shape)
        return grad_check(lambda ts: _project(ops.relu6(ts[0]), w), [x])

    def dropout_case() -> float:
        # Reseeding per call fixes the mask, making the program deterministic.
        x = _rt(rng, (int(ri(2, 5)), int(ri(2, 8))))
        seed = int(ri(1 << 31))

        def f(ts):
            return ops.sum_all(ops.dropout(ts[0], 0.4, training=True, rng=np.random.default_rng(seed)))

        return grad_check(f, [x])

    def concat_case() -> float:
        n, hw = int(ri(1, 3)), int(ri(2, 5))
        a = _rt(rng, (n, int(ri(1, 4)), hw, hw))
        b = _rt(rng, (n, int(ri(1, 4)), hw, hw))
        w = rng.standard_normal((n, a.shape[1] + b.shape[1], hw, hw))
        return grad_check(lambda ts: _project(ops.channel_concat([ts[0], ts[1]]), w), [a, b])

    def add_case() -> float:
        shape = (int(ri(1, 3)), int(ri(1, 4)), int(ri(2, 5)), int(ri(2, 5)))
        a = _rt(rng, shape)
        b = _rt(rng, shape)
        w = rng.standard_normal(shape)
        return grad_check(lambda ts: _project(ops.add(ts[0], ts[1]), w), [a, b])

    def flatten_case() -> float:
        n, c, hw = int(ri(1, 3)), int(ri(1, 4)), int(ri(2, 5))
        x = _rt(rng, (n, c, hw, hw))
        w = _rt(rng, (2, c * hw * hw))
        return grad_check(lambda ts: ops.sum_all(ops.linear(ops.flatten(ts[0]), ts[1])), [x, w])

    def softmax_case() -> float:
        n, k = int(ri(1, 5)), int(ri(2, 6))
        x = _rt(rng, (n, k))
        w = rng.standard_normal((n, k))
        return grad_check(lambda ts: _project(ops.softmax(ts[0]), w), [x])

    def cross_entropy_case() -> float:
        n, k = int(ri(1, 6)), int(ri(2, 6))
        x = _rt(rng, (n, k))
        t = ri(0, k, n)
        return grad_check(lambda ts: ops.cross_entropy(ts[0], t), [x])

    return {
        "conv2d": conv2d_case,
        "depthwise_conv2d": depthwise_case,
        "maxpool2d": maxpool_case,
        "global_avgpool": gap_case,
        "linear": linear_case,
        "batchnorm2d_train": batchnorm_train_case,
        "batchnorm2d_eval": batchnorm_eval_case,
        "relu": relu_case,
        "relu6": relu6_case,
        "dropout": dropout_case,
        "channel_concat": concat_case,
        "add": add_case,
        "flatten": flatten_case,
        "softmax": softmax_case,
        "cross_entropy": cross_entropy_case,
    }


def verify_ops(seed: int = 0, trials: int = 1) -> Dict[str, float]:
    """Max relative error per op over the requested number of randomized trials."""
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(trials):
        for name, case in _op_cases(rng).items():
            err = case()
            if err > worst.get(name, 0.0):
                worst[name] = err
    return worst


def verify_architectures(
    seed: int = 0,
    width_mult: float = 0.125,
    input_hw: int = 64,
    coords_per_param: int = 2,
) -> Dict[str, float]:
    """End-to-end check of all four architectures in double precision.

    Runs in eval mode so the program is deterministic (dropout inert, batch
    statistics frozen); the training-mode normalization path is covered by the
    per-op checks. A random subset of coordinates per tensor is probed.

    Freshly built models are a degenerate point for finite differences: with
    zero biases and identity normalization, all-negative activation patches
    propagate exact zeros forward, parking downstream relu inputs exactly on
    the kink where one-sided slopes differ. Every parameter and buffer is
    therefore jittered to a generic point before checking.
    """
    from .models import ARCH_NAMES, ArchSpec, append_emotion_head, build_model

    rng = np.random.default_rng(seed)
    results: Dict[str, float] = {}
    for arch in ARCH_NAMES:
        spec = ArchSpec(name=arch, width_mult=width_mult, input_hw=input_hw)
        model = build_model(spec, seed=seed, dtype=np.float64)
        append_emotion_head(model)
        model.set_mode("eval")
        for _, p in model.named_params():
            p.data = p.data + rng.normal(0.0, 0.05, p.data.shape)
        for bname, buf in model.named_buffers():
            if bname.endswith("running_var"):
                buf[...] = rng.uniform(0.5, 1.5, buf.shape)
            else:
                buf[...] = rng.normal(0.0, 0.05, buf.shape)
        x = Tensor(rng.standard_normal((2, 3, input_hw, input_hw)), requires_grad=True)
        targets = np.array([0, 1])
        inputs = [x] + [p for _, p in model.named_params()]

        def f(ts, _model=model, _targets=targets):
            return ops.cross_entropy(_model.forward(ts[0]), _targets)

        results[arch] = grad_check(
            f,
            inputs,
            max_coords_per_input=coords_per_param,
            rng=np.random.default_rng(seed + 1),
        )
    return results
