import math

import numpy as np
import numpy.testing as npt
import pytest

from melmood.models import (
    ARCH_NAMES,
    ArchSpec,
    FireModule,
    append_emotion_head,
    build_model,
    entropy_nats,
    load_checkpoint,
    predict,
    save_checkpoint,
    scale_width,
)
from melmood.tensor import Tensor, no_grad


def _s(ref, w):
    # round half away from zero, floored at one channel
    return max(1, int(math.floor(ref * w + 0.5)))


def count_vgg16(w=1.0, hw=224):
    total, in_ch = 0, 3
    for v in (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"):
        if v == "M":
            hw //= 2
            continue
        out = _s(v, w)
        total += out * in_ch * 9 + out
        in_ch = out
    fc = _s(4096, w)
    flat = in_ch * hw * hw
    total += fc * flat + fc
    total += fc * fc + fc
    out_dim = _s(1000, w)
    total += out_dim * fc + out_dim
    return total


def count_resnet18(w=1.0):
    def bn(c):
        return 2 * c

    total = 0
    stem = _s(64, w)
    total += stem * 3 * 49 + bn(stem)
    in_ch = stem
    for ref_out, stage_stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        out = _s(ref_out, w)
        for stride in (stage_stride, 1):
            total += out * in_ch * 9 + bn(out) + out * out * 9 + bn(out)
            if stride != 1 or in_ch != out:
                total += out * in_ch + bn(out)
            in_ch = out
    out_dim = _s(1000, w)
    total += out_dim * in_ch + out_dim
    return total


def count_squeezenet(w=1.0):
    total = 0
    stem = _s(96, w)
    total += stem * 3 * 49 + stem
    in_ch = stem
    for cfg in ((16, 64, 64), (16, 64, 64), (32, 128, 128), "M", (32, 128, 128),
                (48, 192, 192), (48, 192, 192), (64, 256, 256), "M", (64, 256, 256)):
        if cfg == "M":
            continue
        s1, e1, e3 = (_s(c, w) for c in cfg)
        total += s1 * in_ch + s1
        total += e1 * s1 + e1
        total += e3 * s1 * 9 + e3
        in_ch = e1 + e3
    out_dim = _s(1000, w)
    total += out_dim * in_ch + out_dim
    return total


def count_mobilenet_v2(w=1.0):
    def bn(c):
        return 2 * c

    total = 0
    stem = _s(32, w)
    total += stem * 3 * 9 + bn(stem)
    in_ch = stem
    for t, c, n, s in ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                       (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)):
        out = _s(c, w)
        for _ in range(n):
            hidden = in_ch * t
            if t != 1:
                total += hidden * in_ch + bn(hidden)
            total += hidden * 9 + bn(hidden)
            total += out * hidden + bn(out)
            in_ch = out
    last = _s(1280, w)
    total += last * in_ch + bn(last)
    out_dim = _s(1000, w)
    total += out_dim * last + out_dim
    return total


COUNTERS = {
    "vgg16": count_vgg16,
    "resnet18": lambda: count_resnet18(),
    "squeezenet_v10": count_squeezenet,
    "mobilenet_v2": count_mobilenet_v2,
}


def test_full_width_param_counts_match_independent_arithmetic():
    expected = {name: COUNTERS[name]() for name in ARCH_NAMES}
    assert expected["vgg16"] == 138357544
    assert expected["resnet18"] == 11689512
    assert 1.2e6 < expected["squeezenet_v10"] < 1.3e6
    assert 3.4e6 < expected["mobilenet_v2"] < 3.6e6
    for name in ARCH_NAMES:
        model = build_model(ArchSpec(name, width_mult=1.0, input_hw=224), seed=0)
        assert model.param_count() == expected[name], name
        del model


def test_emotion_head_adds_2002_params_at_full_width():
    model = build_model(ArchSpec("resnet18", width_mult=1.0, input_hw=224), seed=0)
    before = model.param_count()
    append_emotion_head(model, seed=0)
    assert model.param_count() - before == 2002


def test_scale_width_rounding():
    assert scale_width(1000, 0.125) == 125
    assert scale_width(64, 0.125) == 8
    assert scale_width(4096, 0.125) == 512
    assert scale_width(16, 0.03) == 1
    assert scale_width(24, 0.125) == 3
    assert scale_width(1, 1.0) == 1


def test_arch_spec_validation():
    with pytest.raises(ValueError):
        ArchSpec("alexnet")
    with pytest.raises(ValueError):
        ArchSpec("vgg16", width_mult=0.0)
    with pytest.raises(ValueError):
        ArchSpec("vgg16", width_mult=1.5)
    with pytest.raises(ValueError):
        ArchSpec("vgg16", input_hw=0)


def test_fire_module_squeeze_constraint():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="squeeze width"):
        FireModule(8, 16, 8, 8, rng=rng)
    FireModule(8, 15, 8, 8, rng=rng)


def test_tiny_forward_shapes():
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 64, 64)).astype(np.float32))
    for name in ARCH_NAMES:
        model = build_model(ArchSpec(name, width_mult=0.125, input_hw=64), seed=0)
        model.set_mode("eval")
        with no_grad():
            feats = model.forward(x)
        assert feats.shape == (2, 125), name
        append_emotion_head(model, seed=0)
        with no_grad():
            logits = model.forward(x)
        assert logits.shape == (2, 2), name


def test_build_determinism_and_seed_sensitivity():
    spec = ArchSpec("squeezenet_v10", width_mult=0.125, input_hw=64)
    a = dict(build_model(spec, seed=9).named_params())
    b = dict(build_model(spec, seed=9).named_params())
    c = dict(build_model(spec, seed=10).named_params())
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    spec = ArchSpec("mobilenet_v2", width_mult=0.125, input_hw=64)
    model = build_model(spec, seed=4)
    append_emotion_head(model, seed=4)
    model.set_mode("eval")
    x = Tensor(np.random.default_rng(5).standard_normal((3, 3, 64, 64)).astype(np.float32))
    with no_grad():
        before = model.forward(x).data.copy()
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    restored = load_checkpoint(path)
    restored.set_mode("eval")
    with no_grad():
        after = restored.forward(x).data
    assert np.array_equal(before, after)
    assert restored.spec == spec


def test_checkpoint_rejects_corruption(tmp_path):
    spec = ArchSpec("resnet18", width_mult=0.125, input_hw=64)
    model = build_model(spec, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    (tmp_path / "bad_magic.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad_magic.ckpt")
    (tmp_path / "truncated.ckpt").write_bytes(raw[: len(raw) - 64])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "truncated.ckpt")


def test_predict_contract():
    model = build_model(ArchSpec("resnet18", width_mult=0.125, input_hw=64), seed=1)
    append_emotion_head(model, seed=1)
    model.set_mode("eval")
    pixels = np.random.default_rng(6).standard_normal((3, 64, 64)).astype(np.float32)
    result = predict(model, pixels)
    assert result.label in ("happy", "sad")
    npt.assert_allclose(result.probabilities.sum(), 1.0, atol=1e-12)
    assert result.entropy_nats >= 0.0


def test_predict_requires_eval_mode_and_head():
    model = build_model(ArchSpec("resnet18", width_mult=0.125, input_hw=64), seed=1)
    pixels = np.zeros((3, 64, 64), dtype=np.float32)
    with pytest.raises(ValueError):
        predict(model, pixels)
    model.set_mode("eval")
    with pytest.raises(ValueError):
        predict(model, pixels)


def test_entropy_nats_examples():
    assert entropy_nats(np.array([1.0, 0.0])) == 0.0
    npt.assert_allclose(entropy_nats(np.array([0.5, 0.5])), np.log(2.0), atol=1e-12)
    # Near-certain prediction: softmax([5, -5]) has p2 = 1/(1+e^10), and the
    # closed form -(p1 ln p1 + p2 ln p2) evaluates to 4.9938e-4 nats.
    p2 = 1.0 / (1.0 + np.exp(10.0))
    probs = np.array([1.0 - p2, p2])
    npt.assert_allclose(entropy_nats(probs), 4.9938e-4, atol=1e-8)
    with pytest.raises(ValueError):
        entropy_nats(np.array([0.5, -0.5]))
