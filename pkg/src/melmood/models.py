"""The four backbone CNNs, the 2-class emotion head, and checkpoint I/O.

Each builder follows the canonical configuration of its family,
scaled by an optional width multiplier for small-machine runs. Class index 0
is "happy", index 1 is "sad"; prediction ties resolve to index 0.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .layers import (
    BatchNorm2d,
    Conv2d,
    DepthwiseConv2d,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    ReLU6,
    Sequential,
)
from .tensor import Tensor, no_grad

ARCH_NAMES = ("vgg16", "resnet18", "squeezenet_v10", "mobilenet_v2")
LABELS = ("happy", "sad")

_CHECKPOINT_MAGIC = b"MELCKPT1"


def scale_width(reference: int, width_mult: float) -> int:
    """Scaled layer width: round half away from zero, floor of 1."""
    return max(1, int(math.floor(reference * width_mult + 0.5)))


@dataclass(frozen=True)
class ArchSpec:
    name: str
    width_mult: float = 1.0
    input_hw: int = 224

    def __post_init__(self):
        if self.name not in ARCH_NAMES:
            raise ValueError("unknown architecture %r, expected one of %r" % (self.name, ARCH_NAMES))
        if not 0.0 < self.width_mult <= 1.0:
            raise ValueError("width_mult must be in (0, 1], got %r" % (self.width_mult,))
        if self.input_hw < 1:
            raise ValueError("input_hw must be positive, got %r" % (self.input_hw,))

    @property
    def backbone_out(self) -> int:
        return scale_width(1000, self.width_mult)

    def scaled(self, reference: int) -> int:
        return scale_width(reference, self.width_mult)


class Model(Module):
    """Backbone producing a flat backbone_out feature, plus an optional head."""

    def __init__(self, spec: ArchSpec, backbone: Module, backbone_out: int):
        super().__init__()
        self.spec = spec
        self.backbone_out = backbone_out
        self.backbone = backbone
        self.head: Optional[Linear] = None

    def forward(self, x: Tensor) -> Tensor:
        features = self.backbone(x)
        if self.head is None:
            return features
        return self.head(features)


def _conv_out(h: int, k: int, stride: int, padding: int, where: str) -> int:
    out = (h + 2 * padding - k) // stride + 1
    if out < 1:
        raise ValueError("input too small: %s leaves %d spatial pixels" % (where, out))
    return out


class ResidualBlock(Module):
    """Two 3x3 conv+BN stages with a shortcut; output = relu(branch + shortcut)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("residual block stride must be 1 or 2, got %r" % stride)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.shortcut_conv: Optional[Conv2d] = Conv2d(
                in_ch, out_ch, 1, stride=stride, padding=0, bias=False, rng=rng, dtype=dtype
            )
            self.shortcut_bn: Optional[BatchNorm2d] = BatchNorm2d(out_ch, dtype=dtype)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        if self.shortcut_conv is not None:
            s = self.shortcut_bn(self.shortcut_conv(x))
        else:
            s = x
        return ops.relu(ops.add(h, s))


class FireModule(Module):
    """Squeeze to s1x1 channels, then expand via parallel 1x1 and 3x3 convs."""

    def __init__(self, in_ch: int, s1x1: int, e1x1: int, e3x3: int, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if s1x1 >= e1x1 + e3x3:
            raise ValueError(
                "fire module squeeze width %d must be less than expand width %d" % (s1x1, e1x1 + e3x3)
            )
        self.squeeze = Conv2d(in_ch, s1x1, 1, rng=rng, dtype=dtype)
        self.expand1 = Conv2d(s1x1, e1x1, 1, rng=rng, dtype=dtype)
        self.expand3 = Conv2d(s1x1, e3x3, 3, padding=1, rng=rng, dtype=dtype)
        self.out_channels = e1x1 + e3x3

    def forward(self, x: Tensor) -> Tensor:
        s = ops.relu(self.squeeze(x))
        return ops.channel_concat([ops.relu(self.expand1(s)), ops.relu(self.expand3(s))])


class InvertedResidual(Module):
    """Expand (1x1, relu6), depthwise 3x3, linear 1x1 projection, optional add.

    The expansion conv is omitted when t = 1 (the block starts at its own
    width), matching the canonical MobileNetV2 layout.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        stride: int,
        expansion_t: int,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("inverted residual stride must be 1 or 2, got %r" % stride)
        hidden = in_ch * expansion_t
        self.use_residual = stride == 1 and in_ch == out_ch
        if expansion_t != 1:
            self.expand_conv: Optional[Conv2d] = Conv2d(in_ch, hidden, 1, bias=False, rng=rng, dtype=dtype)
            self.expand_bn: Optional[BatchNorm2d] = BatchNorm2d(hidden, dtype=dtype)
        else:
            self.expand_conv = None
            self.expand_bn = None
        self.dw = DepthwiseConv2d(hidden, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.dw_bn = BatchNorm2d(hidden, dtype=dtype)
        self.project_conv = Conv2d(hidden, out_ch, 1, bias=False, rng=rng, dtype=dtype)
        self.project_bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        if self.expand_conv is not None:
            h = ops.relu6(self.expand_bn(self.expand_conv(h)))
        h = ops.relu6(self.dw_bn(self.dw(h)))
        h = self.project_bn(self.project_conv(h))
        if self.use_residual:
            h = ops.add(h, x)
        return h


_VGG_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def _build_vgg16(spec: ArchSpec, rng, drop_rng, dtype) -> Tuple[Module, int]:
    steps: List[Module] = []
    in_ch, h = 3, spec.input_hw
    for entry in _VGG_CFG:
        if entry == "M":
            h = _conv_out(h, 2, 2, 0, "vgg16 maxpool")
            steps.append(MaxPool2d(2, 2))
        else:
            out_ch = spec.scaled(entry)
            steps.append(Conv2d(in_ch, out_ch, 3, padding=1, rng=rng, dtype=dtype))
            steps.append(ReLU())
            in_ch = out_ch
    fc = spec.scaled(4096)
    steps += [
        Flatten(),
        Linear(in_ch * h * h, fc, rng=rng, dtype=dtype),
        ReLU(),
        Dropout(0.5, rng=drop_rng),
        Linear(fc, fc, rng=rng, dtype=dtype),
        ReLU(),
        Dropout(0.5, rng=drop_rng),
        Linear(fc, spec.backbone_out, rng=rng, dtype=dtype),
    ]
    return Sequential(*steps), spec.backbone_out


_RESNET_STAGES = ((64, 1), (128, 2), (256, 2), (512, 2))


def _build_resnet18(spec: ArchSpec, rng, drop_rng, dtype) -> Tuple[Module, int]:
    h = _conv_out(spec.input_hw, 7, 2, 3, "resnet18 stem")
    h = _conv_out(h, 3, 2, 1, "resnet18 stem pool")
    stem_ch = spec.scaled(64)
    steps: List[Module] = [
        Conv2d(3, stem_ch, 7, stride=2, padding=3, bias=False, rng=rng, dtype=dtype),
        BatchNorm2d(stem_ch, dtype=dtype),
        ReLU(),
        MaxPool2d(3, 2, padding=1),
    ]
    in_ch = stem_ch
    for width, stride in _RESNET_STAGES:
        out_ch = spec.scaled(width)
        for block_stride in (stride, 1):
            steps.append(ResidualBlock(in_ch, out_ch, block_stride, rng=rng, dtype=dtype))
            in_ch = out_ch
            h = _conv_out(h, 3, block_stride, 1, "resnet18 stage")
    steps += [GlobalAvgPool(), Linear(in_ch, spec.backbone_out, rng=rng, dtype=dtype)]
    return Sequential(*steps), spec.backbone_out


_FIRE_CFG = ((16, 64, 64), (16, 64, 64), (32, 128, 128), "M", (32, 128, 128), (48, 192, 192), (48, 192, 192), (64, 256, 256), "M", (64, 256, 256))


def _build_squeezenet_v10(spec: ArchSpec, rng, drop_rng, dtype) -> Tuple[Module, int]:
    h = _conv_out(spec.input_hw, 7, 2, 0, "squeezenet stem")
    h = _conv_out(h, 3, 2, 0, "squeezenet stem pool")
    stem_ch = spec.scaled(96)
    steps: List[Module] = [
        Conv2d(3, stem_ch, 7, stride=2, rng=rng, dtype=dtype),
        ReLU(),
        MaxPool2d(3, 2),
    ]
    in_ch = stem_ch
    for entry in _FIRE_CFG:
        if entry == "M":
            h = _conv_out(h, 3, 2, 0, "squeezenet maxpool")
            steps.append(MaxPool2d(3, 2))
        else:
            s1, e1, e3 = (spec.scaled(c) for c in entry)
            fire = FireModule(in_ch, s1, e1, e3, rng=rng, dtype=dtype)
            steps.append(fire)
            in_ch = fire.out_channels
    steps += [
        Dropout(0.5, rng=drop_rng),
        Conv2d(in_ch, spec.backbone_out, 1, rng=rng, dtype=dtype),
        ReLU(),
        GlobalAvgPool(),
    ]
    return Sequential(*steps), spec.backbone_out


_MBV2_CFG = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def _build_mobilenet_v2(spec: ArchSpec, rng, drop_rng, dtype) -> Tuple[Module, int]:
    h = _conv_out(spec.input_hw, 3, 2, 1, "mobilenet_v2 stem")
    stem_ch = spec.scaled(32)
    steps: List[Module] = [
        Conv2d(3, stem_ch, 3, stride=2, padding=1, bias=False, rng=rng, dtype=dtype),
        BatchNorm2d(stem_ch, dtype=dtype),
        ReLU6(),
    ]
    in_ch = stem_ch
    for t, c, n, s in _MBV2_CFG:
        out_ch = spec.scaled(c)
        for i in range(n):
            stride = s if i == 0 else 1
            steps.append(InvertedResidual(in_ch, out_ch, stride, t, rng=rng, dtype=dtype))
            in_ch = out_ch
            h = _conv_out(h, 3, stride, 1, "mobilenet_v2 block")
    last_ch = spec.scaled(1280)
    steps += [
        Conv2d(in_ch, last_ch, 1, bias=False, rng=rng, dtype=dtype),
        BatchNorm2d(last_ch, dtype=dtype),
        ReLU6(),
        GlobalAvgPool(),
        Linear(last_ch, spec.backbone_out, rng=rng, dtype=dtype),
    ]
    return Sequential(*steps), spec.backbone_out


_BUILDERS = {
    "vgg16": _build_vgg16,
    "resnet18": _build_resnet18,
    "squeezenet_v10": _build_squeezenet_v10,
    "mobilenet_v2": _build_mobilenet_v2,
}


def build_model(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate the architecture with seeded Kaiming-uniform initialization."""
    root = np.random.SeedSequence([int(seed), ARCH_NAMES.index(spec.name)])
    init_ss, drop_ss = root.spawn(2)
    rng = np.random.default_rng(init_ss)
    drop_rng = np.random.default_rng(drop_ss)
    backbone, backbone_out = _BUILDERS[spec.name](spec, rng, drop_rng, dtype)
    return Model(spec, backbone, backbone_out)


def append_emotion_head(model: Model, seed: int = 0) -> Model:
    """Attach the 2-class linear head to the backbone feature."""
    if model.head is not None:
        raise ValueError("emotion head already attached")
    first = next(iter(model.named_params()), None)
    dtype = first[1].dtype if first is not None else np.float32
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    model.head = Linear(model.backbone_out, len(LABELS), rng=rng, dtype=dtype)
    model.head.training = model.training
    return model


def entropy_nats(probabilities) -> float:
    """Shannon entropy -sum(p ln p) in nats; zero-probability terms contribute 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("entropy_nats expects a 1-d probability vector")
    if (p < 0).any():
        raise ValueError("probabilities must be non-negative")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class Prediction:
    label: str
    probabilities: np.ndarray
    entropy_nats: float


def predict(model: Model, model_input) -> Prediction:
    """Classify one input; ties go to class 0. Model must be in eval mode."""
    if model.training:
        raise ValueError("predict requires the model in eval mode")
    if model.head is None:
        raise ValueError("model has no emotion head")
    image = np.asarray(getattr(model_input, "pixels", model_input))
    if image.ndim != 3:
        raise ValueError("predict expects a single (C, H, W) input, got %r" % (image.shape,))
    first = next(iter(model.named_params()))
    with no_grad():
        logits = model.forward(Tensor(image[None].astype(first[1].dtype))).data[0].astype(np.float64)
    z = logits - logits.max()
    e = np.exp(z)
    p = e / e.sum()
    idx = int(np.argmax(p))
    return Prediction(label=LABELS[idx], probabilities=p, entropy_nats=entropy_nats(p))


def _state_entries(model: Model) -> List[Tuple[str, str, np.ndarray]]:
    entries = [("param", name, p.data) for name, p in model.named_params()]
    entries += [("buffer", name, b) for name, b in model.named_buffers()]
    return entries


def save_checkpoint(model: Model, path) -> None:
    """JSON header (arch, scaling, tensor manifest) + little-endian f32 blobs."""
    manifest = []
    blobs = []
    offset = 0
    for kind, name, arr in _state_entries(model):
        raw = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "kind": kind})
        blobs.append(raw.tobytes())
        offset += raw.nbytes
    header = {
        "format": 1,
        "arch": model.spec.name,
        "width_mult": model.spec.width_mult,
        "input_hw": model.spec.input_hw,
        "has_head": model.head is not None,
        "entries": manifest,
    }
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Model:
    """Rebuild the model described by the header and restore every tensor."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(_CHECKPOINT_MAGIC) + 4 or not data.startswith(_CHECKPOINT_MAGIC):
        raise ValueError("not a checkpoint file: %s" % path)
    (header_len,) = struct.unpack_from("<I", data, len(_CHECKPOINT_MAGIC))
    header_start = len(_CHECKPOINT_MAGIC) + 4
    blob_start = header_start + header_len
    if len(data) < blob_start:
        raise ValueError("truncated checkpoint header: %s" % path)
    try:
        header = json.loads(data[header_start:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError("malformed checkpoint header: %s" % exc) from exc

    spec = ArchSpec(name=header["arch"], width_mult=header["width_mult"], input_hw=header["input_hw"])
    model = build_model(spec)
    if header.get("has_head"):
        append_emotion_head(model)

    params: Dict[str, Tensor] = dict(model.named_params())
    buffers: Dict[str, np.ndarray] = dict(model.named_buffers())
    for entry in header["entries"]:
        name, shape, kind = entry["name"], tuple(entry["shape"]), entry.get("kind", "param")
        count = int(np.prod(shape)) if shape else 1
        start = blob_start + entry["offset"]
        if start + 4 * count > len(data):
            raise ValueError("truncated checkpoint blob for %r" % name)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape)
        if kind == "param":
            target = params.get(name)
            if target is None:
                raise ValueError("checkpoint parameter %r not present in rebuilt model" % name)
            if target.data.shape != shape:
                raise ValueError("checkpoint shape mismatch for %r" % name)
            target.data = arr.astype(target.data.dtype)
        else:
            buf = buffers.get(name)
            if buf is None or buf.shape != shape:
                raise ValueError("checkpoint buffer mismatch for %r" % name)
            buf[...] = arr
    return model
