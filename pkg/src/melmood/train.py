"""Training and evaluation of emotion classifiers on manifest-listed WAVs.

The trainer slices each clip into 5 s sub-clips, renders log-mel model inputs
once up front, then runs seeded mini-batch gradient descent. Per-epoch
validation accuracy picks the best parameter snapshot (ties go to the earlier
epoch), which is restored before the model is returned.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .audio import AudioClip, WavError, read_wav, slice_clip
from .data import DatasetManifest, split_dataset
from .dsp import (
    MelFilterbank,
    SpectrogramParams,
    build_mel_filterbank,
    log_compress,
    mel_spectrogram,
    power_spectrogram,
    stft,
    to_model_input,
)
from .models import (
    LABELS,
    ArchSpec,
    Model,
    append_emotion_head,
    build_model,
    entropy_nats,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .optim import AdamConfig, OptimizerConfig, make_optimizer
from .tensor import Tensor, no_grad

__all__ = [
    "TrainConfig",
    "TrainReport",
    "EvalResult",
    "train",
    "evaluate",
    "entropy",
    "export_loss_curve",
    "export_loss_curves",
    "export_accuracy_csv",
    "split_dataset",
    "save_checkpoint",
    "load_checkpoint",
]

SUB_CLIP_LEN_S = 5.0


@dataclass
class TrainConfig:
    arch: ArchSpec
    optimizer: OptimizerConfig = field(default_factory=AdamConfig)
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    split_ratio: float = 0.85
    split_level: str = "clip"
    dsp: SpectrogramParams = field(default_factory=SpectrogramParams)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1, got %r" % (self.batch_size,))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0, got %r" % (self.epochs,))
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must be in (0, 1), got %r" % (self.split_ratio,))
        if self.split_level not in ("clip", "subclip"):
            raise ValueError("split_level must be 'clip' or 'subclip', got %r" % (self.split_level,))


@dataclass
class TrainReport:
    losses: List[float]
    val_accuracies: List[float]
    epoch_seconds: List[float]
    confusion: np.ndarray

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        if self.confusion.shape != (2, 2):
            raise ValueError("confusion must be 2x2, got %r" % (self.confusion.shape,))


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    mean_loss: float
    mean_entropy_nats: float


def entropy(probabilities) -> float:
    """Shannon entropy in nats of a distribution that must sum to 1."""
    p = np.asarray(probabilities, dtype=np.float64)
    total = float(p.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError("probabilities must sum to 1 within 1e-6, got %r" % (total,))
    return entropy_nats(p)


def _pipeline_input(clip: AudioClip, params: SpectrogramParams, fb: MelFilterbank, hw: int) -> np.ndarray:
    mel = log_compress(mel_spectrogram(power_spectrogram(stft(clip.samples, params), params), fb))
    return to_model_input(mel, out_h=hw, out_w=hw).pixels


def _prepare_inputs(
    manifest: DatasetManifest,
    params: SpectrogramParams,
    input_hw: int,
    splits: Optional[Iterable[str]] = None,
) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Slice every selected clip into 5 s sub-clips and render model inputs.

    Returns (pixels (N,3,H,W) float32, targets (N,) int64, split per sample).
    """
    wanted = None if splits is None else set(splits)
    fb_cache: Dict[int, MelFilterbank] = {}
    pixels: List[np.ndarray] = []
    targets: List[int] = []
    sample_splits: List[str] = []
    for entry in manifest.entries:
        if wanted is not None and entry.split not in wanted:
            continue
        path = manifest.resolve(entry)
        try:
            clip = read_wav(path, label=entry.label, source_id=entry.source_id)
        except (OSError, WavError) as exc:
            raise RuntimeError("failed to read audio file %s: %s" % (path, exc)) from exc
        per = int(round(SUB_CLIP_LEN_S * clip.sample_rate_hz))
        count = min(5, clip.samples.size // per)
        if count < 1:
            raise ValueError(
                "clip too short for a %gs sub-clip: %s (%.3fs)" % (SUB_CLIP_LEN_S, path, clip.duration_s)
            )
        rate = clip.sample_rate_hz
        if rate not in fb_cache:
            fb_cache[rate] = build_mel_filterbank(params, rate)
        for sub in slice_clip(clip, sub_len_s=SUB_CLIP_LEN_S, count=count):
            pixels.append(_pipeline_input(sub, params, fb_cache[rate], input_hw))
            targets.append(LABELS.index(entry.label))
            sample_splits.append(entry.split)
    if not pixels:
        raise ValueError("no samples selected from manifest (splits=%r)" % (None if wanted is None else sorted(wanted),))
    return np.stack(pixels), np.asarray(targets, dtype=np.int64), sample_splits


def _batched_eval(model: Model, pixels: np.ndarray, targets: np.ndarray, chunk: int = 32) -> EvalResult:
    confusion = np.zeros((2, 2), dtype=np.int64)
    losses: List[float] = []
    entropies: List[float] = []
    correct = 0
    with no_grad():
        for start in range(0, pixels.shape[0], chunk):
            x = Tensor(pixels[start : start + chunk])
            logits = model.forward(x).data.astype(np.float64)
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            probs = e / e.sum(axis=1, keepdims=True)
            preds = np.argmax(probs, axis=1)
            batch_targets = targets[start : start + chunk]
            for p_row, pred, target in zip(probs, preds, batch_targets):
                confusion[target, pred] += 1
                correct += int(pred == target)
                losses.append(-float(np.log(max(p_row[target], 1e-300))))
                entropies.append(entropy_nats(p_row))
    n = int(targets.size)
    return EvalResult(
        accuracy=correct / n,
        confusion=confusion,
        mean_loss=float(np.mean(losses)),
        mean_entropy_nats=float(np.mean(entropies)),
    )


def _snapshot(model: Model) -> Dict[str, np.ndarray]:
    state = {name: t.data.copy() for name, t in model.named_params()}
    for name, buf in model.named_buffers():
        state["buffer:" + name] = buf.copy()
    return state


def _restore(model: Model, state: Mapping[str, np.ndarray]) -> None:
    for name, t in model.named_params():
        t.data = state[name].copy()
    for name, buf in model.named_buffers():
        buf[...] = state["buffer:" + name]


def train(config: TrainConfig, manifest: DatasetManifest) -> Tuple[Model, TrainReport]:
    """Train a fresh seeded model on the manifest's train split."""
    if any(e.split == "unassigned" for e in manifest.entries):
        raise ValueError("manifest has unassigned entries; run split_dataset first")
    pixels, targets, sample_splits = _prepare_inputs(
        manifest, config.dsp, config.arch.input_hw, splits=("train", "val")
    )
    train_idx = np.array([i for i, s in enumerate(sample_splits) if s == "train"], dtype=np.int64)
    val_idx = np.array([i for i, s in enumerate(sample_splits) if s == "val"], dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("manifest has no train entries")

    model = build_model(config.arch, seed=config.seed)
    append_emotion_head(model, seed=config.seed)
    optimizer = make_optimizer(list(model.named_params()), config.optimizer)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))

    losses: List[float] = []
    val_accuracies: List[float] = []
    epoch_seconds: List[float] = []
    best: Optional[Tuple[float, int, Dict[str, np.ndarray]]] = None
    iteration = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        model.set_mode("train")
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            if batch.size == 1 and config.batch_size > 1:
                # Batch normalization needs at least two samples in training
                # mode, so a trailing singleton batch is skipped.
                continue
            optimizer.zero_grad()
            loss = ops.cross_entropy(model.forward(Tensor(pixels[batch])), targets[batch])
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError("non-finite loss %r at iteration %d" % (value, iteration))
            losses.append(value)
            loss.backward()
            optimizer.step()
            iteration += 1
        model.set_mode("eval")
        if val_idx.size:
            acc = _batched_eval(model, pixels[val_idx], targets[val_idx]).accuracy
            val_accuracies.append(acc)
            if best is None or acc > best[0]:
                best = (acc, epoch, _snapshot(model))
        epoch_seconds.append(time.perf_counter() - t0)

    if best is not None:
        _restore(model, best[2])
    model.set_mode("eval")
    if val_idx.size:
        confusion = _batched_eval(model, pixels[val_idx], targets[val_idx]).confusion
    else:
        confusion = np.zeros((2, 2), dtype=np.int64)
    return model, TrainReport(
        losses=losses,
        val_accuracies=val_accuracies,
        epoch_seconds=epoch_seconds,
        confusion=confusion,
    )


def evaluate(
    model: Model,
    manifest: DatasetManifest,
    split: str = "val",
    dsp: Optional[SpectrogramParams] = None,
) -> EvalResult:
    """Per-sample evaluation on one split; accuracy matches predict() exactly."""
    if model.mode != "eval":
        raise ValueError("evaluate requires the model in eval mode")
    if split not in ("train", "val"):
        raise ValueError("split must be 'train' or 'val', got %r" % (split,))
    params = dsp if dsp is not None else SpectrogramParams()
    pixels, targets, _ = _prepare_inputs(model_input_manifest(manifest, split), params, model.spec.input_hw)
    confusion = np.zeros((2, 2), dtype=np.int64)
    losses: List[float] = []
    entropies: List[float] = []
    correct = 0
    for sample, target in zip(pixels, targets):
        pred = predict(model, sample)
        pred_idx = LABELS.index(pred.label)
        confusion[target, pred_idx] += 1
        correct += int(pred_idx == target)
        losses.append(-float(np.log(max(pred.probabilities[target], 1e-300))))
        entropies.append(pred.entropy_nats)
    return EvalResult(
        accuracy=correct / targets.size,
        confusion=confusion,
        mean_loss=float(np.mean(losses)),
        mean_entropy_nats=float(np.mean(entropies)),
    )


def model_input_manifest(manifest: DatasetManifest, split: str) -> DatasetManifest:
    """Restrict a manifest to one split, erroring if that split is empty."""
    kept = [e for e in manifest.entries if e.split == split]
    if not kept:
        raise ValueError("split %r has no entries" % split)
    return replace(manifest, entries=kept)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def _svg_line_plot(
    series: Sequence[Tuple[str, Sequence[float]]],
    xlabel: str,
    ylabel: str,
    width: int = 720,
    height: int = 440,
) -> str:
    left, right, top, bottom = 70, 20, 20, 55
    plot_w, plot_h = width - left - right, height - top - bottom
    xmax = max(max(1, len(ys) - 1) for _, ys in series)
    all_ys = [y for _, ys in series for y in ys]
    ymin, ymax = min(all_ys), max(all_ys)
    if ymax == ymin:
        ymax = ymin + 1.0
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad

    def sx(x: float) -> float:
        return left + plot_w * x / xmax

    def sy(y: float) -> float:
        return top + plot_h * (1.0 - (y - ymin) / (ymax - ymin))

    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
        'viewBox="0 0 %d %d">' % (width, height, width, height),
        '<rect width="%d" height="%d" fill="white"/>' % (width, height),
        '<line x1="%d" y1="%d" x2="%d" y2="%d" stroke="black"/>'
        % (left, top + plot_h, left + plot_w, top + plot_h),
        '<line x1="%d" y1="%d" x2="%d" y2="%d" stroke="black"/>' % (left, top, left, top + plot_h),
        '<text x="%d" y="%d" text-anchor="middle" font-size="14">%s</text>'
        % (left + plot_w // 2, height - 12, xlabel),
        '<text x="16" y="%d" text-anchor="middle" font-size="14" '
        'transform="rotate(-90 16 %d)">%s</text>'
        % (top + plot_h // 2, top + plot_h // 2, ylabel),
        '<text x="%d" y="%d" text-anchor="end" font-size="11">%.4g</text>'
        % (left - 6, top + 10, ymax),
        '<text x="%d" y="%d" text-anchor="end" font-size="11">%.4g</text>'
        % (left - 6, top + plot_h, ymin),
        '<text x="%d" y="%d" text-anchor="middle" font-size="11">0</text>'
        % (left, top + plot_h + 16),
        '<text x="%d" y="%d" text-anchor="middle" font-size="11">%d</text>'
        % (left + plot_w, top + plot_h + 16, xmax),
    ]
    for k, (name, ys) in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join("%.2f,%.2f" % (sx(i), sy(y)) for i, y in enumerate(ys))
        parts.append('<polyline fill="none" stroke="%s" stroke-width="1.5" points="%s"/>' % (color, pts))
        parts.append(
            '<text x="%d" y="%d" font-size="12" fill="%s">%s</text>'
            % (left + plot_w - 150, top + 18 + 16 * k, color, name)
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_loss_curve(report: TrainReport, csv_path, svg_path=None) -> None:
    """Write per-iteration losses as CSV and, optionally, an SVG plot."""
    if not report.losses:
        raise ValueError("cannot export an empty loss curve")
    lines = ["iteration,loss"]
    lines += ["%d,%.10g" % (i, v) for i, v in enumerate(report.losses)]
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if svg_path is not None:
        svg = _svg_line_plot([("loss", report.losses)], xlabel="iteration", ylabel="loss")
        Path(svg_path).write_text(svg, encoding="utf-8")


def export_loss_curves(reports: Mapping[str, TrainReport], csv_path, svg_path=None) -> None:
    """Merged export: one CSV (model,iteration,loss) and one polyline per model."""
    if not reports or any(not r.losses for r in reports.values()):
        raise ValueError("cannot export empty loss curves")
    lines = ["model,iteration,loss"]
    for name, report in reports.items():
        lines += ["%s,%d,%.10g" % (name, i, v) for i, v in enumerate(report.losses)]
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if svg_path is not None:
        svg = _svg_line_plot(
            [(name, report.losses) for name, report in reports.items()],
            xlabel="iteration",
            ylabel="loss",
        )
        Path(svg_path).write_text(svg, encoding="utf-8")


def export_accuracy_csv(report: TrainReport, csv_path) -> None:
    if not report.val_accuracies:
        raise ValueError("cannot export empty accuracy history")
    lines = ["epoch,val_accuracy"]
    lines += ["%d,%.10g" % (i, v) for i, v in enumerate(report.val_accuracies)]
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
