"""Command-line entry point for the music emotion recognition pipeline.

Exit codes: 0 success, 1 usage error, 2 runtime error. Heavy imports stay
inside the command handlers so --deterministic can pin BLAS thread counts
through the environment before numpy is first loaded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

ARCH_CHOICES = ("vgg16", "resnet18", "squeezenet", "mobilenet_v2")
_ARCH_FLAG_TO_NAME = {
    "vgg16": "vgg16",
    "resnet18": "resnet18",
    "squeezenet": "squeezenet_v10",
    "mobilenet_v2": "mobilenet_v2",
}
_DISPLAY_NAMES = {
    "vgg16": "VGG16",
    "resnet18": "ResNet18",
    "squeezenet_v10": "SqueezeNetV1",
    "mobilenet_v2": "MobileNetV2",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError("%s\n%s" % (message, self.format_usage().rstrip()))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="JSON", default=None, help="JSON file of flag defaults")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", help="pin BLAS threads for bit-reproducible runs")
    p.add_argument("--verbose", action="store_true", help="print the resolved effective config")


def build_parser() -> _Parser:
    parser = _Parser(prog="melmood", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--n-per-class", type=int, default=None, dest="n_per_class")
    p.add_argument("--clip-len", type=float, default=None, dest="clip_len_s")
    p.add_argument("--rate", type=int, default=None, dest="sample_rate_hz")
    _add_common(p)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("ingest", help="build a manifest from happy/ and sad/ WAV subdirectories")
    p.add_argument("--dir", required=True, help="corpus root directory")
    p.add_argument("--out", default=None, help="manifest path (default <dir>/manifest.json)")
    _add_common(p)
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("spectrogram", help="render one WAV to CSV and PNG log-mel outputs")
    p.add_argument("wav", help="input WAV file")
    p.add_argument("--out", default=None, help="output directory (default current)")
    _add_common(p)
    p.set_defaults(handler=_cmd_spectrogram)

    p = sub.add_parser("train", help="train an emotion classifier from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", choices=ARCH_CHOICES, default=None)
    p.add_argument("--width-mult", type=float, default=None, dest="width_mult")
    p.add_argument("--input-hw", type=int, default=None, dest="input_hw")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--split-level", choices=("clip", "subclip"), default=None, dest="split_level")
    p.add_argument("--out", default=None, help="output directory (default runs/<arch>)")
    _add_common(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a manifest split")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files, one table row each")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    _add_common(p)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("predict", help="classify one WAV file")
    p.add_argument("wav", help="input WAV file")
    p.add_argument("--checkpoint", required=True)
    _add_common(p)
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--width-mult", type=float, default=None, dest="width_mult")
    p.add_argument("--input-hw", type=int, default=None, dest="input_hw")
    _add_common(p)
    p.set_defaults(handler=_cmd_gradcheck)

    return parser


def _effective_config(args, defaults: Dict[str, object]) -> Dict[str, object]:
    """Merge defaults, then the --config file, then explicit flags."""
    effective = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise RuntimeError("cannot read config file %s: %s" % (path, exc)) from exc
        except json.JSONDecodeError as exc:
            raise RuntimeError("malformed config file %s: %s" % (path, exc)) from exc
        if not isinstance(doc, dict):
            raise UsageError("config file %s must hold a JSON object" % path)
        for key, value in doc.items():
            if key not in defaults:
                raise UsageError("unknown config key %r in %s (known: %s)" % (key, path, ", ".join(sorted(defaults))))
            effective[key] = value
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            effective[key] = value
    return effective


def _print_config(args, effective: Dict[str, object]) -> None:
    if getattr(args, "verbose", False):
        print("config: %s" % json.dumps(effective, sort_keys=True, default=str))


def _cmd_synth(args) -> int:
    from .synth import SynthConfig, generate_dataset

    effective = _effective_config(
        args, {"seed": 0, "n_per_class": 200, "clip_len_s": 30.0, "sample_rate_hz": 44100, "out": None}
    )
    _print_config(args, effective)
    config = SynthConfig(
        n_per_class=int(effective["n_per_class"]),
        clip_len_s=float(effective["clip_len_s"]),
        sample_rate_hz=int(effective["sample_rate_hz"]),
        seed=int(effective["seed"]),
    )
    manifest = generate_dataset(config, effective["out"])
    print("wrote %d clips (%d per class) under %s" % (len(manifest.entries), config.n_per_class, effective["out"]))
    print("manifest: %s" % (Path(effective["out"]) / "manifest.json"))
    return 0


def _cmd_ingest(args) -> int:
    from .data import ingest_directory, save_manifest

    effective = _effective_config(args, {"dir": None, "out": None})
    _print_config(args, effective)
    root = Path(effective["dir"])
    manifest = ingest_directory(root)
    out = Path(effective["out"]) if effective["out"] else root / "manifest.json"
    save_manifest(manifest, out)
    counts = {label: manifest.count(label=label) for label in ("happy", "sad")}
    print("ingested %d WAVs (happy=%d sad=%d) -> %s" % (len(manifest.entries), counts["happy"], counts["sad"], out))
    return 0


def _cmd_spectrogram(args) -> int:
    from .audio import read_wav
    from .dsp import (
        SpectrogramParams,
        build_mel_filterbank,
        export_csv,
        export_png,
        log_compress,
        mel_spectrogram,
        power_spectrogram,
        stft,
    )

    effective = _effective_config(args, {"wav": None, "out": "."})
    _print_config(args, effective)
    wav = Path(effective["wav"])
    clip = read_wav(wav)
    params = SpectrogramParams()
    fb = build_mel_filterbank(params, clip.sample_rate_hz)
    mel = log_compress(mel_spectrogram(power_spectrogram(stft(clip.samples, params), params), fb))
    out_dir = Path(effective["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / (wav.stem + "_mel.csv")
    png_path = out_dir / (wav.stem + "_mel.png")
    export_csv(mel.values, csv_path)
    export_png(mel.values, png_path)
    print("mel spectrogram: %d frames x %d bands" % mel.values.shape)
    print("wrote %s and %s" % (csv_path, png_path))
    return 0


def _cmd_train(args) -> int:
    from dataclasses import replace

    import numpy as np

    from .data import load_manifest, save_manifest, split_dataset
    from .models import ArchSpec, save_checkpoint
    from .optim import AdamConfig
    from .train import TrainConfig, export_accuracy_csv, export_loss_curve, train

    effective = _effective_config(
        args,
        {
            "manifest": None,
            "arch": "resnet18",
            "width_mult": 1.0,
            "input_hw": 224,
            "epochs": 10,
            "batch": 16,
            "lr": 1e-3,
            "split_level": "clip",
            "seed": 0,
            "out": None,
        },
    )
    _print_config(args, effective)
    arch_name = _ARCH_FLAG_TO_NAME.get(str(effective["arch"]), str(effective["arch"]))
    spec = ArchSpec(arch_name, width_mult=float(effective["width_mult"]), input_hw=int(effective["input_hw"]))
    config = TrainConfig(
        arch=spec,
        optimizer=AdamConfig(lr=float(effective["lr"])),
        batch_size=int(effective["batch"]),
        epochs=int(effective["epochs"]),
        seed=int(effective["seed"]),
        split_level=str(effective["split_level"]),
    )
    manifest = load_manifest(effective["manifest"])
    if all(e.split == "unassigned" for e in manifest.entries):
        manifest = split_dataset(manifest, ratio=config.split_ratio, level=config.split_level, seed=config.seed)
    model, report = train(config, manifest)

    out_dir = Path(effective["out"]) if effective["out"] else Path("runs") / arch_name
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "checkpoint.ckpt")
    # Entry paths become absolute so the saved split stays loadable from out_dir.
    portable = replace(
        manifest,
        entries=[replace(e, path=str(manifest.resolve(e).resolve())) for e in manifest.entries],
    )
    save_manifest(portable, out_dir / "split_manifest.json")
    if report.losses:
        export_loss_curve(report, out_dir / "losses.csv", out_dir / "loss_curve.svg")
    if report.val_accuracies:
        export_accuracy_csv(report, out_dir / "accuracy.csv")
    summary = {
        "arch": arch_name,
        "width_mult": spec.width_mult,
        "input_hw": spec.input_hw,
        "iterations": len(report.losses),
        "val_accuracies": report.val_accuracies,
        "epoch_seconds": report.epoch_seconds,
        "confusion": np.asarray(report.confusion).tolist(),
    }
    (out_dir / "report.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    final_acc = report.val_accuracies[-1] if report.val_accuracies else float("nan")
    best_acc = max(report.val_accuracies) if report.val_accuracies else float("nan")
    print("trained %s for %d epochs (%d iterations)" % (arch_name, config.epochs, len(report.losses)))
    print("best val accuracy: %.4f (final epoch %.4f)" % (best_acc, final_acc))
    print("outputs in %s" % out_dir)
    return 0


def _cmd_eval(args) -> int:
    from .data import load_manifest
    from .models import load_checkpoint
    from .train import evaluate

    effective = _effective_config(args, {"manifest": None, "split": "val"})
    _print_config(args, effective)
    manifest = load_manifest(effective["manifest"])
    rows: List[str] = []
    for ckpt_path in args.checkpoints:
        model = load_checkpoint(ckpt_path)
        model.set_mode("eval")
        result = evaluate(model, manifest, split=str(effective["split"]))
        name = _DISPLAY_NAMES.get(model.spec.name, model.spec.name)
        rows.append((name, result.accuracy))
    name_w = max(len("Model"), max(len(name) for name, _ in rows))
    print("%-*s  %s" % (name_w, "Model", "Accuracy"))
    for name, acc in rows:
        print("%-*s  %.3f%%" % (name_w, name, 100.0 * acc))
    return 0


def _cmd_predict(args) -> int:
    from .audio import read_wav
    from .dsp import (
        SpectrogramParams,
        build_mel_filterbank,
        log_compress,
        mel_spectrogram,
        power_spectrogram,
        stft,
        to_model_input,
    )
    from .models import LABELS, load_checkpoint, predict

    effective = _effective_config(args, {"wav": None, "checkpoint": None})
    _print_config(args, effective)
    model = load_checkpoint(effective["checkpoint"])
    model.set_mode("eval")
    clip = read_wav(effective["wav"])
    params = SpectrogramParams()
    fb = build_mel_filterbank(params, clip.sample_rate_hz)
    mel = log_compress(mel_spectrogram(power_spectrogram(stft(clip.samples, params), params), fb))
    model_input = to_model_input(mel, out_h=model.spec.input_hw, out_w=model.spec.input_hw)
    result = predict(model, model_input)
    print("label: %s" % result.label)
    print("  ".join("p(%s)=%.6f" % (label, p) for label, p in zip(LABELS, result.probabilities)))
    print("entropy_nats=%.6f" % result.entropy_nats)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import verify_architectures, verify_ops

    effective = _effective_config(args, {"seed": 0, "trials": 2, "width_mult": 0.125, "input_hw": 64})
    _print_config(args, effective)
    tol = 1e-4
    failures = 0
    print("operation gradient checks (%d trials):" % int(effective["trials"]))
    op_errs = verify_ops(seed=int(effective["seed"]), trials=int(effective["trials"]))
    for name in sorted(op_errs):
        ok = op_errs[name] < tol
        failures += 0 if ok else 1
        print("  %-18s max rel err %.3e  %s" % (name, op_errs[name], "PASS" if ok else "FAIL"))
    print("architecture gradient checks (width %g, input %d):" % (effective["width_mult"], effective["input_hw"]))
    arch_errs = verify_architectures(
        seed=int(effective["seed"]),
        width_mult=float(effective["width_mult"]),
        input_hw=int(effective["input_hw"]),
    )
    for name in sorted(arch_errs):
        ok = arch_errs[name] < tol
        failures += 0 if ok else 1
        print("  %-18s max rel err %.3e  %s" % (name, arch_errs[name], "PASS" if ok else "FAIL"))
    if failures:
        print("%d gradient checks FAILED" % failures)
        return 2
    print("all gradient checks passed (tolerance %.0e)" % tol)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    if getattr(args, "command", None) is None:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return 1
    if getattr(args, "deterministic", False):
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
    try:
        return int(args.handler(args))
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
