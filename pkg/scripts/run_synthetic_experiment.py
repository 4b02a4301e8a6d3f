#!/usr/bin/env python3
"""Run the full synthetic benchmark: generate a labeled corpus, train every
architecture at desk scale, and emit loss curves plus an accuracy table.

Usage:
    python3 scripts/run_synthetic_experiment.py --out runs/synthetic
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from melmood.data import split_dataset
from melmood.models import ARCH_NAMES, ArchSpec, save_checkpoint
from melmood.optim import AdamConfig
from melmood.synth import SynthConfig, generate_dataset
from melmood.train import TrainConfig, evaluate, export_loss_curves, train

DISPLAY = {"vgg16": "VGG16", "resnet18": "ResNet18",
           "squeezenet_v10": "SqueezeNetV1", "mobilenet_v2": "MobileNetV2"}


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/synthetic", help="output directory")
    parser.add_argument("--n-per-class", type=int, default=40)
    parser.add_argument("--clip-len", type=float, default=30.0)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--width-mult", type=float, default=0.125)
    parser.add_argument("--input-hw", type=int, default=64)
    parser.add_argument("--synth-seed", type=int, default=0)
    parser.add_argument("--split-seed", type=int, default=0)
    parser.add_argument("--train-seed", type=int, default=1)
    parser.add_argument("--arch", action="append", choices=ARCH_NAMES, default=None,
                        help="restrict to one architecture (repeatable; default all four)")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    archs = args.arch or list(ARCH_NAMES)

    print("generating corpus: %d clips per class, %.0f s each" % (args.n_per_class, args.clip_len))
    t0 = time.perf_counter()
    manifest = generate_dataset(
        SynthConfig(n_per_class=args.n_per_class, clip_len_s=args.clip_len, seed=args.synth_seed),
        out / "corpus",
    )
    manifest = split_dataset(manifest, ratio=0.85, level="clip", seed=args.split_seed)
    print("  %d clips (train=%d val=%d) in %.0fs"
          % (len(manifest.entries), manifest.count(split="train"),
             manifest.count(split="val"), time.perf_counter() - t0))

    results = {}
    for name in archs:
        config = TrainConfig(
            arch=ArchSpec(name, width_mult=args.width_mult, input_hw=args.input_hw),
            optimizer=AdamConfig(lr=args.lr),
            batch_size=args.batch,
            epochs=args.epochs,
            seed=args.train_seed,
        )
        print("training %s ..." % DISPLAY[name])
        t0 = time.perf_counter()
        model, report = train(config, manifest)
        accuracy = evaluate(model, manifest, "val").accuracy
        elapsed = time.perf_counter() - t0
        print("  val accuracy %.4f over %d iterations in %.0fs"
              % (accuracy, len(report.losses), elapsed))
        save_checkpoint(model, out / ("%s.ckpt" % name))
        results[name] = {"report": report, "accuracy": accuracy, "seconds": elapsed}
        del model

    export_loss_curves(
        {DISPLAY[name]: results[name]["report"] for name in archs},
        out / "loss_curves.csv",
        out / "loss_curves.svg",
    )
    width = max(len(DISPLAY[n]) for n in archs)
    table = ["%-*s  %s" % (width, "Model", "Accuracy")]
    table += ["%-*s  %.3f%%" % (width, DISPLAY[n], 100.0 * results[n]["accuracy"]) for n in archs]
    (out / "report.txt").write_text("\n".join(table) + "\n", encoding="utf-8")
    (out / "report.json").write_text(json.dumps(
        {n: {"accuracy": results[n]["accuracy"],
             "val_accuracies": results[n]["report"].val_accuracies,
             "seconds": results[n]["seconds"]} for n in archs},
        indent=2) + "\n", encoding="utf-8")
    print()
    print("\n".join(table))
    print()
    print("artifacts in %s" % out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
