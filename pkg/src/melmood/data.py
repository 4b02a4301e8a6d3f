"""Dataset manifests: labeled WAV inventories, splits, and directory ingestion.

A manifest is a list of entries {path, label, source_id, split} plus metadata.
Splits are stratified by label; at clip level a source_id's entries always
land on one side, so a parent recording never leaks across train/val.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .audio import decode_wav
from .models import LABELS

SPLITS = ("train", "val", "unassigned")


@dataclass
class ManifestEntry:
    path: str
    label: str
    source_id: str
    split: str = "unassigned"

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError("label must be one of %r, got %r" % (LABELS, self.label))
        if self.split not in SPLITS:
            raise ValueError("split must be one of %r, got %r" % (SPLITS, self.split))


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    metadata: Dict[str, object] = field(default_factory=dict)
    base_dir: Optional[Path] = None

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p

    def count(self, **fields) -> int:
        return sum(1 for e in self.entries if all(getattr(e, k) == v for k, v in fields.items()))


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "entries": [
            {"path": e.path, "label": e.label, "source_id": e.source_id, "split": e.split}
            for e in manifest.entries
        ],
        "metadata": manifest.metadata,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    """Read a manifest: an {entries, metadata} object or a bare entry array."""
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError("malformed manifest %s: %s" % (p, exc)) from exc
    if isinstance(doc, list):
        records, metadata = doc, {}
    elif isinstance(doc, dict) and "entries" in doc:
        records, metadata = doc["entries"], dict(doc.get("metadata", {}))
    else:
        raise ValueError("manifest %s must be an entry array or an object with 'entries'" % p)
    entries = [
        ManifestEntry(
            path=r["path"],
            label=r["label"],
            source_id=r.get("source_id", Path(r["path"]).stem),
            split=r.get("split", "unassigned"),
        )
        for r in records
    ]
    return DatasetManifest(entries=entries, metadata=metadata, base_dir=p.parent)


def ingest_directory(root, sample_rate_hint: bool = True) -> DatasetManifest:
    """Build a manifest from root/happy/*.wav and root/sad/*.wav."""
    root = Path(root)
    entries: List[ManifestEntry] = []
    for label in LABELS:
        for wav in sorted((root / label).glob("*.wav")):
            entries.append(
                ManifestEntry(path="%s/%s" % (label, wav.name), label=label, source_id=wav.stem)
            )
    if not entries:
        raise ValueError("no labeled WAV files found under %s (expected happy/ and sad/ subdirectories)" % root)
    metadata: Dict[str, object] = {"created_by": "melmood-ingest", "seed": None, "sample_rate": None}
    if sample_rate_hint:
        first = root / entries[0].path
        metadata["sample_rate"] = decode_wav(first.read_bytes()).sample_rate_hz
    return DatasetManifest(entries=entries, metadata=metadata, base_dir=root)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    manifest: DatasetManifest,
    ratio: float = 0.85,
    level: str = "clip",
    seed: int = 0,
) -> DatasetManifest:
    """Assign train/val splits, stratified by label.

    Sub-clip level shuffles entries freely; clip level keeps each source_id's
    entries together and cuts the shuffled group order where the running count
    comes closest to the per-label target.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("split ratio must be in (0, 1), got %r" % (ratio,))
    if level not in ("clip", "subclip"):
        raise ValueError("split level must be 'clip' or 'subclip', got %r" % (level,))
    if any(e.split != "unassigned" for e in manifest.entries):
        raise ValueError("split_dataset requires all entries unassigned")
    for label in LABELS:
        if not any(e.label == label for e in manifest.entries):
            raise ValueError("label class %r is empty" % label)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    assignment: Dict[int, str] = {}
    for label in LABELS:
        idx = [i for i, e in enumerate(manifest.entries) if e.label == label]
        if level == "subclip":
            order = [idx[j] for j in rng.permutation(len(idx))]
            n_train = _round_half_up(ratio * len(order))
            for pos, i in enumerate(order):
                assignment[i] = "train" if pos < n_train else "val"
        else:
            groups: Dict[str, List[int]] = {}
            for i in idx:
                groups.setdefault(manifest.entries[i].source_id, []).append(i)
            sids = list(groups)
            order = [sids[j] for j in rng.permutation(len(sids))]
            target = ratio * len(idx)
            best_cut, best_err = 0, abs(target)
            running = 0
            for k, sid in enumerate(order, start=1):
                running += len(groups[sid])
                err = abs(running - target)
                if err < best_err:
                    best_cut, best_err = k, err
            for k, sid in enumerate(order):
                side = "train" if k < best_cut else "val"
                for i in groups[sid]:
                    assignment[i] = side

    out = replace(
        manifest,
        entries=[replace(e, split=assignment[i]) for i, e in enumerate(manifest.entries)],
    )
    if level == "clip":
        train_frac = out.count(split="train") / len(out.entries)
        if abs(train_frac - ratio) > 0.05:
            raise ValueError(
                "clip-level split impossible: achievable train fraction %.3f deviates more than "
                "0.05 from ratio %.3f (too few source groups)" % (train_frac, ratio)
            )
    return out
