"""On-disk slice corpora and NIfTI ingestion.

Layout of a corpus directory::

    <root>/manifest.json
    <root>/images/<id>.npy   float32, values in [0, 1]
    <root>/masks/<id>.npy    uint8, values in {0, 1}

The manifest lists ``id``, ``shape``, ``has_tumor`` and ``partition`` per slice.
Preprocessed CT and synthetic corpora share this layout.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetState, LabeledSample, Slice, as_mask
from .errors import ValidationError

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PARTITIONS = ("labeled", "unlabeled", "validation", "test")


def write_corpus(root, samples: Sequence[tuple[Slice, np.ndarray]], partition: dict[str, str],
                 meta: dict | None = None) -> dict:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s, m in samples:
        np.save(root / "images" / f"{s.id}.npy", np.asarray(s.image, dtype=np.float32))
        np.save(root / "masks" / f"{s.id}.npy", as_mask(m, s.shape))
        entries.append({"id": s.id, "shape": list(s.shape), "has_tumor": bool(s.has_tumor),
                        "partition": partition.get(s.id)})
    counts = {p: sum(e["partition"] == p for e in entries) for p in PARTITIONS}
    manifest = {"meta": meta or {}, "counts": counts, "slices": entries}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise ValidationError(f"no {MANIFEST} in {root}")
    return json.loads(path.read_text())


def read_corpus(root) -> tuple[list[tuple[Slice, np.ndarray]], dict]:
    root = Path(root)
    manifest = read_manifest(root)
    samples = []
    for e in manifest["slices"]:
        image = np.load(root / "images" / f"{e['id']}.npy")
        mask = as_mask(np.load(root / "masks" / f"{e['id']}.npy"), image.shape)
        samples.append((Slice(e["id"], image, bool(mask.any())), mask))
    return samples, manifest


def state_from_corpus(samples: Sequence[tuple[Slice, np.ndarray]], manifest: dict) -> DatasetState:
    """Rebuild the initial partition recorded in a manifest."""
    part = {e["id"]: e["partition"] for e in manifest["slices"]}
    groups: dict[str, list] = {p: [] for p in PARTITIONS}
    for s, m in samples:
        p = part.get(s.id)
        if p is None:
            continue
        if p not in groups:
            raise ValidationError(f"unknown partition {p!r} for slice {s.id}")
        groups[p].append(s if p == "unlabeled" else LabeledSample(s, m))
    state = DatasetState(groups["labeled"], groups["unlabeled"], groups["validation"], groups["test"])
    state.check()
    return state


def _stem(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def find_nifti_pairs(root) -> list[tuple[str, Path, Path]]:
    """Pair ``{root}/images/*.nii[.gz]`` with ``{root}/labels/*`` by filename stem."""
    root = Path(root)
    img_dir, lab_dir = root / "images", root / "labels"
    for d in (img_dir, lab_dir):
        if not d.is_dir():
            raise ValidationError(f"missing directory {d}")
    images = {_stem(p): p for p in sorted(img_dir.glob("*.nii*"))}
    labels = {_stem(p): p for p in sorted(lab_dir.glob("*.nii*"))}
    missing = sorted(set(images) ^ set(labels))
    if missing:
        raise ValidationError(f"unpaired volumes: {missing}")
    if not images:
        raise ValidationError(f"no NIfTI volumes under {img_dir}")
    return [(k, images[k], labels[k]) for k in sorted(images)]


def load_nifti(path) -> np.ndarray:
    """Load a NIfTI volume as ``(Z, H, W)``; NIfTI stores the axial axis last."""
    import nibabel as nib

    data = np.asarray(nib.load(str(path)).dataobj)
    if data.ndim != 3:
        raise ValidationError(f"{path}: expected a 3D volume, got shape {data.shape}")
    return np.moveaxis(data, -1, 0)
