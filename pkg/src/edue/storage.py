"""Dataset directories, checkpoint directories, and report files.

A dataset directory holds one tensor container per image (the image,
every structure's rater masks, the rater-variance heatmap, and the
clean reference mask) plus a manifest.json describing the whole set.
A checkpoint directory holds the weights container(s), a loss-trace
CSV, and a train_meta.json that makes it self-describing: eval needs
no flags beyond the two paths.

All writes are atomic (write to a temporary file, then rename), and
all JSON is sorted-key with a trailing newline so a rerun with the
same seed reproduces every file byte for byte.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .disagreement import EpochStats
from .container import atomic_write_text, save_container, load_container
from .model import Model, load_checkpoint, save_checkpoint
from .raters import RaterSample

__all__ = [
    "DataError",
    "atomic_write_text",
    "write_json",
    "write_csv",
    "save_dataset",
    "load_dataset",
    "save_checkpoint_dir",
    "load_checkpoint_dir",
]

DATASET_FORMAT = "edue-dataset-v1"


class DataError(ValueError):
    """Missing, inconsistent, or malformed dataset / checkpoint layout."""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path: str | os.PathLike, obj) -> None:
    """Sorted-key JSON with native scalars only; byte-stable given obj."""
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    atomic_write_text(path, text)


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str | os.PathLike, header: Sequence[str],
              rows: Sequence[Sequence]) -> None:
    """Plain comma-separated values; floats via repr for exact round trips."""
    lines = [",".join(header)]
    lines += [",".join(_cell(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# dataset directories


def _image_entries(sample: RaterSample) -> dict[str, np.ndarray]:
    entries = {"image": np.asarray(sample.image)}
    for k, name in enumerate(sample.structure_names):
        masks = np.asarray(sample.masks[k], dtype=np.float64)
        entries[f"masks/{name}"] = masks
        entries[f"heatmap/{name}"] = masks.var(axis=0)
        entries[f"true/{name}"] = np.asarray(sample.true_mask[k])
    return entries


def save_dataset(directory: str | os.PathLike, samples: Sequence[RaterSample],
                 manifest: dict) -> None:
    """One container per image plus a manifest describing the set."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = dict(manifest)
    doc["format"] = DATASET_FORMAT
    images = [dict(entry) for entry in doc.get("images", [{}] * len(samples))]
    if len(images) != len(samples):
        raise DataError(f"manifest lists {len(images)} images, "
                        f"got {len(samples)} samples")
    for i, sample in enumerate(samples):
        filename = f"img_{i:04d}.edt"
        save_container(directory / filename, _image_entries(sample))
        images[i]["file"] = filename
    doc["images"] = images
    doc["n_images"] = len(samples)
    write_json(directory / "manifest.json", doc)


def load_dataset(directory: str | os.PathLike) -> tuple[list[RaterSample], dict]:
    """Rebuild samples from a dataset directory, validating its layout."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"unrecognized dataset format "
                        f"{manifest.get('format')!r} in {manifest_path}")
    structures = tuple(manifest.get("structures", ()))
    if not structures:
        raise DataError("manifest lists no structures")
    images = manifest.get("images", [])
    if len(images) != manifest.get("n_images"):
        raise DataError("manifest n_images disagrees with its images list")
    samples = []
    for entry in images:
        path = directory / entry["file"]
        if not path.is_file():
            raise DataError(f"dataset file missing: {path}")
        tensors = load_container(path)
        if "image" not in tensors:
            raise DataError(f"{path} has no 'image' entry")
        masks, true_masks = [], []
        for name in structures:
            key = f"masks/{name}"
            if key not in tensors:
                raise DataError(f"{path} has no {key!r} entry")
            masks.append(tensors[key])
            true_masks.append(tensors[f"true/{name}"])
        samples.append(RaterSample(image=tensors["image"],
                                   masks=np.stack(masks, axis=0),
                                   true_mask=np.stack(true_masks, axis=0),
                                   delta_used=float(entry["delta_used"]),
                                   structure_names=structures))
    return samples, manifest


# ---------------------------------------------------------------------------
# checkpoint directories


def _trace_rows(member: int, trace: Sequence[EpochStats]) -> list[tuple]:
    return [(member, s.epoch, s.mean_total, s.mean_bce, s.mean_rmse)
            for s in trace]


def save_checkpoint_dir(directory: str | os.PathLike, arm: str,
                        models: Sequence[Model],
                        traces: Sequence[Sequence[EpochStats]],
                        meta: dict) -> None:
    """Weights plus loss trace plus a self-describing train_meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows: list[tuple] = []
    if arm == "de":
        for i, (model, trace) in enumerate(zip(models, traces)):
            member_dir = directory / f"member_{i}"
            member_dir.mkdir(exist_ok=True)
            save_checkpoint(member_dir, model)
            rows += _trace_rows(i, trace)
    else:
        save_checkpoint(directory, models[0])
        rows += _trace_rows(0, traces[0])
    write_csv(directory / "loss.csv",
              ["member", "epoch", "mean_total", "mean_bce", "mean_rmse"], rows)
    doc = dict(meta)
    doc["arm"] = arm
    doc["n_members"] = len(models)
    write_json(directory / "train_meta.json", doc)


def load_checkpoint_dir(directory: str | os.PathLike):
    """Returns (model-or-member-list, train_meta dict)."""
    directory = Path(directory)
    meta_path = directory / "train_meta.json"
    if not meta_path.is_file():
        raise DataError(f"no train_meta.json in {directory}; not a checkpoint "
                        f"directory")
    meta = json.loads(meta_path.read_text())
    if meta.get("arm") == "de":
        members = [load_checkpoint(directory / f"member_{i}")
                   for i in range(int(meta["n_members"]))]
        return members, meta
    return load_checkpoint(directory), meta
