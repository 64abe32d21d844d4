"""Dataset manifests: image ids paired with fully annotated oracle label grids.

Manifest file format: a JSON object with `class_count` (int) and `images`
(list of {"id": str, "labels": path}), label paths relative to the manifest
file. Each referenced grid is a PGM whose pixel values are class ids.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from .errors import FormatError, ValidationError
from .grid import LabelGrid
from .pgm import read_pgm, write_pgm


@dataclass(frozen=True)
class OracleRecord:
    """One image's identity plus its all-classes-annotated label grid."""

    image_id: str
    oracle_labels: LabelGrid
    oracle_classes: frozenset[int]

    @classmethod
    def from_grid(cls, image_id: str, grid: LabelGrid) -> "OracleRecord":
        classes = frozenset(grid.foreground_classes())
        if not classes:
            raise ValidationError(f"image {image_id!r} has no foreground pixels")
        return cls(image_id=image_id, oracle_labels=grid, oracle_classes=classes)

    def __post_init__(self) -> None:
        derived = frozenset(self.oracle_labels.foreground_classes())
        if not derived:
            raise ValidationError(f"image {self.image_id!r} has no foreground pixels")
        if derived != self.oracle_classes:
            raise ValidationError(
                f"image {self.image_id!r}: declared classes {sorted(self.oracle_classes)} "
                f"do not match grid contents {sorted(derived)}"
            )


@dataclass(frozen=True)
class DatasetManifest:
    class_count: int
    records: tuple[OracleRecord, ...]

    def __post_init__(self) -> None:
        if self.class_count < 1:
            raise ValidationError("class count must be >= 1")
        seen: set[str] = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise ValidationError(f"duplicate image id {rec.image_id!r}")
            seen.add(rec.image_id)
            bad = [c for c in rec.oracle_classes if c > self.class_count]
            if bad:
                raise ValidationError(
                    f"image {rec.image_id!r} uses undeclared class ids {sorted(bad)} "
                    f"(class count is {self.class_count})"
                )

    @cached_property
    def by_id(self) -> dict[str, OracleRecord]:
        return {rec.image_id: rec for rec in self.records}

    def record(self, image_id: str) -> OracleRecord:
        try:
            return self.by_id[image_id]
        except KeyError:
            raise ValidationError(f"unknown image id {image_id!r}") from None

    def __len__(self) -> int:
        return len(self.records)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc})") from exc
    if not isinstance(doc, dict) or "class_count" not in doc or "images" not in doc:
        raise FormatError(f"{path}: manifest must be an object with class_count and images")
    if not isinstance(doc["class_count"], int) or isinstance(doc["class_count"], bool):
        raise FormatError(f"{path}: class_count must be an integer")
    if not isinstance(doc["images"], list):
        raise FormatError(f"{path}: images must be a list")

    records = []
    for entry in doc["images"]:
        if not isinstance(entry, dict) or "id" not in entry or "labels" not in entry:
            raise FormatError(f"{path}: each image entry needs id and labels fields")
        grid = read_pgm(path.parent / entry["labels"])
        records.append(OracleRecord.from_grid(str(entry["id"]), grid))
    return DatasetManifest(class_count=doc["class_count"], records=tuple(records))


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    """Write the manifest JSON plus one P5 grid per record next to it."""
    path = Path(path)
    grids_dir = path.parent / f"{path.stem}_grids"
    grids_dir.mkdir(parents=True, exist_ok=True)
    images = []
    for i, rec in enumerate(manifest.records):
        rel = f"{path.stem}_grids/{i:05d}.pgm"
        write_pgm(rec.oracle_labels, path.parent / rel)
        images.append({"id": rec.image_id, "labels": rel})
    doc = {"class_count": manifest.class_count, "images": images}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
