"""Label grids and per-task relabeling.

A label grid stores one class id per pixel in row-major order (origin
top-left). Class id 0 is the background class, 255 is the ignore index;
ignored pixels are excluded from every loss and metric in this package.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ValidationError

BACKGROUND = 0
IGNORE = 255


def is_foreground(class_id: int) -> bool:
    return class_id != BACKGROUND and class_id != IGNORE


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Immutable per-pixel class-id grid of shape height x width."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        arr = np.ascontiguousarray(self.data, dtype=np.uint8).reshape(-1)
        if arr.size != self.width * self.height:
            raise ValidationError(
                f"grid data length {arr.size} does not match {self.width}x{self.height}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "LabelGrid":
        rows = np.asarray(rows)
        if rows.ndim != 2:
            raise ValidationError("expected a 2-D array of class ids")
        return cls(width=rows.shape[1], height=rows.shape[0], data=rows.reshape(-1))

    def as_rows(self) -> np.ndarray:
        return self.data.reshape(self.height, self.width)

    def foreground_classes(self) -> set[int]:
        """Distinct class ids present, excluding background and ignore."""
        values = np.unique(self.data)
        return {int(v) for v in values if is_foreground(int(v))}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelGrid):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and bool(np.array_equal(self.data, other.data))
        )

    def __repr__(self) -> str:  # pragma: no cover
        return f"LabelGrid({self.width}x{self.height})"


def relabel(oracle: LabelGrid, classes: Iterable[int]) -> LabelGrid:
    """Keep pixels of the given classes, preserve ignore, send the rest to background.

    Total on valid grids: any pixel value outside ``classes`` and the ignore
    index becomes background, so applying the same class set twice is a no-op.
    """
    keep = sorted(set(int(c) for c in classes))
    for c in keep:
        if not is_foreground(c):
            raise ValidationError(f"cannot relabel onto reserved class id {c}")
    mask = np.isin(oracle.data, np.asarray(keep, dtype=np.uint8)) if keep else np.zeros(
        oracle.n_pixels, dtype=bool
    )
    mask |= oracle.data == IGNORE
    out = np.where(mask, oracle.data, np.uint8(BACKGROUND))
    return LabelGrid(width=oracle.width, height=oracle.height, data=out)
