"""Label maps, deformation-derived volumes and radial shell partitioning."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from convolt.grid import (
    GridFormatError,
    ScalarVolume,
    VoxelGrid,
    distance_to_boundary,
    read_buffer,
    write_buffer,
)

MM3_PER_ML = 1000.0


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer label ids per voxel, 0 is background."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 1:
            data = data.reshape(self.grid.dims, order="F")
        if data.shape != self.grid.dims:
            raise ValueError(f"label shape {data.shape} does not match grid {self.grid.dims}")
        if data.size and (not np.all(np.equal(np.mod(data, 1), 0)) or data.min() < 0):
            raise ValueError("label ids must be non-negative integers")
        data = np.array(data, dtype=np.int64)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def label_ids(self) -> list[int]:
        """Sorted non-background ids present in the map."""
        return [int(v) for v in np.unique(self.data) if v != 0]

    def mask(self, label: int) -> np.ndarray:
        return self.data == label

    def parent_mask(self) -> np.ndarray:
        return self.data > 0

    def mask_volume_of(self, label: int) -> ScalarVolume:
        return ScalarVolume(self.grid, self.mask(label).astype(np.float64))

    def check_contiguous(self) -> None:
        ids = self.label_ids()
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"label ids must form a contiguous set 1..L, got {ids}")

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")


def _require_label(labels: LabelMap, label: int) -> np.ndarray:
    m = labels.mask(label)
    if not m.any():
        raise ValueError(f"label {label} not present; available labels: {labels.label_ids()}")
    return m


def baseline_volume(J: ScalarVolume, labels: LabelMap, label: int) -> float:
    """Sum of J over the label times dV, in mL.

    The sum is correctly rounded (``math.fsum``) and taken in x-fastest order.
    """
    if J.grid != labels.grid:
        raise ValueError(f"grid mismatch: J {J.grid} vs labels {labels.grid}")
    m = _require_label(labels, label)
    vals = J.data.ravel(order="F")[m.ravel(order="F")]
    return math.fsum(vals.tolist()) * labels.grid.voxel_volume / MM3_PER_ML


def mask_volume(labels: LabelMap, label: int) -> float:
    """Voxel count of a label times dV, in mL."""
    m = _require_label(labels, label)
    return int(m.sum()) * labels.grid.voxel_volume / MM3_PER_ML


def shell_bins(distance: np.ndarray, mask: np.ndarray, n_shells: int) -> np.ndarray:
    """Equal-width bins of d/d_max, shell 1 at the boundary and shell L deepest."""
    d = distance[mask]
    dmax = d.max()
    out = np.zeros(mask.shape, dtype=np.int64)
    out[mask] = np.clip(np.ceil(n_shells * d / dmax), 1, n_shells).astype(np.int64)
    return out


def shell_partition(labels: LabelMap, label: int, n_shells: int = 5) -> LabelMap:
    """Split one label into ``n_shells`` concentric shells from boundary to interior."""
    if n_shells < 1:
        raise ValueError(f"shell count must be >= 1, got {n_shells}")
    m = labels.mask(label)
    if not m.any():
        raise ValueError(f"label {label} is empty; available labels: {labels.label_ids()}")
    d = distance_to_boundary(ScalarVolume(labels.grid, m.astype(np.float64))).data
    return LabelMap(labels.grid, shell_bins(d, m, n_shells))


def write_labels(stem: str | Path, labels: LabelMap) -> None:
    write_buffer(stem, labels.grid, labels.flat(), "u16", 1)


def read_labels(stem: str | Path) -> LabelMap:
    grid, flat, dtype, comps = read_buffer(stem)
    if dtype != "u16" or comps != 1:
        raise GridFormatError(f"{stem}: expected u16 with 1 component, got {dtype}/{comps}")
    lm = LabelMap(grid, flat.astype(np.int64))
    try:
        lm.check_contiguous()
    except ValueError as exc:
        raise GridFormatError(f"{stem}: {exc}") from exc
    return lm
