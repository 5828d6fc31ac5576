"""Deformation-conditioned feature vectors over a region of a registration case."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from convolt.grid import (
    DEFAULT_LOG_FLOOR,
    DisplacementField,
    ScalarVolume,
    curl_magnitude_from_gradient,
    displacement_gradient,
    divergence_from_gradient,
    grad_log_jacobian_magnitude,
)
from convolt.volumetry import LabelMap

FEATURE_NAMES: tuple[str, ...] = (
    "logJ_mean", "logJ_std", "logJ_meanabs",
    "J_q10", "J_q50", "J_q90",
    "fold_frac_0p1", "fold_frac_0p01",
    "disp_mean", "disp_q90", "disp_max",
    "gradlogJ_mean", "gradlogJ_q90", "gradlogJ_max",
    "div_mean", "div_q90", "div_max",
    "curl_mean", "curl_q90", "curl_max",
    "sim_mae", "sim_mse", "sim_corr",
)
N_FEATURES = len(FEATURE_NAMES)

CSV_ID_COLUMNS = ("case_id", "label_id", "y_hat0_ml", "y_true_ml")
CSV_HEADER = CSV_ID_COLUMNS + FEATURE_NAMES

REGION_MODES = ("global", "region", "band")
BAND_SIDES = ("both", "inside", "outside")


@dataclass(frozen=True)
class RegionSpec:
    """Which voxels a feature vector summarises.

    ``global`` uses the whole parent mask (every non-background voxel),
    ``region`` the label's own voxels and ``band`` the voxels within
    ``band_radius`` (Chebyshev) of the label boundary.
    """

    mode: str
    label: int
    band_radius: int = 2
    band_side: str = "both"

    def __post_init__(self):
        if self.mode not in REGION_MODES:
            raise ValueError(f"unknown region mode {self.mode!r}; expected one of {REGION_MODES}")
        if self.band_side not in BAND_SIDES:
            raise ValueError(f"unknown band side {self.band_side!r}; expected one of {BAND_SIDES}")
        if self.mode == "band" and self.band_radius < 1:
            raise ValueError("band radius must be >= 1")

    def resolve(self, labels: LabelMap) -> np.ndarray:
        if self.mode == "global":
            m = labels.parent_mask()
        else:
            own = labels.mask(self.label)
            if not own.any():
                raise ValueError(f"label {self.label} not present; available: {labels.label_ids()}")
            if self.mode == "region":
                m = own
            else:
                st = np.ones((3, 3, 3), dtype=bool)
                r = self.band_radius
                dil = ndimage.binary_dilation(own, st, iterations=r) if self.band_side != "inside" else own
                ero = ndimage.binary_erosion(own, st, iterations=r) if self.band_side != "outside" else own
                m = dil & ~ero
        if not m.any():
            raise ValueError(f"region {self} resolves to an empty voxel set")
        return m


@dataclass(frozen=True, eq=False)
class DeformationMaps:
    """Per-voxel maps shared by every region of one case."""

    J: np.ndarray
    logJ: np.ndarray
    grad_logJ: np.ndarray
    div: np.ndarray
    curl: np.ndarray
    disp: np.ndarray
    fixed: np.ndarray
    warped: np.ndarray


def deformation_maps(
    field: DisplacementField,
    J: ScalarVolume,
    fixed: ScalarVolume,
    warped: ScalarVolume,
    log_floor: float = DEFAULT_LOG_FLOOR,
) -> DeformationMaps:
    grids = {field.grid, J.grid, fixed.grid, warped.grid}
    if len(grids) != 1:
        raise ValueError("field, J, fixed and warped must share one grid")
    grad = displacement_gradient(field)
    return DeformationMaps(
        J=np.asarray(J.data, dtype=np.float64),
        logJ=np.log(np.maximum(J.data, log_floor)),
        grad_logJ=grad_log_jacobian_magnitude(J, log_floor).data,
        div=divergence_from_gradient(grad),
        curl=curl_magnitude_from_gradient(grad),
        disp=field.magnitude(),
        fixed=np.asarray(fixed.data, dtype=np.float64),
        warped=np.asarray(warped.data, dtype=np.float64),
    )


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    # constant signals have no defined correlation; report 0
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    a = a - a.mean()
    b = b - b.mean()
    r = float(np.dot(a, b) / math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b))))
    return min(1.0, max(-1.0, r))


def summarize(maps: DeformationMaps, region: np.ndarray) -> np.ndarray:
    """The 23 summary statistics over the voxels selected by ``region``."""
    if not region.any():
        raise ValueError("empty region")
    logj = maps.logJ[region]
    j = maps.J[region]
    qs = np.quantile(j, [0.1, 0.5, 0.9])
    out = [logj.mean(), logj.std(), np.abs(logj).mean(), *qs,
           np.mean(j < 0.1), np.mean(j < 0.01)]
    for vals in (maps.disp[region], maps.grad_logJ[region], maps.div[region], maps.curl[region]):
        out += [vals.mean(), np.quantile(vals, 0.9), vals.max()]
    f, w = maps.fixed[region], maps.warped[region]
    diff = f - w
    out += [np.abs(diff).mean(), np.mean(diff * diff), _pearson(f, w)]
    return np.array(out, dtype=np.float64)


def extract_features(
    field: DisplacementField,
    J: ScalarVolume,
    labels: LabelMap,
    region: RegionSpec,
    fixed: ScalarVolume,
    warped: ScalarVolume,
    log_floor: float = DEFAULT_LOG_FLOOR,
) -> np.ndarray:
    """Feature vector (ordered as ``FEATURE_NAMES``) for one region of one case."""
    if labels.grid != field.grid:
        raise ValueError("labels and field must share one grid")
    maps = deformation_maps(field, J, fixed, warped, log_floor)
    return summarize(maps, region.resolve(labels))


@dataclass(frozen=True)
class FeatureRow:
    case_id: int
    label_id: int
    y_hat0_ml: float
    y_true_ml: float | None
    features: tuple[float, ...]


def write_feature_csv(path: str | Path, rows: Iterable[FeatureRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            y = "" if r.y_true_ml is None else repr(float(r.y_true_ml))
            w.writerow([r.case_id, r.label_id, repr(float(r.y_hat0_ml)), y,
                        *(repr(float(v)) for v in r.features)])


def read_feature_csv(path: str | Path) -> list[FeatureRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: header does not match the feature CSV contract")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
            try:
                feats = tuple(float(v) for v in rec[4:])
                y = float(rec[3]) if rec[3] != "" else None
                row = FeatureRow(int(rec[0]), int(rec[1]), float(rec[2]), y, feats)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in feats):
                raise ValueError(f"{path}:{lineno}: non-finite feature value")
            rows.append(row)
    return rows
