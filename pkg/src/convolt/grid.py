"""Voxel grids, displacement fields and finite-difference operators.

Arrays are held in index order ``[x, y, z]`` (and ``[x, y, z, c]`` for vector
fields); the on-disk buffers are x-fastest. Physical coordinates of voxel
``(i, j, k)`` are ``(i*dx, j*dy, k*dz)`` in mm and displacements are in mm.

All derivative operators share one stencil: central differences at interior
voxels and one-sided differences on the boundary faces, divided by spacing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_LOG_FLOOR = 1e-6

_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


class GridFormatError(ValueError):
    """Raised when a sidecar/binary pair on disk is malformed."""


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or len(self.spacing) != 3:
            raise ValueError("dims and spacing must have exactly 3 components")
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if min(dims) < 3:
            raise ValueError(f"every grid dimension must be >= 3, got {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing components must be finite and > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def voxel_volume(self) -> float:
        """Voxel volume dV in mm^3."""
        dx, dy, dz = self.spacing
        return dx * dy * dz

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def coordinates(self) -> np.ndarray:
        """Physical voxel-centre coordinates, shape ``(nx, ny, nz, 3)``."""
        axes = [np.arange(n) * s for n, s in zip(self.dims, self.spacing)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def center(self) -> np.ndarray:
        return np.array([(n - 1) * s / 2.0 for n, s in zip(self.dims, self.spacing)])

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing)}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def _first_nonfinite(a: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(~np.isfinite(a))[0])


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Per-voxel scalar on a grid (Jacobians, intensities, distance maps)."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 1:
            data = data.reshape(self.grid.dims, order="F")
        if data.shape != self.grid.dims:
            raise ValueError(f"scalar data shape {data.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"non-finite value at voxel {_first_nonfinite(data)}")
        object.__setattr__(self, "data", _readonly(data))

    def flat(self) -> np.ndarray:
        """x-fastest flat buffer."""
        return self.data.ravel(order="F")


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement vector u(x) in mm."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        nx, ny, nz = self.grid.dims
        if data.ndim == 1:
            if data.size != nx * ny * nz * 3:
                raise ValueError(f"flat buffer length {data.size} != {nx * ny * nz * 3}")
            data = data.reshape((nz, ny, nx, 3)).transpose(2, 1, 0, 3)
        if data.shape != (nx, ny, nz, 3):
            raise ValueError(f"field shape {data.shape} does not match grid {(nx, ny, nz, 3)}")
        if not np.all(np.isfinite(data)):
            i, j, k, c = _first_nonfinite(data)
            raise ValueError(f"non-finite displacement component {c} at voxel ({i}, {j}, {k})")
        object.__setattr__(self, "data", _readonly(data))

    def flat(self) -> np.ndarray:
        """x-fastest buffer with the three components interleaved per voxel."""
        return self.data.transpose(2, 1, 0, 3).ravel()

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(np.asarray(self.data, dtype=np.float64) ** 2, axis=-1))


def _gradient(vol: np.ndarray, spacing) -> list[np.ndarray]:
    return np.gradient(np.asarray(vol, dtype=np.float64), *spacing, edge_order=1)


def displacement_gradient(field: DisplacementField) -> np.ndarray:
    """Spatial gradient of u, shape ``(nx, ny, nz, 3, 3)`` with ``[..., i, j] = du_i/dx_j``."""
    sp = field.grid.spacing
    return np.stack(
        [np.stack(_gradient(field.data[..., i], sp), axis=-1) for i in range(3)], axis=-2
    )


def jacobian_from_gradient(grad: np.ndarray) -> np.ndarray:
    return np.linalg.det(grad + np.eye(3))


def divergence_from_gradient(grad: np.ndarray) -> np.ndarray:
    return grad[..., 0, 0] + grad[..., 1, 1] + grad[..., 2, 2]


def curl_magnitude_from_gradient(grad: np.ndarray) -> np.ndarray:
    cx = grad[..., 2, 1] - grad[..., 1, 2]
    cy = grad[..., 0, 2] - grad[..., 2, 0]
    cz = grad[..., 1, 0] - grad[..., 0, 1]
    return np.sqrt(cx * cx + cy * cy + cz * cz)


def jacobian_determinant(field: DisplacementField) -> ScalarVolume:
    """Per-voxel det(I + grad u)."""
    return ScalarVolume(field.grid, jacobian_from_gradient(displacement_gradient(field)))


def divergence(field: DisplacementField) -> ScalarVolume:
    return ScalarVolume(field.grid, divergence_from_gradient(displacement_gradient(field)))


def curl_magnitude(field: DisplacementField) -> ScalarVolume:
    """Euclidean norm of curl u per voxel."""
    return ScalarVolume(field.grid, curl_magnitude_from_gradient(displacement_gradient(field)))


def grad_log_jacobian_magnitude(J: ScalarVolume, floor: float = DEFAULT_LOG_FLOOR) -> ScalarVolume:
    """Per-voxel ||grad log(max(J, floor))||.

    The floor keeps the logarithm defined at folded voxels (J <= 0).
    """
    if not floor > 0:
        raise ValueError(f"floor must be > 0, got {floor}")
    logj = np.log(np.maximum(J.data, floor))
    g = _gradient(logj, J.grid.spacing)
    return ScalarVolume(J.grid, np.sqrt(g[0] ** 2 + g[1] ** 2 + g[2] ** 2))


def trilinear_sample(volume: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``volume`` at fractional index coordinates ``coords[..., 3]``.

    Coordinates outside the grid are clamped to the nearest in-bounds position.
    """
    vol = np.asarray(volume, dtype=np.float64)
    shape = vol.shape
    i0s, ts = [], []
    for ax in range(3):
        c = np.clip(coords[..., ax], 0.0, shape[ax] - 1)
        i0 = np.minimum(np.floor(c).astype(np.intp), shape[ax] - 2)
        i0s.append(i0)
        ts.append(c - i0)
    (x0, y0, z0), (tx, ty, tz) = i0s, ts
    x1, y1, z1 = x0 + 1, y0 + 1, z0 + 1
    c00 = vol[x0, y0, z0] * (1 - tx) + vol[x1, y0, z0] * tx
    c10 = vol[x0, y1, z0] * (1 - tx) + vol[x1, y1, z0] * tx
    c01 = vol[x0, y0, z1] * (1 - tx) + vol[x1, y0, z1] * tx
    c11 = vol[x0, y1, z1] * (1 - tx) + vol[x1, y1, z1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    return c0 * (1 - tz) + c1 * tz


def warp_image(moving: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """Resample ``moving`` at x + u(x) with trilinear interpolation."""
    if moving.grid != field.grid:
        raise ValueError(f"grid mismatch: image {moving.grid} vs field {field.grid}")
    grid = field.grid
    phys = grid.coordinates() + np.asarray(field.data, dtype=np.float64)
    idx = phys / np.asarray(grid.spacing)
    return ScalarVolume(grid, trilinear_sample(moving.data, idx))


def distance_to_boundary(mask: ScalarVolume) -> ScalarVolume:
    """Exact Euclidean distance (mm) from in-mask voxels to the nearest background voxel centre.

    Voxels outside the grid count as background. Out-of-mask voxels get 0.
    """
    m = np.asarray(mask.data)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be 0 or 1")
    if not m.any():
        raise ValueError("mask is empty")
    padded = np.pad(m.astype(bool), 1, constant_values=False)
    d = ndimage.distance_transform_edt(padded, sampling=mask.grid.spacing)
    return ScalarVolume(mask.grid, d[1:-1, 1:-1, 1:-1])


# --- on-disk format: JSON sidecar + raw little-endian buffer ----------------


def _paths(stem: Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def write_buffer(stem: str | Path, grid: VoxelGrid, flat: np.ndarray, dtype: str, components: int) -> None:
    meta_path, raw_path = _paths(Path(stem))
    meta = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "dtype": dtype,
        "components": components,
        "order": "x-fastest",
    }
    arr = np.asarray(flat)
    if dtype == "f32":
        if not np.all(np.isfinite(arr)):
            raise ValueError("refusing to write non-finite values")
        out = arr.astype(_DTYPES[dtype])
    else:
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
            raise ValueError("label ids out of u16 range")
        out = arr.astype(_DTYPES[dtype])
    meta_path.write_text(json.dumps(meta, indent=1))
    raw_path.write_bytes(out.tobytes())


def read_buffer(stem: str | Path) -> tuple[VoxelGrid, np.ndarray, str, int]:
    meta_path, raw_path = _paths(Path(stem))
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise GridFormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in ("dims", "spacing", "dtype", "components", "order"):
        if key not in meta:
            raise GridFormatError(f"{meta_path}: missing key {key!r}")
    if meta["order"] != "x-fastest":
        raise GridFormatError(f"{meta_path}: unsupported order {meta['order']!r}")
    if meta["dtype"] not in _DTYPES:
        raise GridFormatError(f"{meta_path}: unsupported dtype {meta['dtype']!r}")
    grid = VoxelGrid(tuple(meta["dims"]), tuple(meta["spacing"]))
    comps = int(meta["components"])
    dt = _DTYPES[meta["dtype"]]
    expected = grid.n_voxels * comps * dt.itemsize
    raw = raw_path.read_bytes()
    if len(raw) != expected:
        raise GridFormatError(
            f"{raw_path}: expected {expected} bytes, got {len(raw)} "
            f"(buffer disagrees with sidecar at byte offset {min(len(raw), expected)})"
        )
    flat = np.frombuffer(raw, dtype=dt)
    return grid, flat, meta["dtype"], comps


def write_field(stem: str | Path, field: DisplacementField) -> None:
    write_buffer(stem, field.grid, field.flat(), "f32", 3)


def read_field(stem: str | Path) -> DisplacementField:
    grid, flat, dtype, comps = read_buffer(stem)
    if dtype != "f32" or comps != 3:
        raise GridFormatError(f"{stem}: expected f32 with 3 components, got {dtype}/{comps}")
    return DisplacementField(grid, flat.astype(np.float32))


def write_scalar(stem: str | Path, vol: ScalarVolume) -> None:
    write_buffer(stem, vol.grid, vol.flat(), "f32", 1)


def read_scalar(stem: str | Path) -> ScalarVolume:
    grid, flat, dtype, comps = read_buffer(stem)
    if dtype != "f32" or comps != 1:
        raise GridFormatError(f"{stem}: expected f32 with 1 component, got {dtype}/{comps}")
    return ScalarVolume(grid, flat.astype(np.float32))
