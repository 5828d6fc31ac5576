"""Synthetic registration cases with known ground-truth volumes.

Each case has a true displacement field (affine part plus radial bumps), a
label layout in fixed space and an "estimated" field that plays the part of
a registration result: the truth plus a perturbation. The perturbation is a
contraction of the truly mapped positions about the layout centre, whose
strength is ``bias + gain_noise * xi`` with one standard normal ``xi`` per
case, plus a smooth random field for local error.
Everything is scaled by ``a = a0 * (1 + gamma * h)``, where ``h`` is the
spread of log J_true over the parent mask, so that heterogeneous deformations
come with larger volumetric errors.

Ground-truth label volumes integrate the analytic Jacobian of the true field
over each label's voxels at ``supersample**3`` points per voxel (closed form
for purely affine fields).
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy import ndimage

from convolt._parallel import ordered_map
from convolt.grid import (
    DisplacementField,
    GridFormatError,
    ScalarVolume,
    VoxelGrid,
    jacobian_determinant,
    read_field,
    read_scalar,
    write_field,
    write_scalar,
)
from convolt.volumetry import (
    MM3_PER_ML,
    LabelMap,
    baseline_volume,
    read_labels,
    shell_partition,
    write_labels,
)

FORMAT_VERSION = 1
LAYOUTS = ("ball", "shells", "blobs")
_E0 = math.exp(-4.5)  # Gaussian value at the 3-sigma cutoff
_MIN_J = 0.05
_MAX_RETRIES = 6


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_cases: int = 400
    layout: str = "ball"
    n_shells: int = 5
    n_blobs: int = 8
    radius_range: tuple[float, float] = (10.0, 16.0)
    blob_radius_range: tuple[float, float] = (3.5, 5.5)
    blob_offset: float = 7.5
    center_jitter: float = 2.0
    # true field
    scale_range: tuple[float, float] = (0.9, 1.1)
    anisotropy: float = 0.03
    n_bumps: int = 6
    bump_amplitude: float = 0.4
    bump_width_range: tuple[float, float] = (3.0, 5.0)
    # registration error model
    a0: float = 0.04
    gamma: float = 2.0
    bias: float = 1.0
    gain_noise: float = 0.0
    local_noise: float = 1.0
    smoothing: float = 4.0
    # intensities
    n_waves: int = 12
    wavelength_range: tuple[float, float] = (8.0, 16.0)
    intensity_noise: float = 0.05
    supersample: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "spacing", "radius_range", "blob_radius_range", "scale_range",
                     "bump_width_range", "wavelength_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_cases < 1:
            raise ValueError("case count must be >= 1")
        if self.supersample < 2:
            raise ValueError("supersampling factor must be >= 2")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        for name in ("a0", "gamma", "bias", "gain_noise", "local_noise", "bump_amplitude", "intensity_noise", "smoothing"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        VoxelGrid(self.dims, self.spacing)

    @property
    def grid(self) -> VoxelGrid:
        return VoxelGrid(self.dims, self.spacing)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SynthCase:
    case_id: int
    fixed: ScalarVolume
    moving: ScalarVolume
    u_true: DisplacementField
    u_est: DisplacementField
    labels: LabelMap
    volumes: dict[int, float]  # ground-truth Y per label, mL
    beta_oracle: dict[int, float]  # Y / baseline of the systematic-error-only field
    meta: dict = field(default_factory=dict)

    @property
    def perturbation(self) -> np.ndarray:
        return np.asarray(self.u_est.data, np.float64) - np.asarray(self.u_true.data, np.float64)


# --- analytic true field ----------------------------------------------------


@dataclass(frozen=True)
class _TrueField:
    A: np.ndarray  # 3x3 linear part
    center: np.ndarray
    bump_centers: np.ndarray  # (B, 3)
    bump_amps: np.ndarray  # (B,)
    bump_sigmas: np.ndarray  # (B,)

    def displacement(self, x: np.ndarray) -> np.ndarray:
        u = (x - self.center) @ (self.A - np.eye(3)).T
        for c, a, s in zip(self.bump_centers, self.bump_amps, self.bump_sigmas):
            d = x - c
            r2 = np.sum(d * d, axis=-1)
            inside = r2 < 9.0 * s * s
            phi = np.where(inside, (np.exp(-r2 / (2 * s * s)) - _E0) / (1 - _E0), 0.0)
            u = u + a * d * phi[..., None]
        return u

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """det(I + grad u) evaluated analytically at points ``x[..., 3]``."""
        shape = x.shape[:-1]
        x = x.reshape(-1, 3)
        # bump terms a * (phi I + psi d d^T) are symmetric: keep six components
        S = np.zeros((6, len(x)))
        for c, a, s in zip(self.bump_centers, self.bump_amps, self.bump_sigmas):
            if a == 0:
                continue
            d = x - c
            r2 = np.einsum("ij,ij->i", d, d)
            idx = np.flatnonzero(r2 < 9.0 * s * s)
            if idx.size == 0:
                continue
            di = d[idx]
            g = np.exp(-r2[idx] / (2 * s * s))
            phi = a * (g - _E0) / (1 - _E0)
            psi = -a * g / (s * s * (1 - _E0))  # a * phi'(r) / r
            S[0, idx] += phi + psi * di[:, 0] * di[:, 0]
            S[1, idx] += phi + psi * di[:, 1] * di[:, 1]
            S[2, idx] += phi + psi * di[:, 2] * di[:, 2]
            S[3, idx] += psi * di[:, 0] * di[:, 1]
            S[4, idx] += psi * di[:, 0] * di[:, 2]
            S[5, idx] += psi * di[:, 1] * di[:, 2]
        A = self.A
        sym = ((0, 3, 4), (3, 1, 5), (4, 5, 2))
        G = np.empty((len(x), 3, 3))
        for i in range(3):
            for j in range(3):
                G[:, i, j] = A[i, j] + S[sym[i][j]]
        return _det3(G).reshape(shape)

    def bump_support(self, x: np.ndarray, pad: float = 0.0) -> np.ndarray:
        """Points within ``pad`` of some bump's support; J equals det(A) elsewhere."""
        out = np.zeros(x.shape[:-1], dtype=bool)
        for c, a, s in zip(self.bump_centers, self.bump_amps, self.bump_sigmas):
            if a != 0:
                out |= np.sum((x - c) ** 2, axis=-1) < (3.0 * s + pad) ** 2
        return out

    @property
    def affine_only(self) -> bool:
        return not np.any(self.bump_amps)


def _det3(G: np.ndarray) -> np.ndarray:
    return (G[..., 0, 0] * (G[..., 1, 1] * G[..., 2, 2] - G[..., 1, 2] * G[..., 2, 1])
            - G[..., 0, 1] * (G[..., 1, 0] * G[..., 2, 2] - G[..., 1, 2] * G[..., 2, 0])
            + G[..., 0, 2] * (G[..., 1, 0] * G[..., 2, 1] - G[..., 1, 1] * G[..., 2, 0]))


def _texture(rng: np.random.Generator, cfg: SynthConfig):
    k = rng.normal(size=(cfg.n_waves, 3))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    k *= (2 * np.pi / rng.uniform(*cfg.wavelength_range, size=cfg.n_waves))[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=cfg.n_waves)
    norm = math.sqrt(2.0 / cfg.n_waves)

    def f(x: np.ndarray) -> np.ndarray:
        return norm * np.cos(x @ k.T + phase).sum(axis=-1)

    return f


def _layout(rng: np.random.Generator, cfg: SynthConfig, grid: VoxelGrid, x: np.ndarray):
    """Label ids in fixed space, plus the layout centre."""
    c = grid.center() + rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=3)
    labels = np.zeros(grid.dims, dtype=np.int64)
    if cfg.layout in ("ball", "shells"):
        r = rng.uniform(*cfg.radius_range)
        labels[np.sum((x - c) ** 2, axis=-1) <= r * r] = 1
    else:
        dirs = _blob_directions(cfg.n_blobs)
        radii = rng.uniform(*cfg.blob_radius_range, size=cfg.n_blobs)
        for m, (v, r) in enumerate(zip(dirs, radii), start=1):
            bc = c + cfg.blob_offset * v
            labels[np.sum((x - bc) ** 2, axis=-1) <= r * r] = m
    return labels, c


def _blob_directions(m: int) -> np.ndarray:
    if m <= 8:
        corners = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], float)
        return corners[:m]
    # Fibonacci sphere, scaled to the cube-corner radius
    i = np.arange(m) + 0.5
    phi = np.arccos(1 - 2 * i / m)
    theta = np.pi * (1 + 5 ** 0.5) * i
    pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return pts * math.sqrt(3.0)


def _supersample_offsets(grid: VoxelGrid, K: int) -> np.ndarray:
    t = (np.arange(K) + 0.5) / K - 0.5
    o = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)
    return o * np.asarray(grid.spacing)


def integrate_jacobian(tf: _TrueField, grid: VoxelGrid, x: np.ndarray, mask: np.ndarray, K: int,
                       chunk: int = 200_000) -> float:
    """Integral of the analytic J over the union of the mask's voxels, in mL."""
    centers = x[mask]
    det_a = float(np.linalg.det(tf.A))
    if tf.affine_only:
        return det_a * len(centers) * grid.voxel_volume / MM3_PER_ML
    # voxels whose cube misses every bump support integrate to det(A) exactly
    near = tf.bump_support(centers, pad=0.5 * math.sqrt(3.0) * max(grid.spacing))
    centers = centers[near]
    offs = _supersample_offsets(grid, K)
    per_chunk = max(1, chunk // len(offs))
    total = det_a * len(offs) * float(np.count_nonzero(~near))
    parts = [total]
    for s in range(0, len(centers), per_chunk):
        pts = (centers[s:s + per_chunk, None, :] + offs[None, :, :]).reshape(-1, 3)
        parts.append(math.fsum(tf.jacobian(pts).tolist()))
    return math.fsum(parts) * grid.voxel_volume / len(offs) / MM3_PER_ML


def _smooth_noise_field(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    out = np.empty(cfg.dims + (3,))
    for i in range(3):
        f = ndimage.gaussian_filter(rng.normal(size=cfg.dims), cfg.smoothing, mode="wrap")
        out[..., i] = f / f.std()
    return out


def _contraction_field(x: np.ndarray, mapped: np.ndarray, center: np.ndarray, radius: float,
                       taper: float = 4.0) -> np.ndarray:
    """-(mapped - c)/3 within ``radius`` of c in fixed space, cosine-tapered to 0 beyond it.

    Acting on the mapped positions keeps the volume effect inside the core a
    constant factor of the true Jacobian, whatever the case geometry.
    """
    r = np.sqrt(np.sum((x - center) ** 2, axis=-1))
    t = np.clip((r - radius) / taper, 0.0, 1.0)
    w = 0.5 * (1 + np.cos(np.pi * t))
    return -(mapped - center) / 3.0 * w[..., None]


def case_rng(seed: int, case_index: int) -> np.random.Generator:
    """Independent stream per case, so generation order does not matter."""
    return np.random.default_rng(np.random.SeedSequence([seed, case_index]))


def generate_case(config: SynthConfig, case_index: int) -> SynthCase:
    cfg = config
    rng = case_rng(cfg.seed, case_index)
    grid = cfg.grid
    x = grid.coordinates()
    labels, center = _layout(rng, cfg, grid, x)
    parent = labels > 0

    # true field: anisotropic scaling about the layout centre plus radial bumps
    s = rng.uniform(*cfg.scale_range)
    A = np.diag(s * (1 + rng.uniform(-cfg.anisotropy, cfg.anisotropy, size=3)))
    eta = rng.uniform()
    in_mask = x[parent]
    bump_centers = in_mask[rng.integers(0, len(in_mask), size=cfg.n_bumps)] + rng.normal(scale=1.0, size=(cfg.n_bumps, 3))
    amps = eta * cfg.bump_amplitude * rng.uniform(-1, 1, size=cfg.n_bumps)
    sigmas = rng.uniform(*cfg.bump_width_range, size=cfg.n_bumps)

    offs = _supersample_offsets(grid, cfg.supersample)
    probe = (in_mask[:, None, :] + offs[None, ::7, :]).reshape(-1, 3)
    for retry in range(_MAX_RETRIES + 1):
        tf = _TrueField(A, center, bump_centers, amps, sigmas)
        J_vox = tf.jacobian(x)
        if J_vox.min() > _MIN_J and tf.jacobian(probe).min() > _MIN_J:
            break
        amps = amps * 0.5
    else:
        raise ValueError(f"case {case_index}: true field folds even after {_MAX_RETRIES} damping retries")

    label_ids = [int(v) for v in np.unique(labels) if v != 0]
    if cfg.layout == "shells":
        labels = shell_partition(LabelMap(grid, parent.astype(np.int64)), 1, cfg.n_shells).data
        label_ids = [int(v) for v in np.unique(labels) if v != 0]
        if label_ids != list(range(1, cfg.n_shells + 1)):
            raise ValueError(f"case {case_index}: ball too thin for {cfg.n_shells} shells; "
                             f"increase radius_range or lower n_shells")
    h = float(np.log(J_vox[parent]).std())
    amplitude = cfg.a0 * (1.0 + cfg.gamma * h)

    volumes = {l: integrate_jacobian(tf, grid, x, labels == l, cfg.supersample) for l in label_ids}

    # registration error: contraction with random gain + smooth local field
    extent = float(np.sqrt(np.sum((in_mask - center) ** 2, axis=-1)).max()) + 2.0
    u_true64 = tf.displacement(x)
    contraction = _contraction_field(x, x + u_true64, center, extent)
    xi = float(rng.normal())
    sys_field = amplitude * (cfg.bias + cfg.gain_noise * xi) * contraction
    rand_field = amplitude * cfg.local_noise * _smooth_noise_field(rng, cfg) if cfg.local_noise > 0 else 0.0
    u_true = DisplacementField(grid, u_true64.astype(np.float32))
    u_est = DisplacementField(grid, (u_true64 + sys_field + rand_field).astype(np.float32))

    lm = LabelMap(grid, labels)
    J_sys = jacobian_determinant(DisplacementField(grid, u_true64 + sys_field))
    beta_oracle = {l: volumes[l] / baseline_volume(J_sys, lm, l) for l in label_ids}

    tex = _texture(rng, cfg)
    fixed = tex(x)
    moving = tex(x - u_true64) + cfg.intensity_noise * rng.normal(size=grid.dims)

    meta = {
        "family": "affine" if tf.affine_only else "affine+bumps",
        "seed": cfg.seed,
        "case_index": case_index,
        "layout": cfg.layout,
        "heterogeneity": h,
        "amplitude": amplitude,
        "gain_draw": xi,
        "eta": float(eta),
        "scale": float(s),
        "damping_retries": retry,
    }
    return SynthCase(case_index, ScalarVolume(grid, fixed.astype(np.float32)),
                     ScalarVolume(grid, moving.astype(np.float32)), u_true, u_est, lm,
                     volumes, beta_oracle, meta)


def generate_cases(config: SynthConfig, jobs: int = 1) -> Iterator[SynthCase]:
    """Cases in index order; ``jobs`` > 1 generates them on worker processes."""
    return ordered_map(partial(generate_case, config), range(config.n_cases), jobs)


# --- dataset directory ------------------------------------------------------


class DatasetError(ValueError):
    pass


def _case_dir(case_id: int) -> str:
    return f"case_{case_id:04d}"


def write_dataset(cases: Iterable[SynthCase], directory: str | Path, config: SynthConfig | None = None) -> Path:
    """Write cases as grid binaries plus ``manifest.json`` and ``cases.csv``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries, rows = [], []
    for case in cases:
        cdir = root / _case_dir(case.case_id)
        cdir.mkdir(exist_ok=True)
        write_scalar(cdir / "fixed", case.fixed)
        write_scalar(cdir / "moving", case.moving)
        write_field(cdir / "u_true", case.u_true)
        write_field(cdir / "u_est", case.u_est)
        write_labels(cdir / "labels", case.labels)
        entries.append({"case_id": case.case_id, "dir": cdir.name, "meta": case.meta})
        for l in sorted(case.volumes):
            rows.append((case.case_id, l, case.volumes[l], case.beta_oracle[l]))
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": None if config is None else config.to_json(),
        "cases": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    with open(root / "cases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "label_id", "y_true_ml", "beta_oracle"])
        for cid, l, y, b in rows:
            w.writerow([cid, l, repr(float(y)), repr(float(b))])
    return root


def read_manifest(directory: str | Path) -> dict:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{root}: no manifest.json (not a dataset directory)")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: format version {manifest.get('format_version')!r} != {FORMAT_VERSION}")
    return manifest


def _read_targets(root: Path) -> dict[int, dict[int, tuple[float, float]]]:
    path = root / "cases.csv"
    if not path.exists():
        raise DatasetError(f"{root}: missing cases.csv")
    out: dict[int, dict[int, tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                out.setdefault(int(row["case_id"]), {})[int(row["label_id"])] = (
                    float(row["y_true_ml"]), float(row["beta_oracle"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed row ({exc})") from exc
    return out


def iter_dataset(directory: str | Path) -> Iterator[SynthCase]:
    """Lazily read cases in manifest order."""
    root = Path(directory)
    manifest = read_manifest(root)
    targets = _read_targets(root)
    for entry in manifest["cases"]:
        cid = int(entry["case_id"])
        cdir = root / entry["dir"]
        try:
            fixed = read_scalar(cdir / "fixed")
            moving = read_scalar(cdir / "moving")
            u_true = read_field(cdir / "u_true")
            u_est = read_field(cdir / "u_est")
            labels = read_labels(cdir / "labels")
        except FileNotFoundError as exc:
            raise DatasetError(f"{cdir}: missing file {exc.filename}") from exc
        except GridFormatError as exc:
            raise DatasetError(str(exc)) from exc
        t = targets.get(cid)
        if t is None or sorted(t) != labels.label_ids():
            raise DatasetError(f"{root / 'cases.csv'}: labels for case {cid} do not match {cdir.name}/labels")
        yield SynthCase(cid, fixed, moving, u_true, u_est, labels,
                        {l: v[0] for l, v in t.items()}, {l: v[1] for l, v in t.items()}, entry["meta"])


def read_dataset(directory: str | Path) -> tuple[SynthConfig | None, list[SynthCase]]:
    manifest = read_manifest(directory)
    cfg = manifest.get("config")
    cases = list(iter_dataset(directory))
    if not cases:
        raise DatasetError(f"{directory}: dataset has no cases")
    return (None if cfg is None else SynthConfig.from_json(cfg)), cases


def dataset_checksums(directory: str | Path) -> dict[str, str]:
    root = Path(directory)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def single_driver_targets(X: np.ndarray, y_hat0: np.ndarray, feature_index: int, strength: float = 0.05,
                          noise: float = 0.005, seed: int = 0) -> np.ndarray:
    """Targets whose ratio to the baseline depends on one feature column only.

    ``y = y_hat0 * (1 + strength * z + noise * eps)`` with ``z`` the
    standardised driver column; used to check that coefficient rankings pick
    out the driver.
    """
    col = np.asarray(X, float)[:, feature_index]
    sd = col.std()
    z = (col - col.mean()) / (sd if sd > 0 else 1.0)
    eps = np.random.default_rng(seed).normal(size=len(col))
    return np.asarray(y_hat0, float) * (1.0 + strength * z + noise * eps)
