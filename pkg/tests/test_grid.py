import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convolt.grid import (
    DisplacementField,
    GridFormatError,
    ScalarVolume,
    VoxelGrid,
    curl_magnitude,
    distance_to_boundary,
    divergence,
    grad_log_jacobian_magnitude,
    jacobian_determinant,
    read_field,
    read_scalar,
    trilinear_sample,
    warp_image,
    write_field,
    write_scalar,
)


def affine_field(grid, A, b=(0.0, 0.0, 0.0)):
    x = grid.coordinates()
    return DisplacementField(grid, x @ (np.asarray(A) - np.eye(3)).T + np.asarray(b))


# --- independent oracles -------------------------------------------------------


def fd_derivative(f, i, j, k, axis, h):
    """Central difference inside, one-sided first order at the two ends of the axis."""
    n = f.shape[axis]
    idx = [i, j, k]
    p = idx[axis]

    def at(q):
        t = list(idx)
        t[axis] = q
        return f[tuple(t)]

    if p == 0:
        return (at(1) - at(0)) / h
    if p == n - 1:
        return (at(n - 1) - at(n - 2)) / h
    return (at(p + 1) - at(p - 1)) / (2 * h)


def det3_cofactor(M):
    return (M[0][0] * (M[1][1] * M[2][2] - M[1][2] * M[2][1])
            - M[0][1] * (M[1][0] * M[2][2] - M[1][2] * M[2][0])
            + M[0][2] * (M[1][0] * M[2][1] - M[1][1] * M[2][0]))


def oracle_gradient(u, spacing, i, j, k):
    return [[fd_derivative(u[..., c], i, j, k, ax, spacing[ax]) for ax in range(3)] for c in range(3)]


def brute_force_edt(mask, spacing):
    """Distance from every in-mask voxel to the nearest background voxel, grid exterior included."""
    padded = np.pad(mask, 1, constant_values=False)
    bg = np.argwhere(~padded).astype(float) - 1.0
    out = np.zeros(mask.shape)
    sp = np.asarray(spacing)
    for idx in np.argwhere(mask):
        out[tuple(idx)] = np.sqrt((((bg - idx) * sp) ** 2).sum(axis=1)).min()
    return out


# --- grid and containers -------------------------------------------------------


class TestVoxelGrid:
    def test_rejects_small_dims(self):
        with pytest.raises(ValueError, match=">= 3"):
            VoxelGrid((2, 4, 4))

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            VoxelGrid((4, 4, 4), (1.0, 0.0, 1.0))

    def test_voxel_volume_and_center(self):
        g = VoxelGrid((5, 7, 9), (0.5, 1.0, 2.0))
        assert g.voxel_volume == 1.0
        assert g.n_voxels == 315
        np.testing.assert_allclose(g.center(), [1.0, 3.0, 8.0])
        assert g.coordinates()[4, 6, 8].tolist() == [2.0, 6.0, 16.0]


class TestContainers:
    def test_scalar_flat_buffer_is_x_fastest(self):
        g = VoxelGrid((3, 4, 5))
        flat = np.arange(60.0)
        v = ScalarVolume(g, flat)
        # voxel (i, j, k) sits at i + nx*j + nx*ny*k
        assert v.data[2, 1, 3] == 2 + 3 * 1 + 12 * 3
        np.testing.assert_array_equal(v.flat(), flat)

    def test_field_flat_buffer_interleaves_components(self):
        g = VoxelGrid((3, 4, 5))
        flat = np.arange(180.0)
        f = DisplacementField(g, flat)
        base = 3 * (1 + 3 * 2 + 12 * 4)
        assert f.data[1, 2, 4].tolist() == [base, base + 1, base + 2]
        np.testing.assert_array_equal(f.flat(), flat)

    def test_non_finite_scalar_reports_voxel(self):
        data = np.zeros((3, 3, 3))
        data[1, 2, 0] = np.nan
        with pytest.raises(ValueError, match=r"\(1, 2, 0\)"):
            ScalarVolume(VoxelGrid((3, 3, 3)), data)

    def test_non_finite_field_reports_component_and_voxel(self):
        data = np.zeros((3, 3, 3, 3))
        data[0, 1, 2, 1] = np.inf
        with pytest.raises(ValueError, match=r"component 1 at voxel \(0, 1, 2\)"):
            DisplacementField(VoxelGrid((3, 3, 3)), data)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            DisplacementField(VoxelGrid((3, 3, 3)), np.zeros((3, 3, 4, 3)))

    def test_data_is_read_only(self):
        v = ScalarVolume(VoxelGrid((3, 3, 3)), np.zeros((3, 3, 3)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0


# --- differential operators ------------------------------------------------------


class TestJacobian:
    def test_uniform_scaling_is_exact(self):
        g = VoxelGrid((10, 10, 10))
        J = jacobian_determinant(affine_field(g, 1.1 * np.eye(3))).data
        assert np.max(np.abs(J[1:-1, 1:-1, 1:-1] - 1.331)) < 1e-9
        # linear fields are also exact on the one-sided boundary stencils
        assert np.max(np.abs(J - 1.331)) < 1e-9

    def test_identity_field(self):
        g = VoxelGrid((4, 5, 6))
        J = jacobian_determinant(DisplacementField(g, np.zeros((4, 5, 6, 3)))).data
        np.testing.assert_array_equal(J, 1.0)

    def test_matches_cofactor_oracle_on_random_field(self):
        rng = np.random.default_rng(3)
        g = VoxelGrid((5, 4, 6), (0.8, 1.0, 1.3))
        u = rng.normal(scale=0.2, size=(5, 4, 6, 3))
        J = jacobian_determinant(DisplacementField(g, u)).data
        for i, j, k in itertools.product(range(5), range(4), range(6)):
            G = oracle_gradient(u, g.spacing, i, j, k)
            M = [[(1.0 if r == c else 0.0) + G[r][c] for c in range(3)] for r in range(3)]
            assert J[i, j, k] == pytest.approx(det3_cofactor(M), rel=1e-12, abs=1e-12)

    def test_spacing_aware(self):
        g = VoxelGrid((6, 6, 6), (2.0, 0.5, 1.0))
        J = jacobian_determinant(affine_field(g, np.diag([1.2, 0.9, 1.0]))).data
        np.testing.assert_allclose(J, 1.08, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-0.3, 0.3), min_size=9, max_size=9))
    def test_affine_field_has_constant_jacobian(self, entries):
        A = np.eye(3) + np.array(entries).reshape(3, 3)
        g = VoxelGrid((4, 4, 4))
        J = jacobian_determinant(affine_field(g, A, b=(0.3, -1.0, 2.0))).data
        np.testing.assert_allclose(J, np.linalg.det(A), atol=1e-10)


class TestDivergenceCurl:
    def test_divergence_matches_stencil_oracle(self):
        rng = np.random.default_rng(5)
        g = VoxelGrid((4, 5, 3), (1.0, 2.0, 0.5))
        u = rng.normal(size=(4, 5, 3, 3))
        d = divergence(DisplacementField(g, u)).data
        for i, j, k in itertools.product(range(4), range(5), range(3)):
            G = oracle_gradient(u, g.spacing, i, j, k)
            assert d[i, j, k] == pytest.approx(G[0][0] + G[1][1] + G[2][2], abs=1e-12)

    def test_curl_matches_stencil_oracle(self):
        rng = np.random.default_rng(6)
        g = VoxelGrid((4, 3, 5))
        u = rng.normal(size=(4, 3, 5, 3))
        c = curl_magnitude(DisplacementField(g, u)).data
        for i, j, k in itertools.product(range(4), range(3), range(5)):
            G = oracle_gradient(u, g.spacing, i, j, k)
            w = (G[2][1] - G[1][2], G[0][2] - G[2][0], G[1][0] - G[0][1])
            assert c[i, j, k] == pytest.approx(math.sqrt(sum(v * v for v in w)), abs=1e-12)

    def test_rigid_rotation_rate(self):
        # u = omega x x has curl 2*omega and zero divergence
        g = VoxelGrid((6, 6, 6))
        x = g.coordinates() - g.center()
        omega = np.array([0.0, 0.0, 0.05])
        f = DisplacementField(g, np.cross(omega, x))
        np.testing.assert_allclose(curl_magnitude(f).data, 0.1, atol=1e-12)
        np.testing.assert_allclose(divergence(f).data, 0.0, atol=1e-12)


class TestGradLogJacobian:
    def test_constant_jacobian_has_zero_gradient(self):
        g = VoxelGrid((4, 4, 4))
        J = ScalarVolume(g, np.full((4, 4, 4), 1.331))
        np.testing.assert_array_equal(grad_log_jacobian_magnitude(J).data, 0.0)

    def test_exponential_jacobian(self):
        # J = exp(c x) gives |grad log J| = c
        g = VoxelGrid((5, 5, 5), (0.5, 1.0, 1.0))
        x = g.coordinates()[..., 0]
        J = ScalarVolume(g, np.exp(0.2 * x))
        np.testing.assert_allclose(grad_log_jacobian_magnitude(J).data, 0.2, atol=1e-12)

    def test_floor_applies_to_folded_voxels(self):
        g = VoxelGrid((3, 3, 3))
        data = np.ones((3, 3, 3))
        data[1, 1, 1] = -2.0
        out = grad_log_jacobian_magnitude(ScalarVolume(g, data), floor=1e-6).data
        # central differences across the folded voxel cancel; its neighbours see log(1e-6)
        assert out[0, 1, 1] == pytest.approx(abs(math.log(1e-6)))
        assert np.all(np.isfinite(out))

    def test_rejects_non_positive_floor(self):
        with pytest.raises(ValueError, match="floor"):
            grad_log_jacobian_magnitude(ScalarVolume(VoxelGrid((3, 3, 3)), np.ones((3, 3, 3))), floor=0.0)


# --- interpolation -------------------------------------------------------------


def trilinear_oracle(vol, p):
    n = vol.shape
    c = [min(max(p[a], 0.0), n[a] - 1) for a in range(3)]
    total = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        w = 1.0
        idx = []
        for a in range(3):
            i0 = min(int(math.floor(c[a])), n[a] - 2)
            t = c[a] - i0
            w *= t if corner[a] else 1 - t
            idx.append(i0 + corner[a])
        total += w * vol[tuple(idx)]
    return total


class TestTrilinear:
    def test_matches_per_point_oracle(self):
        rng = np.random.default_rng(7)
        vol = rng.normal(size=(4, 5, 6))
        pts = rng.uniform(-1.0, 7.0, size=(50, 3))
        out = trilinear_sample(vol, pts)
        for p, v in zip(pts, out):
            assert v == pytest.approx(trilinear_oracle(vol, p), abs=1e-12)

    def test_reproduces_linear_functions(self):
        g = VoxelGrid((5, 5, 5))
        x = g.coordinates()
        vol = 1.0 + 2.0 * x[..., 0] - x[..., 1] + 0.5 * x[..., 2]
        p = np.array([[1.25, 2.5, 3.75], [0.0, 4.0, 0.1]])
        expect = 1.0 + 2.0 * p[:, 0] - p[:, 1] + 0.5 * p[:, 2]
        np.testing.assert_allclose(trilinear_sample(vol, p), expect, atol=1e-12)

    def test_grid_points_are_exact(self):
        rng = np.random.default_rng(8)
        vol = rng.normal(size=(3, 4, 5))
        idx = np.argwhere(np.ones_like(vol, dtype=bool)).astype(float)
        np.testing.assert_array_equal(trilinear_sample(vol, idx), vol.ravel())

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-5, 10), min_size=3, max_size=3))
    def test_output_within_data_range(self, p):
        vol = np.random.default_rng(9).normal(size=(4, 4, 4))
        v = trilinear_sample(vol, np.array([p]))[0]
        assert vol.min() - 1e-12 <= v <= vol.max() + 1e-12


class TestWarp:
    def test_zero_field_is_identity(self):
        rng = np.random.default_rng(10)
        g = VoxelGrid((4, 4, 4))
        img = ScalarVolume(g, rng.normal(size=(4, 4, 4)))
        out = warp_image(img, DisplacementField(g, np.zeros((4, 4, 4, 3))))
        np.testing.assert_array_equal(out.data, img.data.astype(np.float64))

    def test_integer_shift_with_spacing(self):
        g = VoxelGrid((6, 4, 4), (2.0, 1.0, 1.0))
        img = ScalarVolume(g, np.arange(96.0).reshape(6, 4, 4))
        u = np.zeros((6, 4, 4, 3))
        u[..., 0] = 2.0  # one voxel along x
        out = warp_image(img, DisplacementField(g, u)).data
        np.testing.assert_array_equal(out[:-1], img.data[1:])
        np.testing.assert_array_equal(out[-1], img.data[-1])  # clamped

    def test_grid_mismatch(self):
        with pytest.raises(ValueError, match="grid mismatch"):
            warp_image(ScalarVolume(VoxelGrid((3, 3, 3)), np.zeros((3, 3, 3))),
                       DisplacementField(VoxelGrid((4, 3, 3)), np.zeros((4, 3, 3, 3))))


# --- distance transform ----------------------------------------------------------


class TestDistanceToBoundary:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        g = VoxelGrid((7, 6, 5), spacing)
        mask = rng.uniform(size=g.dims) < 0.7
        d = distance_to_boundary(ScalarVolume(g, mask.astype(float))).data
        np.testing.assert_allclose(d, brute_force_edt(mask, spacing), atol=1e-12)

    def test_full_mask_measures_to_grid_exterior(self):
        g = VoxelGrid((5, 5, 5))
        d = distance_to_boundary(ScalarVolume(g, np.ones((5, 5, 5)))).data
        assert d[2, 2, 2] == 3.0
        assert d[0, 0, 0] == 1.0

    def test_zero_outside_mask(self):
        g = VoxelGrid((5, 5, 5))
        m = np.zeros((5, 5, 5))
        m[1:4, 1:4, 1:4] = 1
        d = distance_to_boundary(ScalarVolume(g, m)).data
        assert np.all(d[m == 0] == 0)
        assert d[2, 2, 2] == 2.0

    def test_rejects_non_binary_and_empty(self):
        g = VoxelGrid((3, 3, 3))
        with pytest.raises(ValueError, match="0 or 1"):
            distance_to_boundary(ScalarVolume(g, np.full((3, 3, 3), 0.5)))
        with pytest.raises(ValueError, match="empty"):
            distance_to_boundary(ScalarVolume(g, np.zeros((3, 3, 3))))


# --- on-disk format --------------------------------------------------------------


class TestBufferIO:
    def test_field_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(11)
        g = VoxelGrid((4, 3, 5), (0.7, 1.0, 1.5))
        f = DisplacementField(g, rng.normal(size=(4, 3, 5, 3)).astype(np.float32))
        write_field(tmp_path / "u", f)
        back = read_field(tmp_path / "u")
        assert back.grid == g
        assert back.data.tobytes() == f.data.tobytes()

    def test_scalar_round_trip_and_sidecar(self, tmp_path):
        g = VoxelGrid((3, 3, 4))
        v = ScalarVolume(g, np.arange(36, dtype=np.float32))
        write_scalar(tmp_path / "img", v)
        meta = json.loads((tmp_path / "img.json").read_text())
        assert meta["dims"] == [3, 3, 4] and meta["dtype"] == "f32" and meta["order"] == "x-fastest"
        raw = np.frombuffer((tmp_path / "img.raw").read_bytes(), dtype="<f4")
        np.testing.assert_array_equal(raw, np.arange(36))
        np.testing.assert_array_equal(read_scalar(tmp_path / "img").data, v.data)

    def test_truncated_buffer_reports_offset(self, tmp_path):
        g = VoxelGrid((3, 3, 3))
        write_scalar(tmp_path / "img", ScalarVolume(g, np.zeros(27, dtype=np.float32)))
        raw = tmp_path / "img.raw"
        raw.write_bytes(raw.read_bytes()[:100])
        with pytest.raises(GridFormatError, match="108.*100|100.*108"):
            read_scalar(tmp_path / "img")

    def test_wrong_kind_rejected(self, tmp_path):
        g = VoxelGrid((3, 3, 3))
        write_scalar(tmp_path / "img", ScalarVolume(g, np.zeros(27, dtype=np.float32)))
        with pytest.raises(GridFormatError, match="3 components"):
            read_field(tmp_path / "img")
