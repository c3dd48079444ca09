import numpy as np
import pytest

from boostdream import kernels
from boostdream.errors import FieldFormatError
from boostdream.field import (
    EMPTY_DENSITY,
    VoxelField,
    encode_normal_map,
    init_field,
    load_field,
    render,
    render_normal_map,
    save_field,
)

from conftest import axis_pose


def softplus_inv(y):
    return float(np.log(np.expm1(y)))


def slab_lengths(origins, dirs, lo=-1.0, hi=1.0):
    """Independent ray/box oracle: crossing length per ray (0 on miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / dirs
        t1 = (hi - origins) / dirs
    near = np.nan_to_num(np.minimum(t0, t1), nan=np.inf).max(axis=1)
    far = np.nan_to_num(np.maximum(t0, t1), nan=-np.inf).min(axis=1)
    near = np.maximum(near, 0.0)
    return np.where(far > near, far - near, 0.0)


class TestInit:
    def test_deterministic(self):
        a = init_field(12, seed=9)
        b = init_field(12, seed=9)
        assert np.array_equal(a.density_raw, b.density_raw)
        assert np.array_equal(a.color_raw, b.color_raw)

    def test_empty_renders_background(self):
        f = init_field(12, seed=0, init_mode="empty")
        out = render(f, axis_pose(), want_normal=False)
        assert out.opacity.max() < 1e-6
        assert np.abs(out.color - 1.0).max() < 1e-6

    def test_blob_covers_center(self):
        f = init_field(24, seed=1)
        out = render(f, axis_pose(image_size=48), want_normal=False)
        crop = out.opacity[16:32, 16:32]
        assert crop.max() > 0.05

    def test_too_small_resolution(self):
        with pytest.raises(ValueError):
            init_field(1, seed=0)
        with pytest.raises(ValueError):
            init_field((8, 1, 8), seed=0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            init_field(8, seed=0, init_mode="plasma")


class TestRender:
    def test_empty_field_is_background(self):
        f = init_field(8, seed=0, init_mode="empty")
        bg = (0.2, 0.4, 0.6)
        out = render(f, axis_pose(), background=bg, want_normal=False)
        assert np.abs(out.color - np.array(bg)).max() < 1e-6
        assert out.opacity.max() < 1e-6

    def test_homogeneous_transmittance_matches_closed_form(self):
        # opacity along each ray must equal 1 - exp(-sigma * L)
        sigma0 = 1.3
        f = init_field(16, seed=0, init_mode="empty")
        f.density_raw[:] = softplus_inv(sigma0)
        pose = axis_pose(distance=3.0, image_size=24)
        from boostdream.cameras import generate_rays

        origins, dirs = generate_rays(pose)
        expected = 1.0 - np.exp(-sigma0 * slab_lengths(origins, dirs))
        out = render(f, pose, n_samples=64, want_normal=False)
        err = np.abs(out.opacity.reshape(-1) - expected)
        assert err.max() < 0.01

    def test_hard_sphere_normals_radial(self):
        # steep radial density ramp: normals must align with the radius
        radius = 0.8
        res = 64
        f = init_field(res, seed=0, init_mode="empty")
        axes = [np.linspace(-1, 1, res)] * 3
        xs, ys, zs = np.meshgrid(*axes, indexing="ij")
        r = np.sqrt(xs**2 + ys**2 + zs**2)
        f.density_raw[:] = np.clip(400.0 * (radius - r), -25, 80).astype(np.float32)

        pose = axis_pose(distance=3.0, image_size=32)
        out = render(f, pose, n_samples=192)
        from boostdream.cameras import generate_rays, world_to_camera_matrix

        origins, dirs = generate_rays(pose)
        # analytic first hit on the sphere
        b = (origins * dirs).sum(1)
        c = (origins * origins).sum(1) - radius**2
        disc = b * b - c
        hit = disc > 0
        t_hit = -b - np.sqrt(np.maximum(disc, 0))
        impact = np.linalg.norm(origins + dirs * t_hit[:, None], axis=1)
        world_n = (origins + dirs * t_hit[:, None]) / radius
        cam_n = world_n @ world_to_camera_matrix(pose).T

        # keep pixels well inside the silhouette: impact parameter < 0.7 R
        perp = np.linalg.norm(np.cross(origins, dirs), axis=1)  # line-to-origin distance
        interior = hit & (perp < 0.7 * radius)
        got = out.normal.reshape(-1, 3)[interior]
        want = cam_n[interior]
        cosang = np.clip((got * want).sum(1), -1, 1)
        angles = np.degrees(np.arccos(cosang))
        assert angles.max() < 5.0

    def test_render_is_pure(self):
        f = init_field(12, seed=4)
        a = render(f, axis_pose(), want_normal=True, want_samples=True)
        b = render(f, axis_pose(), want_normal=True, want_samples=True)
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.opacity, b.opacity)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.normal, b.normal)
        assert np.array_equal(a.sample_weights, b.sample_weights)

    def test_color_bounded(self):
        rng = np.random.default_rng(2)
        f = init_field(10, seed=2)
        f.color_raw[:] = (rng.standard_normal(f.color_raw.shape) * 4).astype(np.float32)
        out = render(f, axis_pose(), want_normal=False)
        assert out.color.min() >= 0.0 and out.color.max() <= 1.0

    def test_opacity_monotone_in_density(self):
        rng = np.random.default_rng(3)
        f = init_field(8, seed=3)
        base = render(f, axis_pose(image_size=16), want_normal=False).opacity
        for _ in range(5):
            g = f.copy()
            i, j, k = rng.integers(0, 8, 3)
            g.density_raw[i, j, k] += 1.5
            bumped = render(g, axis_pose(image_size=16), want_normal=False).opacity
            assert (bumped - base).min() > -1e-12

    def test_normals_unit_where_visible(self):
        f = init_field(16, seed=5)
        out = render(f, axis_pose(), want_normal=True)
        visible = out.opacity >= kernels.EPS_VIS
        norms = np.linalg.norm(out.normal[visible], axis=-1)
        assert np.abs(norms - 1.0).max() < 1e-4

    def test_small_image_rejected(self):
        f = init_field(8, seed=0)
        with pytest.raises(ValueError):
            render(f, axis_pose(image_size=4))


class TestNormalMap:
    def test_empty_field_constant_encoding(self):
        f = init_field(8, seed=0, init_mode="empty")
        img = render_normal_map(f, axis_pose())
        assert np.abs(img - np.array([0.5, 0.5, 1.0])).max() < 1e-6

    def test_flat_wall_faces_camera(self):
        # density ramp decreasing along +x: surface normal is +x, toward the
        # camera placed on +x, so the encoding is (0.5, 0.5, 1.0)
        res = 32
        f = init_field(res, seed=0, init_mode="empty")
        xs = np.linspace(-1, 1, res)[:, None, None]
        ramp = np.broadcast_to(np.clip(-30.0 * xs, -20, 20), (res, res, res))
        f.density_raw[:] = ramp.astype(np.float32)
        img = render_normal_map(f, axis_pose(distance=3.0, image_size=32))
        center = img[14:18, 14:18]
        assert np.abs(center - np.array([0.5, 0.5, 1.0])).max() < 0.02

    def test_silhouettes_pixel_aligned(self):
        f = init_field(16, seed=6)
        pose = axis_pose(image_size=24)
        color_pass = render(f, pose, want_normal=False)
        normal_pass = render(f, pose, want_normal=True)
        assert np.array_equal(color_pass.opacity, normal_pass.opacity)

    def test_encode_background_pixels(self):
        normal = np.zeros((2, 2, 3))
        opacity = np.zeros((2, 2))
        assert np.allclose(encode_normal_map(normal, opacity), [0.5, 0.5, 1.0])


class TestSaveLoad:
    def test_roundtrip_bit_exact(self, tmp_path):
        f = init_field((6, 8, 10), seed=11)
        f.bbox[0] = (-1.5, -1, -0.5)
        path = tmp_path / "field.bdf"
        save_field(f, path)
        g = load_field(path)
        assert g.resolution == (6, 8, 10)
        assert np.array_equal(f.bbox, g.bbox)
        assert np.array_equal(f.density_raw, g.density_raw)
        assert np.array_equal(f.color_raw, g.color_raw)
        assert g.density_raw.dtype == np.float32

    def test_corrupted_magic(self, tmp_path):
        f = init_field(4, seed=0)
        path = tmp_path / "field.bdf"
        save_field(f, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FieldFormatError, match="magic"):
            load_field(path)

    def test_truncated_density(self, tmp_path):
        f = init_field(8, seed=0)
        path = tmp_path / "field.bdf"
        save_field(f, path)
        header = 4 + 16 + 48
        path.write_bytes(path.read_bytes()[: header + 100])
        with pytest.raises(FieldFormatError, match="density"):
            load_field(path)

    def test_truncated_color(self, tmp_path):
        f = init_field(8, seed=0)
        path = tmp_path / "field.bdf"
        save_field(f, path)
        full = path.read_bytes()
        path.write_bytes(full[:-50])
        with pytest.raises(FieldFormatError, match="color"):
            load_field(path)

    def test_x_fastest_layout(self, tmp_path):
        # byte order in the file: x varies fastest, colors interleaved
        f = init_field((3, 2, 2), seed=0, init_mode="empty")
        f.density_raw[:] = np.arange(12, dtype=np.float32).reshape(3, 2, 2)
        path = tmp_path / "layout.bdf"
        save_field(f, path)
        blob = path.read_bytes()
        dens = np.frombuffer(blob[68 : 68 + 48], dtype="<f4")
        # first three entries walk x at y=z=0: values [0, 4, 8]
        assert np.array_equal(dens[:3], [0.0, 4.0, 8.0])


@pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")
class TestBackendParity:
    def test_render_parity(self):
        f = init_field(14, seed=8)
        pose = axis_pose(distance=2.9, image_size=24, fov=60)
        kernels.set_backend("compiled")
        a = render(f, pose, want_normal=True, want_samples=True)
        kernels.set_backend("numpy")
        b = render(f, pose, want_normal=True, want_samples=True)
        kernels.set_backend("auto")
        assert np.abs(a.color - b.color).max() < 1e-9
        assert np.abs(a.opacity - b.opacity).max() < 1e-9
        assert np.abs(a.depth - b.depth).max() < 1e-9
        assert np.abs(a.normal - b.normal).max() < 1e-9
        assert np.abs(a.sample_weights - b.sample_weights).max() < 1e-9
        assert np.abs(a.sample_normal_dot - b.sample_normal_dot).max() < 1e-9

    def test_backward_parity(self):
        rng = np.random.default_rng(13)
        f = init_field(10, seed=13)
        pose = axis_pose(image_size=16)
        from boostdream.field import field_gradient

        dlc = rng.standard_normal((16, 16, 3))
        dlo = rng.standard_normal((16, 16))
        kernels.set_backend("compiled")
        ga = field_gradient(f, pose, dlc, dlo)
        kernels.set_backend("numpy")
        gb = field_gradient(f, pose, dlc, dlo)
        kernels.set_backend("auto")
        assert np.abs(ga.d_density_raw - gb.d_density_raw).max() < 1e-9
        assert np.abs(ga.d_color_raw - gb.d_color_raw).max() < 1e-9

    def test_orientation_parity(self):
        f = init_field(10, seed=14)
        pose = axis_pose(image_size=16)
        from boostdream.field import orientation_gradient

        kernels.set_backend("compiled")
        la, ga = orientation_gradient(f, pose)
        kernels.set_backend("numpy")
        lb, gb = orientation_gradient(f, pose)
        kernels.set_backend("auto")
        assert abs(la - lb) < 1e-9
        assert np.abs(ga.d_density_raw - gb.d_density_raw).max() < 1e-9
