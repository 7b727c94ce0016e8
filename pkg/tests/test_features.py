"""Encoders, pixel-aligned sampling, and image I/O."""

import numpy as np
import pytest

from kpnf import diffcore as dc
from kpnf import features as ft
from kpnf import imageio
from kpnf.errors import ImageFormatError, ShapeMismatchError
from kpnf.geometry import Camera, camera_look_at, project


def identity_camera(f=100.0, size=64):
    return Camera(
        intrinsics=[[f, 0, size / 2], [0, f, size / 2], [0, 0, 1]],
        rotation=np.eye(3),
        translation=np.zeros(3),
        width=size,
        height=size,
    )


@pytest.fixture(scope="module")
def weights():
    rng = np.random.default_rng(42)
    return {**ft.init_geometry_encoder(rng), **ft.init_appearance_encoder(rng)}


class TestEncoderShapes:
    def test_geometry_64(self, weights):
        f_gl, f_gh = ft.encode_geometry(weights, np.zeros((64, 64, 3)))
        assert f_gl.shape == (8, 8, 64)
        assert f_gh.shape == (32, 32, 8)

    def test_appearance_64(self, weights):
        f_a = ft.encode_appearance(weights, np.zeros((64, 64, 3)))
        assert f_a.shape == (16, 16, 8)

    @pytest.mark.parametrize("hw", [(16, 16), (32, 48), (64, 64)])
    def test_divisible_inputs(self, weights, hw):
        H, W = hw
        img = np.zeros((H, W, 3))
        f_gl, f_gh = ft.encode_geometry(weights, img)
        assert f_gl.shape == (H // 8, W // 8, 64)
        assert f_gh.shape == (H // 2, W // 2, 8)
        assert ft.encode_appearance(weights, img).shape == (H // 4, W // 4, 8)

    def test_indivisible_rejected(self, weights):
        with pytest.raises(ShapeMismatchError):
            ft.encode_geometry(weights, np.zeros((20, 64, 3)))
        with pytest.raises(ShapeMismatchError):
            ft.encode_appearance(weights, np.zeros((22, 64, 3)))

    def test_zero_image_zero_features(self, weights):
        pyr = ft.build_pyramid(weights, np.zeros((64, 64, 3)))
        assert np.abs(pyr.f_gl.values).max() == 0.0
        assert np.abs(pyr.f_gh.values).max() == 0.0
        assert np.abs(pyr.f_a.values).max() == 0.0

    def test_translation_by_8px_shifts_deep_map_one_cell(self, weights):
        """Content kept away from borders: the deep map shifts exactly."""
        rng = np.random.default_rng(1)
        patch = rng.uniform(-1, 1, size=(32, 32, 3))
        a_img = np.zeros((96, 96, 3))
        a_img[32:64, 32:64] = patch
        b_img = np.zeros((96, 96, 3))
        b_img[40:72, 40:72] = patch
        a, _ = ft.encode_geometry(weights, a_img)
        b, _ = ft.encode_geometry(weights, b_img)
        np.testing.assert_allclose(b.values[1:, 1:], a.values[:-1, :-1], atol=1e-10)


class TestEncoderGradients:
    def test_geometry_grad_check_f64(self, weights):
        rng = np.random.default_rng(2)
        img = rng.uniform(-1, 1, size=(16, 16, 3))
        w = rng.normal(size=(2, 2, 64))
        w2 = rng.normal(size=(8, 8, 8))

        def f(ps):
            f_gl, f_gh = ft.encode_geometry(ps, img)
            return dc.add(
                dc.sum_reduce(dc.multiply(f_gl, dc.constant(w))),
                dc.sum_reduce(dc.multiply(f_gh, dc.constant(w2))),
            )

        geo = {k: v for k, v in weights.items() if k.startswith("geo.")}
        report = dc.grad_check(f, geo, eps=1e-5, tolerance=1e-6, max_coords_per_block=8)
        assert report.passed, str(report)

    def test_appearance_grad_check_f64(self, weights):
        rng = np.random.default_rng(3)
        img = rng.uniform(-1, 1, size=(16, 16, 3))
        w = rng.normal(size=(4, 4, 8))

        def f(ps):
            return dc.sum_reduce(dc.multiply(ft.encode_appearance(ps, img), dc.constant(w)))

        app = {k: v for k, v in weights.items() if k.startswith("app.")}
        report = dc.grad_check(f, app, eps=1e-5, tolerance=1e-6, max_coords_per_block=8)
        assert report.passed, str(report)

    def test_full_encoder_grad_check_f32(self):
        """32-bit gradients on 16x16 images agree with finite differences at 1e-3."""
        from kpnf.layers import cast_params

        rng = np.random.default_rng(4)
        weights64 = {**ft.init_geometry_encoder(rng), **ft.init_appearance_encoder(rng)}
        weights32 = cast_params(weights64, np.float32)
        img = rng.uniform(-1, 1, size=(16, 16, 3)).astype(np.float32)
        wgl = rng.normal(size=(2, 2, 64)).astype(np.float32)
        wa = rng.normal(size=(4, 4, 8)).astype(np.float32)

        def f(ps):
            f_gl, _ = ft.encode_geometry(ps, img)
            f_a = ft.encode_appearance(ps, img)
            return dc.add(
                dc.sum_reduce(dc.multiply(f_gl, dc.constant(wgl, dtype=np.float32))),
                dc.sum_reduce(dc.multiply(f_a, dc.constant(wa, dtype=np.float32))),
            )

        report = dc.grad_check(f, weights32, eps=1e-2, tolerance=1e-3, max_coords_per_block=4)
        assert report.passed, str(report)

    def test_branches_share_no_parameters(self, weights):
        geo = {k for k in weights if k.startswith("geo.")}
        app = {k for k in weights if k.startswith("app.")}
        assert geo and app
        assert not (geo & app)
        assert geo | app == set(weights)


class TestPixelAlignedSampling:
    def test_exact_grid_cell(self):
        """A point projecting to the center of cell (i, j) returns grid[i, j]."""
        rng = np.random.default_rng(5)
        cam = identity_camera(f=100.0, size=64)
        grid_v = rng.normal(size=(16, 16, 4))  # quarter resolution: s = 4
        grid = dc.constant(grid_v)
        # cell (3, 5) center pixel: u = (5 + 0.5) * 4, v = (3 + 0.5) * 4
        u, v = (5.5 * 4, 3.5 * 4)
        X = np.array([(u - 32) / 100.0, (v - 32) / 100.0, 1.0])
        feats, valid = ft.sample_pixel_aligned(grid, cam, X)
        assert valid
        np.testing.assert_allclose(feats.values, grid_v[3, 5], atol=1e-12)

    def test_midpoint_of_four_cells(self):
        rng = np.random.default_rng(6)
        cam = identity_camera(f=100.0, size=64)
        grid_v = rng.normal(size=(16, 16, 4))
        grid = dc.constant(grid_v)
        u, v = (6.0 * 4, 4.0 * 4)  # corner between cells (3..4, 5..6)
        X = np.array([(u - 32) / 100.0, (v - 32) / 100.0, 1.0])
        feats, valid = ft.sample_pixel_aligned(grid, cam, X)
        assert valid
        np.testing.assert_allclose(feats.values, grid_v[3:5, 5:7].mean(axis=(0, 1)), atol=1e-12)

    def test_behind_camera_zero_invalid(self):
        cam = identity_camera()
        grid = dc.constant(np.ones((8, 8, 2)))
        feats, valid = ft.sample_pixel_aligned(grid, cam, np.array([0.0, 0.0, -1.0]))
        assert not valid
        np.testing.assert_array_equal(feats.values, [0, 0])

    def test_out_of_view_zero_invalid(self):
        cam = identity_camera()
        grid = dc.constant(np.ones((8, 8, 2)))
        feats, valid = ft.sample_pixel_aligned(grid, cam, np.array([50.0, 0.0, 1.0]))
        assert not valid
        np.testing.assert_array_equal(feats.values, [0, 0])

    def test_linearity_in_grid(self):
        """sample(a G1 + b G2) = a sample(G1) + b sample(G2)."""
        rng = np.random.default_rng(7)
        cam = camera_look_at([0.2, -0.1, -2.0], [0, 0, 0], focal=80, width=64, height=64)
        g1 = rng.normal(size=(16, 16, 5))
        g2 = rng.normal(size=(16, 16, 5))
        a, b = 1.7, -0.6
        pts = rng.uniform(-0.3, 0.3, size=(40, 3))
        s1, _ = ft.sample_pixel_aligned_batch(dc.constant(g1), cam, pts)
        s2, _ = ft.sample_pixel_aligned_batch(dc.constant(g2), cam, pts)
        s12, _ = ft.sample_pixel_aligned_batch(dc.constant(a * g1 + b * g2), cam, pts)
        np.testing.assert_allclose(s12.values, a * s1.values + b * s2.values, atol=1e-9)

    def test_sampling_matches_projection(self):
        """Projected pixel and sampled cell agree through the documented convention."""
        cam = identity_camera(f=100.0, size=64)
        grid_v = np.zeros((32, 32, 1))
        grid_v[10, 20, 0] = 7.0  # cell center at pixel ((20+0.5)*2, (10+0.5)*2)
        X = np.array([(41.0 - 32) / 100.0, (21.0 - 32) / 100.0, 1.0])
        u, v, _ = project(cam, X)
        assert (u, v) == pytest.approx((41.0, 21.0))
        feats, valid = ft.sample_pixel_aligned(dc.constant(grid_v), cam, X)
        assert valid
        assert feats.values[0] == pytest.approx(7.0)


class TestImageIO:
    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        img = rng.uniform(size=(20, 30, 3))
        p = tmp_path / "x.png"
        imageio.save_image(p, img)
        loaded = imageio.load_image(p)
        assert loaded.shape == (20, 30, 3)
        assert np.abs(loaded - img).max() <= 0.5 / 255 + 1e-12

    def test_png_byte_exact_round_trip(self, tmp_path):
        """Quantized images survive save/load exactly."""
        rng = np.random.default_rng(9)
        img8 = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        img = img8 / 255.0
        p = tmp_path / "x.png"
        imageio.save_image(p, img)
        np.testing.assert_array_equal(imageio.load_image(p), img)

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        img = rng.integers(0, 256, size=(12, 9, 3)).astype(np.uint8) / 255.0
        p = tmp_path / "x.ppm"
        imageio.save_image(p, img)
        np.testing.assert_array_equal(imageio.load_image(p), img)

    def test_pgm_gray(self, tmp_path):
        vals = np.linspace(0, 1, 64).reshape(8, 8)
        p = tmp_path / "x.pgm"
        imageio.save_gray_image(p, vals)
        raw = p.read_bytes()
        assert raw.startswith(b"P5\n8 8\n255\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageFormatError):
            imageio.load_image(tmp_path / "nope.png")

    def test_normalization_contract(self):
        img = np.array([[[0.0, 0.5, 1.0]]])
        np.testing.assert_allclose(imageio.normalize_for_encoder(img), [[[-1.0, 0.0, 1.0]]])
