"""Synthetic scene generation, analytic oracles, noise injection, scene I/O."""

import math

import numpy as np
import pytest

from kpnf.errors import SceneFormatError
from kpnf.geometry import KeypointSet3D, project, triangulate_dlt
from kpnf.scenes import (
    ConstantSphere,
    GaussianBlob,
    Scene,
    SceneView,
    TexturedSphereSurface,
    field_eval,
    gen_camera_ring,
    gen_training_scene,
    load_scene,
    make_procedural_subject,
    perturb_keypoints,
    render_analytic,
    save_scene,
    scene_hash,
    sphere_keypoints,
    surface_color,
)


class TestCameraRing:
    def test_single_camera_principal_point_hits_target(self):
        target = np.array([0.1, -0.2, 0.3])
        (cam,) = gen_camera_ring(1, radius=2.0, target=target)
        u, v, depth = project(cam, target)
        assert (u, v) == pytest.approx((cam.cx, cam.cy), abs=1e-9)
        assert depth == pytest.approx(2.0)

    def test_four_cameras_equidistant_quarter_turns(self):
        target = np.zeros(3)
        cams = gen_camera_ring(4, radius=1.5, target=target)
        centers = np.array([c.center for c in cams])
        np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 1.5, atol=1e-12)
        for i in range(4):
            a, b = centers[i], centers[(i + 1) % 4]
            cosang = (a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
            assert cosang == pytest.approx(0.0, abs=1e-12)

    def test_all_principal_rays_hit_target(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=3)
        for cam in gen_camera_ring(7, radius=2.2, target=target, elevation=0.3):
            u, v, _ = project(cam, target)
            assert (u, v) == pytest.approx((cam.cx, cam.cy), abs=1e-9)


class TestAnalyticFields:
    def test_constant_sphere_eval(self):
        f = ConstantSphere(center=(0, 0, 0), radius=0.2, sigma=4.0, color=(1, 0, 0))
        colors, sigmas = field_eval(f, np.array([[0, 0, 0.1], [0, 0, 0.3]]))
        np.testing.assert_array_equal(sigmas, [4.0, 0.0])
        np.testing.assert_array_equal(colors[0], [1, 0, 0])

    def test_gaussian_blob_profile(self):
        f = GaussianBlob(center=(0, 0, 0), spread=0.1, peak_sigma=5.0, color=(0, 1, 0))
        _, sigmas = field_eval(f, np.array([[0, 0, 0], [0.1, 0, 0]]))
        assert sigmas[0] == pytest.approx(5.0)
        assert sigmas[1] == pytest.approx(5.0 * math.exp(-0.5))

    def test_shell_field(self):
        f = TexturedSphereSurface(center=(0, 0, 0), radius=0.2, shell_sigma=50.0, shell_thickness=0.04, color_seed=7)
        _, sigmas = field_eval(f, np.array([[0.2, 0, 0], [0.15, 0, 0], [0, 0, 0]]))
        np.testing.assert_array_equal(sigmas, [50.0, 0.0, 0.0])

    def test_surface_color_deterministic_and_bounded(self):
        f = TexturedSphereSurface(center=(0, 0, 0), radius=0.2, shell_sigma=50.0, shell_thickness=0.04, color_seed=3)
        rng = np.random.default_rng(1)
        dirs = rng.normal(size=(100, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        c1 = surface_color(f, dirs)
        c2 = surface_color(f, dirs)
        np.testing.assert_array_equal(c1, c2)
        assert np.all((c1 >= 0.1) & (c1 <= 0.9))

    def test_distinct_seeds_distinct_textures(self):
        rng = np.random.default_rng(2)
        dirs = rng.normal(size=(50, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        a = TexturedSphereSurface((0, 0, 0), 0.2, 50.0, 0.04, color_seed=1)
        b = TexturedSphereSurface((0, 0, 0), 0.2, 50.0, 0.04, color_seed=2)
        assert np.abs(surface_color(a, dirs) - surface_color(b, dirs)).max() > 0.05


class TestRenderAnalytic:
    def test_zero_sigma_gives_background(self):
        f = ConstantSphere(center=(0, 0, 0), radius=0.2, sigma=0.0, color=(1, 0, 0))
        (cam,) = gen_camera_ring(1, radius=1.0, target=(0, 0, 0), width=16, height=16)
        out = render_analytic(f, cam, oracle_samples=64, background=(0.3, 0.2, 0.1))
        np.testing.assert_allclose(out.image, np.broadcast_to([0.3, 0.2, 0.1], (16, 16, 3)), atol=1e-12)

    def test_center_alpha_closed_form(self):
        """Central-ray alpha = 1 - e^{-1.6} ~ 0.798103 for the reference sphere."""
        f = ConstantSphere(center=(0, 0, 0), radius=0.2, sigma=4.0, color=(1, 0, 0))
        (cam,) = gen_camera_ring(1, radius=1.0, target=(0, 0, 0), width=33, height=33, focal=60)
        out = render_analytic(f, cam, oracle_samples=4096)
        assert out.alpha[16, 16] == pytest.approx(1 - math.exp(-1.6), abs=1e-3)
        assert out.alpha[16, 16] == pytest.approx(0.798103, abs=1.1e-3)

    def test_oracle_refinement_converged(self):
        """2^14 vs 2^15 oracle samples differ < 1e-6 per channel."""
        f = GaussianBlob(center=(0, 0, 0), spread=0.08, peak_sigma=8.0, color=(0.7, 0.3, 0.2))
        (cam,) = gen_camera_ring(1, radius=1.0, target=(0, 0, 0), width=8, height=8, focal=16)
        a = render_analytic(f, cam, oracle_samples=2**14)
        b = render_analytic(f, cam, oracle_samples=2**15)
        assert np.abs(a.image - b.image).max() < 1e-6


class TestSceneGeneration:
    def make_scene(self, oracle=256, n_cams=4, k=13):
        field, kp = make_procedural_subject(11)
        cams = gen_camera_ring(n_cams, radius=1.0, target=field.center, width=32, height=32, focal=45)
        splits = ["input", "input"] + ["supervision"] * (n_cams - 2)
        return gen_training_scene(field, cams, splits, "subj-11", keypoints=kp, oracle_samples=oracle)

    def test_thirteen_surface_keypoints(self):
        scene = self.make_scene()
        assert len(scene.keypoints3d) == 13

    def test_keypoints_on_subject_surface(self):
        field, kp = make_procedural_subject(5)
        dist = np.linalg.norm(kp.points - np.asarray(field.center), axis=1)
        np.testing.assert_allclose(dist, field.radius, atol=1e-12)

    def test_projected_keypoints_retriangulate(self):
        """DLT round-trip: projected 2D keypoints recover the 3D points < 1e-6 m."""
        scene = self.make_scene()
        cams = [v.camera for v in scene.views]
        recovered = triangulate_dlt(scene.keypoints2d, cams)
        np.testing.assert_allclose(recovered.points, scene.keypoints3d.points, atol=1e-6)

    def test_distinct_subjects_pixel_distinct(self):
        f1, kp1 = make_procedural_subject(1)
        f2, kp2 = make_procedural_subject(2)
        cams = gen_camera_ring(2, radius=1.0, target=(0, 0, 0), width=24, height=24, focal=30)
        s1 = gen_training_scene(f1, cams, ["input", "input"], "a", keypoints=kp1, oracle_samples=128)
        s2 = gen_training_scene(f2, cams, ["input", "input"], "b", keypoints=kp2, oracle_samples=128)
        assert np.abs(s1.views[0].image - s2.views[0].image).max() > 0.05

    def test_scene_hash_deterministic(self):
        a = self.make_scene(oracle=128)
        b = self.make_scene(oracle=128)
        assert scene_hash(a) == scene_hash(b)


class TestPerturbKeypoints:
    def test_zero_noise_identity(self):
        kp = sphere_keypoints((0, 0, 0), 0.2)
        out = perturb_keypoints(kp, 0.0, seed=3)
        np.testing.assert_array_equal(out.points, kp.points)

    def test_deterministic_per_seed(self):
        kp = sphere_keypoints((0, 0, 0), 0.2)
        a = perturb_keypoints(kp, 10.0, seed=3)
        b = perturb_keypoints(kp, 10.0, seed=3)
        c = perturb_keypoints(kp, 10.0, seed=4)
        np.testing.assert_array_equal(a.points, b.points)
        assert np.abs(a.points - c.points).max() > 1e-6

    def test_empirical_std_matches_level(self):
        """Per-axis std over 10^5 draws at 10 mm is 0.010 m within 1%."""
        kp = KeypointSet3D(np.zeros((1, 3)) + 0.5)
        draws = np.stack(
            [perturb_keypoints(kp, 10.0, seed=s).points[0] - 0.5 for s in range(100_000 // 3)]
        )
        std = draws.std(axis=0)
        np.testing.assert_allclose(std, 0.010, rtol=0.01)

    def test_supported_noise_sweep_levels(self):
        kp = sphere_keypoints((0, 0, 0), 0.2)
        for level in (0, 1, 2, 3, 4, 5, 10, 15, 20):
            out = perturb_keypoints(kp, float(level), seed=level)
            assert out.points.shape == kp.points.shape


class TestSceneIO:
    def make_small_scene(self):
        field, kp = make_procedural_subject(3)
        cams = gen_camera_ring(3, radius=1.0, target=field.center, width=16, height=16, focal=22)
        return gen_training_scene(
            field, cams, ["input", "input", "supervision"], "subj-3", keypoints=kp, oracle_samples=64
        )

    def test_round_trip(self, tmp_path):
        scene = self.make_small_scene()
        save_scene(scene, tmp_path / "s")
        loaded = load_scene(tmp_path / "s")
        assert loaded.subject_id == scene.subject_id
        assert [v.split for v in loaded.views] == [v.split for v in scene.views]
        for a, b in zip(scene.views, loaded.views):
            np.testing.assert_allclose(a.camera.intrinsics, b.camera.intrinsics, atol=1e-12)
            np.testing.assert_allclose(a.camera.rotation, b.camera.rotation, atol=1e-12)
            np.testing.assert_allclose(a.camera.translation, b.camera.translation, atol=1e-12)
            # images quantize once on save: byte-exact thereafter
            np.testing.assert_array_equal(
                np.round(a.image * 255).astype(np.uint8),
                np.round(b.image * 255).astype(np.uint8),
            )
        np.testing.assert_allclose(loaded.keypoints3d.points, scene.keypoints3d.points, atol=1e-12)

    def test_double_round_trip_byte_exact(self, tmp_path):
        scene = self.make_small_scene()
        save_scene(scene, tmp_path / "a")
        first = load_scene(tmp_path / "a")
        save_scene(first, tmp_path / "b")
        for i in range(len(scene.views)):
            a = (tmp_path / "a" / "images" / f"view_{i:03d}.png").read_bytes()
            b = (tmp_path / "b" / "images" / f"view_{i:03d}.png").read_bytes()
            assert a == b

    def test_missing_image_names_view(self, tmp_path):
        scene = self.make_small_scene()
        save_scene(scene, tmp_path / "s")
        (tmp_path / "s" / "images" / "view_001.png").unlink()
        with pytest.raises(SceneFormatError, match="view 1"):
            load_scene(tmp_path / "s")

    def test_unknown_split_rejected(self, tmp_path):
        scene = self.make_small_scene()
        save_scene(scene, tmp_path / "s")
        meta = (tmp_path / "s" / "scene.json").read_text()
        (tmp_path / "s" / "scene.json").write_text(meta.replace("supervision", "validation"))
        with pytest.raises(SceneFormatError):
            load_scene(tmp_path / "s")

    def test_malformed_json(self, tmp_path):
        (tmp_path / "s").mkdir()
        (tmp_path / "s" / "scene.json").write_text("{nope")
        with pytest.raises(SceneFormatError):
            load_scene(tmp_path / "s")

    def test_scene_requires_two_input_views(self):
        field, kp = make_procedural_subject(4)
        cams = gen_camera_ring(2, radius=1.0, target=field.center, width=16, height=16, focal=22)
        with pytest.raises(SceneFormatError):
            gen_training_scene(field, cams, ["input", "supervision"], "x", keypoints=kp, oracle_samples=32)
