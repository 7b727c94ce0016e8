"""Synthetic multi-view scenes with analytic ground truth.

Analytic density/color fields rendered by the same quadrature path as the
learned model (oracle sample counts, midpoint rule) provide ground-truth
images whose error budget is known. Procedural subjects vary center,
radius, and surface texture per seed so cross-subject generalization is
testable at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from kpnf.errors import InputValidationError, NumericalError, SceneFormatError
from kpnf.geometry import (
    Camera,
    KeypointSet2D,
    KeypointSet3D,
    Sphere,
    ViewKeypoints2D,
    camera_look_at,
    generate_ray,
    intersect_proxy,
    project,
    proxy_from_keypoints,
)
from kpnf.imageio import load_image, save_image
from kpnf.renderer import RenderConfig, RenderResult, render_image

SCENE_FORMAT = "kpnf-scene/1"
SPLITS = ("input", "supervision", "heldout")
ORACLE_SAMPLES = 2**14


# --- analytic fields ---------------------------------------------------------


@dataclass(frozen=True)
class ConstantSphere:
    center: tuple[float, float, float]
    radius: float
    sigma: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class GaussianBlob:
    center: tuple[float, float, float]
    spread: float
    peak_sigma: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class TexturedSphereSurface:
    """Dense shell at radius R with a low-frequency procedural surface color.

    The color at any point is the texture of its radial direction, so views
    of the same surface patch agree: reprojection-consistent by design.
    """

    center: tuple[float, float, float]
    radius: float
    shell_sigma: float
    shell_thickness: float
    color_seed: int


AnalyticField = ConstantSphere | GaussianBlob | TexturedSphereSurface


def _surface_palette(seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel random low-frequency direction fields: (freqs, phases, amps)."""
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(-3.0, 3.0, size=(3, 4, 3))  # channel, component, xyz
    phases = rng.uniform(0, 2 * math.pi, size=(3, 4))
    amps = rng.uniform(0.5, 1.0, size=(3, 4))
    return freqs, phases, amps


def surface_color(field: TexturedSphereSurface, dirs: np.ndarray) -> np.ndarray:
    """Texture lookup for [M, 3] unit radial directions -> [M, 3] colors in [0.1, 0.9]."""
    freqs, phases, amps = _surface_palette(field.color_seed)
    out = np.empty((len(dirs), 3))
    for ch in range(3):
        waves = np.sin(dirs @ freqs[ch].T + phases[ch])  # [M, 4]
        mixed = (waves * amps[ch]).sum(axis=1) / amps[ch].sum()
        out[:, ch] = 0.5 + 0.4 * mixed
    return np.clip(out, 0.1, 0.9)


def field_eval(field: AnalyticField, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(colors [M, 3], sigmas [M]) of an analytic field; view-independent."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if isinstance(field, ConstantSphere):
        dist = np.linalg.norm(points - np.asarray(field.center), axis=1)
        sigmas = np.where(dist < field.radius, field.sigma, 0.0)
        colors = np.broadcast_to(np.asarray(field.color, dtype=np.float64), (len(points), 3)).copy()
        return colors, sigmas
    if isinstance(field, GaussianBlob):
        d2 = np.sum((points - np.asarray(field.center)) ** 2, axis=1)
        sigmas = field.peak_sigma * np.exp(-d2 / (2 * field.spread**2))
        colors = np.broadcast_to(np.asarray(field.color, dtype=np.float64), (len(points), 3)).copy()
        return colors, sigmas
    if isinstance(field, TexturedSphereSurface):
        offset = points - np.asarray(field.center)
        dist = np.linalg.norm(offset, axis=1)
        sigmas = np.where(np.abs(dist - field.radius) <= field.shell_thickness / 2, field.shell_sigma, 0.0)
        dirs = offset / np.maximum(dist, 1e-12)[:, None]
        return surface_color(field, dirs), sigmas
    raise InputValidationError(f"unknown analytic field {type(field).__name__}")


def field_fn(field: AnalyticField) -> Callable:
    """Adapt an analytic field to the renderer's field callback signature."""

    def fn(points, dirs):
        return field_eval(field, points)

    return fn


def field_center(field: AnalyticField) -> np.ndarray:
    return np.asarray(field.center, dtype=np.float64)


def field_bounding_radius(field: AnalyticField) -> float:
    if isinstance(field, ConstantSphere):
        return field.radius
    if isinstance(field, GaussianBlob):
        return 3.0 * field.spread
    return field.radius + field.shell_thickness / 2


# --- cameras and ground-truth rendering ----------------------------------------


def gen_camera_ring(
    n: int,
    radius: float,
    target,
    elevation: float = 0.0,
    focal: float = 100.0,
    width: int = 64,
    height: int = 64,
    azimuth_offset: float = 0.0,
) -> list[Camera]:
    """n cameras evenly spaced in azimuth, looking at ``target``.

    ``elevation`` (radians) lifts the ring; all cameras share intrinsics and
    sit at distance ``radius`` from the target.
    """
    if n < 1 or radius <= 0:
        raise InputValidationError("camera ring needs n >= 1 and radius > 0")
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(n):
        az = azimuth_offset + 2 * math.pi * i / n
        eye = target + radius * np.array(
            [math.sin(az) * math.cos(elevation), math.sin(elevation), -math.cos(az) * math.cos(elevation)]
        )
        cams.append(camera_look_at(eye, target, focal=focal, width=width, height=height))
    return cams


def render_analytic(
    field: AnalyticField,
    camera: Camera,
    proxy: Sphere | None = None,
    oracle_samples: int = ORACLE_SAMPLES,
    background=(0.0, 0.0, 0.0),
) -> RenderResult:
    """Midpoint-quadrature ground truth at the oracle sample count.

    For a ConstantSphere with the camera looking at its center, the central
    ray's alpha is cross-checked against 1 - exp(-sigma * chord).
    """
    if proxy is None:
        proxy = Sphere(center=field_center(field), radius=field_bounding_radius(field) + 0.1)
    cfg = RenderConfig(
        n_coarse=oracle_samples,
        n_fine=0,
        sampling="midpoint",
        chunk_rays=64,
        background=tuple(background),
    )
    result = render_image(field_fn(field), camera, proxy, cfg)

    if isinstance(field, ConstantSphere):
        center = field_center(field)
        u, v, _ = project(camera, center)
        if 0 <= u < camera.width and 0 <= v < camera.height:
            ray = generate_ray(camera, (u, v))
            hit = intersect_proxy(ray, Sphere(center=center, radius=field.radius))
            if hit is not None:
                chord = hit[1] - hit[0]
                expected = 1 - math.exp(-field.sigma * chord)
                got = float(result.alpha[int(v), int(u)])
                if abs(got - expected) > 5e-3:
                    raise NumericalError(
                        f"oracle self-check failed: central alpha {got:.6f} vs closed form {expected:.6f}"
                    )
    return result


# --- scenes -----------------------------------------------------------------------


@dataclass
class SceneView:
    camera: Camera
    image: np.ndarray  # [H, W, 3] float in [0, 1]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise SceneFormatError(f"unknown split tag {self.split!r} (want one of {SPLITS})")
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise SceneFormatError(
                f"image shape {self.image.shape} does not match camera {self.camera.height}x{self.camera.width}"
            )


@dataclass
class Scene:
    subject_id: str
    views: list[SceneView]
    keypoints3d: KeypointSet3D
    keypoints2d: KeypointSet2D | None = None

    def __post_init__(self):
        if len([v for v in self.views if v.split == "input"]) < 2:
            raise SceneFormatError("a scene needs at least two input views")
        if self.keypoints2d is not None:
            self.keypoints2d.validate_against([v.camera for v in self.views])

    def views_of(self, split: str) -> list[SceneView]:
        return [v for v in self.views if v.split == split]

    @property
    def input_views(self) -> list[SceneView]:
        return self.views_of("input")

    @property
    def supervision_views(self) -> list[SceneView]:
        return self.views_of("supervision")

    @property
    def heldout_views(self) -> list[SceneView]:
        return self.views_of("heldout")


def scene_hash(scene: Scene) -> str:
    """Platform-stable digest of quantized images, cameras, splits, keypoints."""
    h = hashlib.sha256()
    h.update(scene.subject_id.encode())
    for view in scene.views:
        h.update(view.split.encode())
        h.update(np.round(view.image * 255).astype(np.uint8).tobytes())
        h.update(view.camera.intrinsics.tobytes())
        h.update(view.camera.rotation.tobytes())
        h.update(view.camera.translation.tobytes())
    h.update(scene.keypoints3d.points.tobytes())
    return h.hexdigest()


def sphere_keypoints(center, radius: float, k: int = 13) -> KeypointSet3D:
    """K quasi-uniform surface anchors via the golden spiral."""
    center = np.asarray(center, dtype=np.float64)
    idx = np.arange(k)
    z = 1.0 - 2.0 * (idx + 0.5) / k
    r = np.sqrt(np.maximum(1 - z * z, 0.0))
    phi = idx * math.pi * (3 - math.sqrt(5))
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return KeypointSet3D(center + radius * dirs)


def project_keypoints(kp: KeypointSet3D, cameras: Sequence[Camera]) -> KeypointSet2D:
    """Noise-free 2D observations (confidence 1) of the 3D keypoints."""
    views = []
    for i, cam in enumerate(cameras):
        rows = []
        for point in kp.points:
            u, v, _ = project(cam, point)
            rows.append([u, v, 1.0])
        views.append(ViewKeypoints2D(i, np.asarray(rows)))
    return KeypointSet2D(tuple(views))


def gen_training_scene(
    field: AnalyticField,
    cameras: Sequence[Camera],
    splits: Sequence[str],
    subject_id: str,
    keypoints: KeypointSet3D | None = None,
    oracle_samples: int = ORACLE_SAMPLES,
    background=(0.0, 0.0, 0.0),
) -> Scene:
    """Render ground truth for every camera and package a Scene.

    Keypoints default to 13 surface anchors of the field's bounding sphere;
    2D observations are derived by projection for triangulation tests.
    """
    if len(cameras) != len(splits):
        raise InputValidationError("cameras and splits must align")
    if keypoints is None:
        keypoints = sphere_keypoints(field_center(field), field_bounding_radius(field))
    views = []
    for cam, split in zip(cameras, splits):
        result = render_analytic(field, cam, oracle_samples=oracle_samples, background=background)
        views.append(SceneView(camera=cam, image=result.image, split=split))
    return Scene(
        subject_id=subject_id,
        views=views,
        keypoints3d=keypoints,
        keypoints2d=project_keypoints(keypoints, cameras),
    )


def make_procedural_subject(subject_seed: int, base_center=(0.0, 0.0, 0.0), position_jitter: float = 0.1):
    """Per-seed subject: textured sphere shell with varied center, size, texture.

    Returns (field, keypoints). Keypoints ride on the subject surface, so
    keypoint-relative encodings see a consistent local geometry across
    subjects while absolute encodings see novel configurations.
    """
    rng = np.random.default_rng(subject_seed)
    center = np.asarray(base_center) + rng.uniform(-position_jitter, position_jitter, size=3)
    radius = 0.2 * (1.0 + rng.uniform(-0.25, 0.25))
    field = TexturedSphereSurface(
        center=tuple(center),
        radius=float(radius),
        shell_sigma=60.0,
        shell_thickness=0.05,
        color_seed=int(rng.integers(0, 2**31 - 1)),
    )
    return field, sphere_keypoints(center, radius)


def perturb_keypoints(kp: KeypointSet3D, noise_mm: float, seed: int) -> KeypointSet3D:
    """Isotropic Gaussian keypoint noise, std = noise_mm per axis (converted to m)."""
    if noise_mm < 0:
        raise InputValidationError("noise level must be >= 0")
    if noise_mm == 0:
        return kp
    rng = np.random.default_rng(seed)
    noise = rng.normal(scale=noise_mm / 1000.0, size=kp.points.shape)
    return KeypointSet3D(kp.points + noise)


# --- scene I/O ----------------------------------------------------------------------


def save_scene(scene: Scene, path) -> None:
    """Directory layout: scene.json + images/view_###.png."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    views_meta = []
    for i, view in enumerate(scene.views):
        rel = f"images/view_{i:03d}.png"
        save_image(path / rel, view.image)
        views_meta.append({"camera": view.camera.to_dict(), "image": rel, "split": view.split})
    meta = {
        "format": SCENE_FORMAT,
        "subject": scene.subject_id,
        "views": views_meta,
        "keypoints3d": scene.keypoints3d.to_dict(),
    }
    if scene.keypoints2d is not None:
        meta["keypoints2d"] = scene.keypoints2d.to_dict()
    (path / "scene.json").write_text(json.dumps(meta, indent=1))


def load_scene(path) -> Scene:
    path = Path(path)
    meta_path = path / "scene.json"
    if not meta_path.exists():
        raise SceneFormatError(f"{path}: no scene.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{meta_path}: malformed JSON: {e}") from e
    if meta.get("format") != SCENE_FORMAT:
        raise SceneFormatError(f"{meta_path}: format {meta.get('format')!r} != {SCENE_FORMAT!r}")
    views = []
    for i, vm in enumerate(meta.get("views", [])):
        camera = Camera.from_dict(vm["camera"])
        img_path = path / vm["image"]
        if not img_path.exists():
            raise SceneFormatError(f"view {i}: missing image file {vm['image']}")
        image = load_image(img_path)
        if image.shape != (camera.height, camera.width, 3):
            raise SceneFormatError(
                f"view {i}: image {image.shape} does not match camera {camera.height}x{camera.width}"
            )
        views.append(SceneView(camera=camera, image=image, split=vm.get("split", "input")))
    kp3 = KeypointSet3D.from_dict(meta["keypoints3d"])
    kp2 = KeypointSet2D.from_dict(meta["keypoints2d"]) if "keypoints2d" in meta else None
    return Scene(subject_id=meta.get("subject", "unknown"), views=views, keypoints3d=kp3, keypoints2d=kp2)


def scene_proxy(scene: Scene, mode: str = "sphere", margin: float | None = None):
    return proxy_from_keypoints(scene.keypoints3d, mode=mode, margin=margin)
