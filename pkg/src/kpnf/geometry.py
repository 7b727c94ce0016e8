"""Pinhole cameras, projection, rays, DLT triangulation, and proxy ray bounds.

Conventions: world-to-camera extrinsics (X_cam = R X + t), pixel
coordinates (u, v) with u along image width, depth = camera-frame z.
Everything here is pure and operates on immutable float64 values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from kpnf.errors import (
    BehindCameraError,
    DegenerateGeometryError,
    FewerThanTwoViewsError,
    InputValidationError,
    InvalidCameraError,
    PixelOutOfBoundsError,
)

DEPTH_EPS = 1e-9
SPHERE_MARGIN_DEFAULT = 0.30
BOX_MARGIN_DEFAULT = 0.10


def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Camera:
    """Calibrated pinhole camera: intrinsics plus world-to-camera pose."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", _frozen_array(self.intrinsics, (3, 3)))
        object.__setattr__(self, "rotation", _frozen_array(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen_array(self.translation, (3,)))
        if not (np.isfinite(self.intrinsics).all() and np.isfinite(self.rotation).all() and np.isfinite(self.translation).all()):
            raise InvalidCameraError("camera parameters must be finite")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise InvalidCameraError("rotation is not orthonormal (tolerance 1e-9)")
        if not math.isclose(float(np.linalg.det(R)), 1.0, abs_tol=1e-9):
            raise InvalidCameraError("rotation determinant must be +1")
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise InvalidCameraError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidCameraError("image dimensions must be >= 1")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction (camera +z) in world coordinates."""
        return self.rotation[2].copy()

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix K [R | t]."""
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        try:
            return cls(
                intrinsics=data["intrinsics"],
                rotation=data["rotation"],
                translation=data["translation"],
                width=int(data["width"]),
                height=int(data["height"]),
            )
        except KeyError as e:
            raise InputValidationError(f"camera JSON missing field {e}") from e


@dataclass(frozen=True)
class Ray:
    """origin + t * direction, with optional [t_near, t_far] integration bounds."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen_array(self.origin, (3,)))
        object.__setattr__(self, "direction", _frozen_array(self.direction, (3,)))
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-9:
            raise InputValidationError("ray direction must be unit length (1e-9)")
        if self.bounded and not (0 <= self.t_near < self.t_far):
            raise InputValidationError("ray bounds must satisfy 0 <= t_near < t_far")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.t_far)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction

    def with_bounds(self, t_near: float, t_far: float) -> "Ray":
        return Ray(self.origin, self.direction, t_near=t_near, t_far=t_far)


@dataclass(frozen=True)
class ViewKeypoints2D:
    """Observed 2D keypoints of one view: rows (u, v, confidence)."""

    camera_index: int
    points: np.ndarray  # [K, 3]

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_array(self.points, (-1, 3)))
        conf = self.points[:, 2]
        if np.any(conf < 0) or np.any(conf > 1):
            raise InputValidationError("keypoint confidences must lie in [0, 1]")


@dataclass(frozen=True)
class KeypointSet2D:
    views: tuple[ViewKeypoints2D, ...]

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if not self.views:
            raise InputValidationError("KeypointSet2D needs at least one view")
        ks = {v.points.shape[0] for v in self.views}
        if len(ks) != 1:
            raise InputValidationError(f"views disagree on keypoint count: {sorted(ks)}")

    @property
    def num_keypoints(self) -> int:
        return self.views[0].points.shape[0]

    def validate_against(self, cameras: Sequence[Camera]) -> None:
        for v in self.views:
            if not 0 <= v.camera_index < len(cameras):
                raise InputValidationError(f"view references camera {v.camera_index}, have {len(cameras)}")

    def to_dict(self) -> dict:
        return {"views": [{"camera": v.camera_index, "points": v.points.tolist()} for v in self.views]}

    @classmethod
    def from_dict(cls, data: dict) -> "KeypointSet2D":
        try:
            views = tuple(ViewKeypoints2D(int(v["camera"]), np.asarray(v["points"], dtype=np.float64)) for v in data["views"])
        except KeyError as e:
            raise InputValidationError(f"keypoint JSON missing field {e}") from e
        return cls(views)


@dataclass(frozen=True)
class KeypointSet3D:
    """K anchor points in the world frame; the only subject-specific prior."""

    points: np.ndarray  # [K, 3]

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_array(self.points, (-1, 3)))
        if self.points.shape[0] < 1:
            raise InputValidationError("KeypointSet3D needs K >= 1 points")
        if not np.isfinite(self.points).all():
            raise InputValidationError("keypoints must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def to_dict(self) -> dict:
        return {"points3d": self.points.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "KeypointSet3D":
        if "points3d" not in data:
            raise InputValidationError("keypoint JSON missing field 'points3d'")
        return cls(np.asarray(data["points3d"], dtype=np.float64))


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen_array(self.center, (3,)))
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise InputValidationError("sphere radius must be positive and finite")


@dataclass(frozen=True)
class AxisAlignedBox:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min_corner", _frozen_array(self.min_corner, (3,)))
        object.__setattr__(self, "max_corner", _frozen_array(self.max_corner, (3,)))
        if not np.all(self.min_corner < self.max_corner):
            raise InputValidationError("box min corner must be strictly below max per axis")


ProxyShape = Sphere | AxisAlignedBox


# --- projection ---------------------------------------------------------------


def camera_depth(camera: Camera, X) -> float:
    """Camera-frame z of X: third component of R X + t. May be negative."""
    X = np.asarray(X, dtype=np.float64)
    return float(camera.rotation[2] @ X + camera.translation[2])


def project(camera: Camera, X) -> tuple[float, float, float]:
    """Perspective projection of a world point: (u, v, depth).

    Returned even if (u, v) falls outside the image rectangle; a point at
    or behind the camera plane (depth <= 1e-9) raises BehindCameraError.
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.isfinite(X).all():
        raise InputValidationError("cannot project non-finite point")
    xc = camera.rotation @ X + camera.translation
    depth = float(xc[2])
    if depth <= DEPTH_EPS:
        raise BehindCameraError(f"point depth {depth:.3e} <= {DEPTH_EPS}")
    u = camera.fx * xc[0] / depth + camera.cx
    v = camera.fy * xc[1] / depth + camera.cy
    return float(u), float(v), depth


def project_many(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection: (uv [M,2], depth [M], in_front [M]).

    Never raises on behind-camera points: callers get the mask and decide.
    Behind-camera rows carry undefined uv (set to -1).
    """
    points = np.asarray(points, dtype=np.float64)
    xc = points @ camera.rotation.T + camera.translation
    depth = xc[:, 2]
    in_front = depth > DEPTH_EPS
    safe = np.where(in_front, depth, 1.0)
    u = camera.fx * xc[:, 0] / safe + camera.cx
    v = camera.fy * xc[:, 1] / safe + camera.cy
    uv = np.stack([u, v], axis=1)
    uv[~in_front] = -1.0
    return uv, depth, in_front


def generate_ray(camera: Camera, pixel) -> Ray:
    """World-frame ray through a pixel; inverse of project up to depth."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise PixelOutOfBoundsError(f"pixel ({u}, {v}) outside [0,{camera.width})x[0,{camera.height})")
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    d_world = camera.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=camera.center, direction=d_world)


def generate_ray_grid(camera: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched ray directions for [M,2] pixel coordinates: (origin [3], dirs [M,3])."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack(
        [
            (pixels[:, 0] - camera.cx) / camera.fx,
            (pixels[:, 1] - camera.cy) / camera.fy,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    d_world = d_cam @ camera.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return camera.center, d_world


def camera_look_at(
    eye,
    target,
    up=(0.0, 1.0, 0.0),
    focal: float = 100.0,
    width: int = 64,
    height: int = 64,
) -> Camera:
    """Camera at ``eye`` whose optical axis passes through ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise InputValidationError("look-at eye and target coincide")
    z = z / nz
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:  # up parallel to viewing direction
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    t = -R @ eye
    K = np.array([[focal, 0, width / 2.0], [0, focal, height / 2.0], [0, 0, 1.0]])
    return Camera(intrinsics=K, rotation=R, translation=t, width=width, height=height)


# --- triangulation ---------------------------------------------------------------


def _normalizing_transform(points_uv: np.ndarray) -> np.ndarray:
    """Similarity moving 2D points to centroid and RMS radius sqrt(2).

    With a single point (or coincident points) the scale is left at 1.
    """
    centroid = points_uv.mean(axis=0)
    rms = math.sqrt(float(np.mean(np.sum((points_uv - centroid) ** 2, axis=1))))
    scale = math.sqrt(2.0) / rms if rms > 1e-12 else 1.0
    return np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )


def triangulate_dlt(
    observations: KeypointSet2D,
    cameras: Sequence[Camera],
    return_residuals: bool = False,
):
    """Lift 2D keypoint observations to 3D by homogeneous least squares.

    Per keypoint, stacks two confidence-weighted rows per observing view
    (confidence 0 drops the view) from Hartley-normalized pixel coordinates
    and takes the smallest right singular vector. Raises
    FewerThanTwoViewsError / DegenerateGeometryError per the contract.
    """
    observations.validate_against(cameras)
    K = observations.num_keypoints

    view_data = []
    for view in observations.views:
        cam = cameras[view.camera_index]
        observed = view.points[view.points[:, 2] > 0]
        T = _normalizing_transform(observed[:, :2]) if len(observed) else np.eye(3)
        view_data.append((view, T @ cam.projection_matrix(), T, cam.center))

    points = np.empty((K, 3))
    residuals = np.empty(K)
    for k in range(K):
        rows = []
        centers = []
        for view, Pn, T, center in view_data:
            u, v, conf = view.points[k]
            if conf <= 0:
                continue
            un, vn, _ = T @ np.array([u, v, 1.0])
            rows.append(conf * (un * Pn[2] - Pn[0]))
            rows.append(conf * (vn * Pn[2] - Pn[1]))
            centers.append(center)
        if len(centers) < 2:
            raise FewerThanTwoViewsError(f"keypoint {k} observed in {len(centers)} usable view(s)")
        centers = np.asarray(centers)
        spread = np.max(np.linalg.norm(centers - centers[0], axis=1))
        if spread < 1e-9:
            raise DegenerateGeometryError(f"keypoint {k}: all observing camera centers coincide")
        A = np.asarray(rows)
        _, s, vt = np.linalg.svd(A)
        if s[-2] - s[-1] <= 1e-12 * max(1.0, s[0]):
            raise DegenerateGeometryError(f"keypoint {k}: ambiguous DLT solution (no parallax)")
        X = vt[-1]
        if abs(X[3]) < 1e-12:
            raise DegenerateGeometryError(f"keypoint {k}: solution at infinity")
        points[k] = X[:3] / X[3]
        residuals[k] = s[-1]

    result = KeypointSet3D(points)
    if return_residuals:
        return result, residuals
    return result


# --- proxy shapes ---------------------------------------------------------------


def intersect_proxy(ray: Ray, proxy: ProxyShape) -> tuple[float, float] | None:
    """Entrance/exit parameters of a ray against a proxy; None on miss.

    t_near clamps to 0 when the origin is inside; tangential grazes count
    as misses (no interval of positive length).
    """
    if isinstance(proxy, Sphere):
        oc = ray.origin - proxy.center
        b = 2.0 * float(ray.direction @ oc)
        c = float(oc @ oc) - proxy.radius**2
        disc = b * b - 4.0 * c
        if disc <= 0:
            return None
        sq = math.sqrt(disc)
        t0 = (-b - sq) / 2.0
        t1 = (-b + sq) / 2.0
    elif isinstance(proxy, AxisAlignedBox):
        t0, t1 = -math.inf, math.inf
        for ax in range(3):
            o, d = float(ray.origin[ax]), float(ray.direction[ax])
            lo, hi = float(proxy.min_corner[ax]), float(proxy.max_corner[ax])
            if d == 0.0:
                if not (lo <= o <= hi):
                    return None
                continue
            ta = (lo - o) / d
            tb = (hi - o) / d
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
        if not (math.isfinite(t0) and math.isfinite(t1)):
            # ray parallel to every constraining slab while inside: unbounded
            # only possible for degenerate boxes, which the type forbids
            return None
    else:
        raise InputValidationError(f"unknown proxy shape {type(proxy).__name__}")

    if t1 <= 0:
        return None
    t0 = max(t0, 0.0)
    if t1 <= t0:
        return None
    return (t0, t1)


def intersect_proxy_batch(origin: np.ndarray, dirs: np.ndarray, proxy: ProxyShape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized proxy intersection for a shared-origin ray bundle.

    Returns (t_near [M], t_far [M], hit [M]); non-hit rows are zeros.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    M = len(dirs)
    if isinstance(proxy, Sphere):
        oc = origin - proxy.center
        b = 2.0 * dirs @ oc
        c = float(oc @ oc) - proxy.radius**2
        disc = b * b - 4.0 * c
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / 2.0
        t1 = (-b + sq) / 2.0
    elif isinstance(proxy, AxisAlignedBox):
        with np.errstate(divide="ignore"):
            inv = 1.0 / dirs  # +-inf on zero components
        lo = (proxy.min_corner - origin) * inv
        hi = (proxy.max_corner - origin) * inv
        # zero direction: origin inside slab -> (-inf, +inf); outside -> empty
        zero = dirs == 0.0
        inside = (origin >= proxy.min_corner) & (origin <= proxy.max_corner)
        lo = np.where(zero, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(zero, np.where(inside, np.inf, -np.inf), hi)
        ta = np.minimum(lo, hi)
        tb = np.maximum(lo, hi)
        t0 = ta.max(axis=1)
        t1 = tb.min(axis=1)
        hit = t1 > t0
    else:
        raise InputValidationError(f"unknown proxy shape {type(proxy).__name__}")

    hit = hit & (t1 > 0)
    t0 = np.maximum(t0, 0.0)
    hit = hit & (t1 > t0)
    t_near = np.where(hit, t0, 0.0)
    t_far = np.where(hit, t1, 0.0)
    return t_near, t_far, hit


def proxy_from_keypoints(kp: KeypointSet3D, mode: str = "sphere", margin: float | None = None) -> ProxyShape:
    """Over-approximating proxy anchored on the keypoints.

    sphere: centroid-centered with radius = margin (default 0.30 m).
    box: keypoint AABB expanded by margin per axis (default 0.10 m).
    """
    if mode == "sphere":
        m = SPHERE_MARGIN_DEFAULT if margin is None else float(margin)
        return Sphere(center=kp.centroid(), radius=m)
    if mode == "box":
        m = BOX_MARGIN_DEFAULT if margin is None else float(margin)
        return AxisAlignedBox(
            min_corner=kp.points.min(axis=0) - m,
            max_corner=kp.points.max(axis=0) + m,
        )
    raise InputValidationError(f"unknown proxy mode {mode!r} (want 'sphere' or 'box')")
