"""Spatial encodings of query points against sparse 3D keypoint anchors.

Six interchangeable variants, in ablation order: no encoding, absolute
camera-depth, canonical-frame xyz, keypoint-relative xyz, keypoint-relative
depth, and Gaussian-distance-weighted keypoint-relative depth. The weighted
relative-depth code for view n is the concatenation over keypoints k of

    exp(-||p_k - X||^2 / (2 alpha^2)) * gamma(z(p_k) - z(X))

where depths are taken in view n's camera frame and gamma is the sinusoidal
positional encoding. alpha localizes each keypoint's influence.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kpnf.errors import (
    EmptyKeypointSetError,
    InputValidationError,
    MissingCanonicalFrameError,
)
from kpnf.geometry import Camera, KeypointSet3D, camera_depth

# Kernel bandwidths (meters): tight for faces, wider for full-body skeletons.
ALPHA_FACE = 0.05
ALPHA_BODY = 0.10

DEFAULT_NUM_FREQUENCIES = 6


class EncodingVariant(enum.Enum):
    NONE = "none"
    CAMERA_Z = "camera_z"
    CANONICAL_XYZ = "canonical_xyz"
    RELATIVE_XYZ = "relative_xyz"
    RELATIVE_Z = "relative_z"
    WEIGHTED_RELATIVE_Z = "weighted_relative_z"


# Ablation-table order.
ALL_VARIANTS: tuple[EncodingVariant, ...] = (
    EncodingVariant.NONE,
    EncodingVariant.CAMERA_Z,
    EncodingVariant.CANONICAL_XYZ,
    EncodingVariant.RELATIVE_XYZ,
    EncodingVariant.RELATIVE_Z,
    EncodingVariant.WEIGHTED_RELATIVE_Z,
)

_KEYPOINT_VARIANTS = {
    EncodingVariant.RELATIVE_XYZ,
    EncodingVariant.RELATIVE_Z,
    EncodingVariant.WEIGHTED_RELATIVE_Z,
}


@dataclass(frozen=True)
class CanonicalFrame:
    """Rigid transform + scale mapping world to a subject-canonical frame."""

    rotation: np.ndarray  # 3x3
    translation: np.ndarray  # 3
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise InputValidationError("canonical frame rotation must be orthonormal")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InputValidationError("canonical frame scale must be positive and finite")

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points @ self.rotation.T + self.translation)


def canonical_frame_from_anchors(kp: KeypointSet3D, anchors: Sequence[int] = (0, 1, 2)) -> CanonicalFrame:
    """Canonical frame from three designated anchor keypoints.

    Origin at the first anchor, x-axis toward the second, the third fixes
    the xy-plane; unit scale.
    """
    if len(anchors) != 3:
        raise InputValidationError("need exactly three anchor indices")
    if max(anchors) >= len(kp) or min(anchors) < 0:
        raise InputValidationError(f"anchor indices {anchors} out of range for K={len(kp)}")
    a0, a1, a2 = (kp.points[i] for i in anchors)
    ex = a1 - a0
    n = np.linalg.norm(ex)
    if n < 1e-12:
        raise InputValidationError("first two anchors coincide")
    ex = ex / n
    v2 = a2 - a0
    ey = v2 - (v2 @ ex) * ex
    n = np.linalg.norm(ey)
    if n < 1e-12:
        raise InputValidationError("anchor keypoints are collinear")
    ey = ey / n
    ez = np.cross(ex, ey)
    R = np.stack([ex, ey, ez], axis=0)
    return CanonicalFrame(rotation=R, translation=-R @ a0, scale=1.0)


@dataclass(frozen=True)
class EncodingConfig:
    variant: EncodingVariant = EncodingVariant.WEIGHTED_RELATIVE_Z
    alpha: float = ALPHA_FACE
    num_frequencies: int = DEFAULT_NUM_FREQUENCIES
    canonical_frame: CanonicalFrame | None = None

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise InputValidationError("num_frequencies must be >= 1")
        if not self.alpha > 0:
            raise InputValidationError("alpha must be > 0 (inf allowed for the unweighted variant)")
        if math.isinf(self.alpha) and self.variant is EncodingVariant.WEIGHTED_RELATIVE_Z:
            # alpha -> inf degenerates the weighted variant into relative-z;
            # callers wanting that should ask for it explicitly
            raise InputValidationError("infinite alpha only valid for RELATIVE_Z")

    def code_length(self, num_keypoints: int) -> int:
        L2 = 2 * self.num_frequencies
        v = self.variant
        if v is EncodingVariant.NONE:
            return 0
        if v is EncodingVariant.CAMERA_Z:
            return L2
        if v is EncodingVariant.CANONICAL_XYZ:
            return 3 * L2
        if v is EncodingVariant.RELATIVE_XYZ:
            return num_keypoints * 3 * L2
        return num_keypoints * L2  # relative z, weighted or not


def positional_encode(x, num_frequencies: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features [sin(2^l pi x), cos(2^l pi x)] for l = 0..L-1.

    Appends a trailing axis of length 2L to the input shape; no raw
    (identity) term is included.
    """
    x = np.asarray(x, dtype=dtype)
    if num_frequencies < 1:
        raise InputValidationError("num_frequencies must be >= 1")
    freqs = ((2.0 ** np.arange(num_frequencies)) * np.pi).astype(dtype)
    angles = x[..., None] * freqs
    out = np.empty(x.shape + (2 * num_frequencies,), dtype=dtype)
    np.sin(angles, out=out[..., 0::2])
    np.cos(angles, out=out[..., 1::2])
    return out


def relative_depth(camera: Camera, p_k, X) -> float:
    """Camera-frame depth difference z(p_k) - z(X); translation-invariant."""
    return camera_depth(camera, p_k) - camera_depth(camera, X)


def keypoint_weights(kp: KeypointSet3D, points: np.ndarray, alpha: float) -> np.ndarray:
    """Gaussian proximity kernel exp(-l2(p_k, X)^2 / (2 alpha^2)), shape [M, K]."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d2 = np.sum((points[:, None, :] - kp.points[None, :, :]) ** 2, axis=2)
    if math.isinf(alpha):
        return np.ones_like(d2)
    return np.exp(-d2 / (2.0 * alpha * alpha))


def spatial_encode_batch(
    cfg: EncodingConfig,
    cameras: Sequence[Camera],
    kp: KeypointSet3D | None,
    points: np.ndarray,
    dtype=np.float64,
) -> np.ndarray:
    """Per-view spatial codes for a batch of query points: [N, M, code_length].

    View-independent variants (canonical xyz, relative xyz, none) replicate
    one code across views. Geometry stays float64; ``dtype`` selects the
    precision of the sinusoidal features (float32 for the training path).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    N, M = len(cameras), points.shape[0]
    v = cfg.variant
    L = cfg.num_frequencies

    if v in _KEYPOINT_VARIANTS and (kp is None or len(kp) == 0):
        raise EmptyKeypointSetError(f"{v.value} encoding needs K >= 1 keypoints")

    if v is EncodingVariant.NONE:
        return np.zeros((N, M, 0), dtype=dtype)

    if v is EncodingVariant.CAMERA_Z:
        depths = np.stack(
            [points @ cam.rotation[2] + cam.translation[2] for cam in cameras], axis=0
        )  # [N, M]
        return positional_encode(depths, L, dtype)  # [N, M, 2L]

    if v is EncodingVariant.CANONICAL_XYZ:
        if cfg.canonical_frame is None:
            raise MissingCanonicalFrameError("canonical_xyz encoding requires a canonical frame")
        canon = cfg.canonical_frame.to_canonical(points)  # [M, 3]
        code = positional_encode(canon, L, dtype).reshape(M, 3 * 2 * L)
        return np.broadcast_to(code, (N, M, 3 * 2 * L))

    if v is EncodingVariant.RELATIVE_XYZ:
        diff = kp.points[None, :, :] - points[:, None, :]  # [M, K, 3]
        code = positional_encode(diff, L, dtype).reshape(M, -1)  # [M, K*3*2L]
        return np.broadcast_to(code, (N, M, code.shape[1]))

    # relative depth variants
    zk = np.stack([kp.points @ cam.rotation[2] + cam.translation[2] for cam in cameras], axis=0)  # [N, K]
    zx = np.stack([points @ cam.rotation[2] + cam.translation[2] for cam in cameras], axis=0)  # [N, M]
    delta = zk[:, None, :] - zx[:, :, None]  # [N, M, K]
    gamma = positional_encode(delta, L, dtype)  # [N, M, K, 2L]
    if v is EncodingVariant.WEIGHTED_RELATIVE_Z:
        w = keypoint_weights(kp, points, cfg.alpha).astype(dtype)  # [M, K]
        gamma = gamma * w[None, :, :, None]
    return gamma.reshape(N, M, len(kp) * 2 * L)


def spatial_encode(
    cfg: EncodingConfig,
    cameras: Sequence[Camera],
    kp: KeypointSet3D | None,
    X,
) -> np.ndarray:
    """Spatial code of one query point: array [N, code_length], one row per view."""
    return spatial_encode_batch(cfg, cameras, kp, np.asarray(X, dtype=np.float64)[None, :])[:, 0, :]
