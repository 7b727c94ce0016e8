"""The radiance field: multi-view fusion, density head, view-blended color.

Per query point X, every input view contributes a spatial code plus
pixel-aligned feature samples. A staged four-layer MLP (128/136/120/64,
softplus) turns each view's code + deep feature + shallow feature into a
64-d vector; mean/variance pooling over views yields the 128-d geometry
feature. Density is a four-layer softplus MLP on that feature. Color is
image-based: a nine-layer residual ELU MLP scores one blending logit per
view, and the output color is the softmax-weighted combination of the
views' sampled pixel colors — always a convex combination, hence bounded
by the inputs.

Both pooling stages are symmetric in the views, so (c, sigma) is exactly
invariant under any permutation of the input views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kpnf import diffcore as dc
from kpnf.diffcore import DiffNode
from kpnf.encoding import EncodingConfig, EncodingVariant, canonical_frame_from_anchors, spatial_encode_batch
from kpnf.errors import InputValidationError, ShapeMismatchError
from kpnf.features import FeaturePyramid, build_pyramid
from kpnf.geometry import Camera, KeypointSet3D
from kpnf.imageio import normalize_for_encoder
from kpnf.layers import ParamDict, init_linear, linear

GEOMETRY_FEATURE_DIM = 128
PER_VIEW_FEATURE_DIM = 64
COLOR_INPUT_DIM = GEOMETRY_FEATURE_DIM + 8 + 3 + 4  # G_X + F_a sample + rgb + view-direction code
DOT_PRODUCT_CLIP = 0.8


@dataclass(frozen=True)
class RadianceOutput:
    """Color/density of one query: c in [0,1]^3 (convex in view colors), sigma >= 0."""

    c: np.ndarray
    sigma: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64).reshape(3)
        object.__setattr__(self, "c", c)
        if not (np.all(c >= -1e-9) and np.all(c <= 1 + 1e-9)):
            raise InputValidationError(f"color {c} outside [0,1]")
        if self.sigma < 0:
            raise InputValidationError(f"sigma {self.sigma} negative")


def init_radiance_mlps(rng: np.random.Generator, spatial_code_dim: int, dtype=np.float64) -> ParamDict:
    """Fusion, density, and color-head parameters for one encoding layout."""
    p: ParamDict = {}
    init_linear(p, "fusion.l1", rng, spatial_code_dim, 128, dtype)
    init_linear(p, "fusion.l2", rng, 128 + 64, 136, dtype)
    init_linear(p, "fusion.l3", rng, 136, 120, dtype)
    init_linear(p, "fusion.l4", rng, 120 + 8, PER_VIEW_FEATURE_DIM, dtype)
    init_linear(p, "density.l1", rng, GEOMETRY_FEATURE_DIM, 64, dtype)
    init_linear(p, "density.l2", rng, 64, 64, dtype)
    init_linear(p, "density.l3", rng, 64, 64, dtype)
    init_linear(p, "density.l4", rng, 64, 1, dtype, zero=True)
    init_linear(p, "color.l1", rng, 3 * COLOR_INPUT_DIM, 64, dtype)
    for i in range(2, 9):
        init_linear(p, f"color.l{i}", rng, 64, 64, dtype)
    init_linear(p, "color.l9", rng, 64, 1, dtype, zero=True)
    return p


def fuse_views(
    params: ParamDict,
    spatial_codes: np.ndarray,
    f_gl_samples: list[DiffNode],
    f_gh_samples: list[DiffNode],
) -> DiffNode:
    """Blend per-view codes and pixel-aligned features into G_X [M, 128].

    spatial_codes: [N, M, Ds]; f_gl_samples / f_gh_samples: N nodes of
    [M, 64] / [M, 8]. The per-view 64-d outputs are mean/variance pooled
    over views (variance half is zero for N = 1).
    """
    N = spatial_codes.shape[0]
    if N == 0 or len(f_gl_samples) != N or len(f_gh_samples) != N:
        raise ShapeMismatchError(f"view counts disagree: codes {N}, f_gl {len(f_gl_samples)}, f_gh {len(f_gh_samples)}")
    M = spatial_codes.shape[1]
    dtype = f_gl_samples[0].dtype

    codes = dc.constant(spatial_codes.reshape(N * M, -1), dtype=dtype)
    f_gl = dc.concat(f_gl_samples, axis=0) if N > 1 else f_gl_samples[0]
    f_gh = dc.concat(f_gh_samples, axis=0) if N > 1 else f_gh_samples[0]

    h = dc.softplus(linear(params, "fusion.l1", codes))
    h = dc.softplus(linear(params, "fusion.l2", dc.concat([h, f_gl], axis=1)))
    h = dc.softplus(linear(params, "fusion.l3", h))
    h = dc.softplus(linear(params, "fusion.l4", dc.concat([h, f_gh], axis=1)))

    per_view = dc.reshape(h, (N, M, PER_VIEW_FEATURE_DIM))
    mean = dc.mean_reduce(per_view, axis=0)
    var = dc.variance_reduce(per_view, axis=0)
    return dc.concat([mean, var], axis=1)


def density(params: ParamDict, g_x: DiffNode) -> DiffNode:
    """sigma [M] = softplus(four-layer MLP on the geometry feature)."""
    h = dc.softplus(linear(params, "density.l1", g_x))
    h = dc.softplus(linear(params, "density.l2", h))
    h = dc.softplus(linear(params, "density.l3", h))
    out = linear(params, "density.l4", h)
    return dc.reshape(dc.softplus(out), (g_x.shape[0],))


def view_direction_features(
    d: np.ndarray,
    cameras: list[Camera],
    points: np.ndarray,
    clip: float | None = None,
) -> np.ndarray:
    """Per-view direction code [N, M, 4]: (d - v_n, d . v_n), dot optionally clipped.

    v_n is the unit vector from camera n's center to the query point.
    ``clip`` caps the dot product (inference smoothing for two-view input).
    """
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InputValidationError("view directions must be unit length (1e-6)")
    feats = np.empty((len(cameras), points.shape[0], 4))
    for n, cam in enumerate(cameras):
        v = points - cam.center
        v_norm = np.linalg.norm(v, axis=1, keepdims=True)
        v = v / np.maximum(v_norm, 1e-12)
        dot = np.sum(d * v, axis=1)
        if clip is not None:
            dot = np.minimum(dot, clip)
        feats[n, :, :3] = d - v
        feats[n, :, 3] = dot
    return feats


def blend_color(
    params: ParamDict,
    g_x: DiffNode,
    f_a_samples: list[DiffNode],
    pixel_colors: np.ndarray,
    view_feats: np.ndarray,
) -> tuple[DiffNode, DiffNode]:
    """Softmax-blend the views' pixel colors: returns (c [M, 3], logits [N, M]).

    Per-view inputs (G_X, F_a sample, color, direction code) are augmented
    with their mean/variance over views and scored by the shared nine-layer
    residual MLP; c = sum_n softmax(w)_n * color_n per the blending rule.
    """
    N = len(f_a_samples)
    if N == 0:
        raise ShapeMismatchError("blend_color needs at least one view")
    M = g_x.shape[0]
    dtype = g_x.dtype
    if pixel_colors.shape != (N, M, 3) or view_feats.shape != (N, M, 4):
        raise ShapeMismatchError(
            f"expected colors [N,M,3]={N, M, 3} and view feats [N,M,4], got {pixel_colors.shape}, {view_feats.shape}"
        )

    g_tiled = dc.reshape(
        dc.broadcast(dc.reshape(g_x, (1, M, GEOMETRY_FEATURE_DIM)), (N, M, GEOMETRY_FEATURE_DIM)),
        (N * M, GEOMETRY_FEATURE_DIM),
    )
    f_a = dc.concat(f_a_samples, axis=0) if N > 1 else f_a_samples[0]
    colors = dc.constant(pixel_colors.reshape(N * M, 3), dtype=dtype)
    dirs = dc.constant(view_feats.reshape(N * M, 4), dtype=dtype)

    u = dc.concat([g_tiled, f_a, colors, dirs], axis=1)  # [N*M, 143]
    u3 = dc.reshape(u, (N, M, COLOR_INPUT_DIM))
    pooled = dc.concat([dc.mean_reduce(u3, axis=0), dc.variance_reduce(u3, axis=0)], axis=1)  # [M, 286]
    pooled_tiled = dc.reshape(
        dc.broadcast(dc.reshape(pooled, (1, M, 2 * COLOR_INPUT_DIM)), (N, M, 2 * COLOR_INPUT_DIM)),
        (N * M, 2 * COLOR_INPUT_DIM),
    )
    h = dc.elu(linear(params, "color.l1", dc.concat([u, pooled_tiled], axis=1)))
    for i in (2, 4, 6):
        t = dc.elu(linear(params, f"color.l{i}", h))
        t = linear(params, f"color.l{i + 1}", t)
        h = dc.elu(dc.add(h, t))
    h = dc.elu(linear(params, "color.l8", h))
    logits = dc.reshape(linear(params, "color.l9", h), (N, M))

    weights = dc.softmax(logits, axis=0)
    weighted = dc.multiply(dc.reshape(weights, (N, M, 1)), dc.reshape(colors, (N, M, 3)))
    c = dc.sum_reduce(weighted, axis=0)
    return c, logits


# --- full field assembly ------------------------------------------------------


@dataclass
class RadianceInputs:
    """One scene's conditioning data: calibrated views plus keypoints."""

    cameras: list[Camera]
    images01: list[np.ndarray]
    keypoints: KeypointSet3D | None
    encoding: EncodingConfig

    def __post_init__(self):
        if len(self.cameras) != len(self.images01):
            raise ShapeMismatchError("cameras and images must align")
        if not self.cameras:
            raise InputValidationError("need at least one input view")
        for cam, img in zip(self.cameras, self.images01):
            if img.shape[:2] != (cam.height, cam.width):
                raise ShapeMismatchError(f"image {img.shape} does not match camera {cam.height}x{cam.width}")


def resolve_encoding(cfg: EncodingConfig, kp: KeypointSet3D | None) -> EncodingConfig:
    """Fill in the canonical frame from keypoint anchors when needed.

    The frame is re-derived from whatever keypoints the scene carries, so
    keypoint noise propagates into the canonical encoding the way it would
    through an estimated template fit.
    """
    if cfg.variant is EncodingVariant.CANONICAL_XYZ and cfg.canonical_frame is None:
        if kp is None or len(kp) < 3:
            raise InputValidationError("canonical encoding needs >= 3 keypoints to derive a frame")
        return EncodingConfig(
            variant=cfg.variant,
            alpha=cfg.alpha,
            num_frequencies=cfg.num_frequencies,
            canonical_frame=canonical_frame_from_anchors(kp),
        )
    return cfg


class RadianceField:
    """Queryable field conditioned on one scene's input views.

    Construction runs both encoders on every view (differentiably, so one
    instance per training iteration); queries then share the pyramids.
    """

    def __init__(self, params: ParamDict, inputs: RadianceInputs, dtype=np.float64):
        self.params = params
        self.inputs = inputs
        self.dtype = dtype
        self.encoding = resolve_encoding(inputs.encoding, inputs.keypoints)
        self.pyramids: list[FeaturePyramid] = []
        self.image_nodes: list[DiffNode] = []
        for img in inputs.images01:
            self.pyramids.append(build_pyramid(params, normalize_for_encoder(img).astype(dtype)))
            self.image_nodes.append(dc.constant(img.astype(dtype), dtype=dtype))

    @property
    def cameras(self) -> list[Camera]:
        return self.inputs.cameras

    def query(
        self,
        points: np.ndarray,
        directions: np.ndarray,
        clip: float | None = None,
    ) -> tuple[DiffNode, DiffNode]:
        """Evaluate the field at [M, 3] points / directions -> (c [M, 3], sigma [M])."""
        from kpnf.features import sample_pixel_aligned_batch

        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        M = points.shape[0]
        cams = self.cameras
        N = len(cams)

        codes = spatial_encode_batch(self.encoding, cams, self.inputs.keypoints, points, dtype=self.dtype)
        f_gl_s, f_gh_s, f_a_s = [], [], []
        pixel_colors = np.empty((N, M, 3))
        for n, cam in enumerate(cams):
            pyr = self.pyramids[n]
            wh = (pyr.image_width, pyr.image_height)
            s_gl, _ = sample_pixel_aligned_batch(pyr.f_gl, cam, points, wh)
            s_gh, _ = sample_pixel_aligned_batch(pyr.f_gh, cam, points, wh)
            s_a, _ = sample_pixel_aligned_batch(pyr.f_a, cam, points, wh)
            s_rgb, _ = sample_pixel_aligned_batch(self.image_nodes[n], cam, points, wh)
            f_gl_s.append(s_gl)
            f_gh_s.append(s_gh)
            f_a_s.append(s_a)
            pixel_colors[n] = s_rgb.values
        g_x = fuse_views(self.params, codes, f_gl_s, f_gh_s)
        sigma = density(self.params, g_x)
        view_feats = view_direction_features(directions, cams, points, clip=clip)
        c, _ = blend_color(self.params, g_x, f_a_s, pixel_colors, view_feats)
        return c, sigma


def radiance_field(X, d, field: RadianceField, clip: float | None = None) -> RadianceOutput:
    """Single-point convenience wrapper over RadianceField.query."""
    with dc.no_grad():
        c, sigma = field.query(np.asarray(X, dtype=np.float64)[None, :], np.asarray(d, dtype=np.float64)[None, :], clip=clip)
    return RadianceOutput(c=c.values[0], sigma=float(sigma.values[0]))
