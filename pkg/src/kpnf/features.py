"""Convolutional image encoders and pixel-aligned feature sampling.

Two independent encoders per view:

* geometry: a strided stem plus one hourglass stage (down/up with skip),
  emitting a deep map F_gl [H/8, W/8, 64] and, branched off the second stem
  block through a transposed convolution, a shallow map F_gh [H/2, W/2, 8].
  Conditions density prediction.
* appearance: a residual conv net emitting F_a [H/4, W/4, 8]; a color-only
  pathway that shares nothing with the geometry branch.

Desk-scale capacity: 32-filter blocks and a rate-2 hourglass (the output
channel contract (64, 8, 8) is unchanged). Output heads are zero-initialized
so a zero image maps to zero features and early training is stable.

Feature cell (i, j) of a grid with scale s = H_img / H_grid sits at pixel
((j + 0.5) * s, (i + 0.5) * s); sampling converts pixel -> grid coordinates
accordingly before bilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kpnf import diffcore as dc
from kpnf.diffcore import DiffNode
from kpnf.errors import ShapeMismatchError
from kpnf.geometry import Camera, project_many
from kpnf.layers import (
    ParamDict,
    conv,
    group_norm,
    init_conv,
    init_group_norm,
)

GEO_CHANNELS = 32
APP_CHANNELS = 32
F_GL_CHANNELS = 64
F_GH_CHANNELS = 8
F_A_CHANNELS = 8
GN_GROUPS = 8


@dataclass
class FeaturePyramid:
    """Per-view feature grids plus the source image geometry for sampling."""

    f_gl: DiffNode  # [H/8, W/8, 64]
    f_gh: DiffNode  # [H/2, W/2, 8]
    f_a: DiffNode  # [H/4, W/4, 8]
    image_width: int
    image_height: int

    def __post_init__(self):
        H, W = self.image_height, self.image_width
        if self.f_gl.shape != (H // 8, W // 8, F_GL_CHANNELS):
            raise ShapeMismatchError(f"F_gl shape {self.f_gl.shape} != {(H // 8, W // 8, F_GL_CHANNELS)}")
        if self.f_gh.shape != (H // 2, W // 2, F_GH_CHANNELS):
            raise ShapeMismatchError(f"F_gh shape {self.f_gh.shape} != {(H // 2, W // 2, F_GH_CHANNELS)}")
        if self.f_a.shape != (H // 4, W // 4, F_A_CHANNELS):
            raise ShapeMismatchError(f"F_a shape {self.f_a.shape} != {(H // 4, W // 4, F_A_CHANNELS)}")


# --- geometry encoder ---------------------------------------------------------


def init_geometry_encoder(rng: np.random.Generator, dtype=np.float64) -> ParamDict:
    """Parameters for the hourglass geometry encoder, names prefixed 'geo.'."""
    p: ParamDict = {}
    c = GEO_CHANNELS

    def block(name, cin, cout):
        init_conv(p, name, rng, 3, 3, cin, cout, dtype, bias=False)
        init_group_norm(p, name + ".gn", cout, dtype)

    block("geo.stem1", 3, c)  # stride 2 -> H/2
    block("geo.stem2", c, c)  # stride 2 -> H/4
    block("geo.stem3", c, c)
    block("geo.stem4", c, c)
    # shallow high-res branch off stem2: H/4 -> H/2
    init_conv(p, "geo.gh_head", rng, 4, 4, c, F_GH_CHANNELS, dtype, zero=True, bias=True)
    # hourglass stage: H/4 -> H/8 -> H/4 with skip
    block("geo.hg_down", c, c)  # stride 2
    block("geo.hg_bottom", c, c)
    init_conv(p, "geo.hg_up", rng, 4, 4, c, c, dtype, bias=False)  # transposed, H/8 -> H/4
    init_group_norm(p, "geo.hg_up.gn", c, dtype)
    # refine back to H/8 and widen to the deep channel count
    block("geo.refine", c, F_GL_CHANNELS)  # stride 2
    init_conv(p, "geo.gl_head", rng, 3, 3, F_GL_CHANNELS, F_GL_CHANNELS, dtype, zero=True, bias=True)
    return p


def encode_geometry(params: ParamDict, image: DiffNode | np.ndarray) -> tuple[DiffNode, DiffNode]:
    """Image (in [-1, 1], dims divisible by 8) -> (F_gl [H/8,.,64], F_gh [H/2,.,8])."""
    x = dc.as_node(image, dtype=params["geo.stem1.w"].dtype)
    H, W, _ = x.shape
    if H % 8 or W % 8:
        raise ShapeMismatchError(f"geometry encoder needs dims divisible by 8, got {H}x{W}")

    def block(name, t, stride):
        t = conv(params, name, t, stride=stride, padding=1)
        t = group_norm(params, name + ".gn", t, groups=GN_GROUPS)
        return dc.relu(t)

    h2 = block("geo.stem1", x, 2)
    h4 = block("geo.stem2", h2, 2)
    f_gh = dc.add(
        dc.transposed_conv2d(h4, params["geo.gh_head.w"], stride=2, padding=1),
        params["geo.gh_head.b"],
    )
    h4 = block("geo.stem3", h4, 1)
    h4 = block("geo.stem4", h4, 1)

    h8 = block("geo.hg_down", h4, 2)
    h8 = block("geo.hg_bottom", h8, 1)
    up = dc.transposed_conv2d(h8, params["geo.hg_up.w"], stride=2, padding=1)
    up = group_norm(params, "geo.hg_up.gn", up, groups=GN_GROUPS)
    h4 = dc.relu(dc.add(up, h4))

    deep = block("geo.refine", h4, 2)
    f_gl = dc.add(conv(params, "geo.gl_head", deep, stride=1, padding=1), params["geo.gl_head.b"])
    return f_gl, f_gh


# --- appearance encoder ---------------------------------------------------------


def init_appearance_encoder(rng: np.random.Generator, dtype=np.float64) -> ParamDict:
    """Parameters for the residual appearance encoder, names prefixed 'app.'."""
    p: ParamDict = {}
    c = APP_CHANNELS
    init_conv(p, "app.stem1", rng, 3, 3, 3, c, dtype)
    init_conv(p, "app.stem2", rng, 3, 3, c, c, dtype)
    for r in (1, 2, 3):
        init_conv(p, f"app.res{r}a", rng, 3, 3, c, c, dtype)
        init_conv(p, f"app.res{r}b", rng, 3, 3, c, c, dtype)
    init_conv(p, "app.head", rng, 3, 3, c, F_A_CHANNELS, dtype, zero=True)
    return p


def encode_appearance(params: ParamDict, image: DiffNode | np.ndarray) -> DiffNode:
    """Image (in [-1, 1], dims divisible by 4) -> F_a [H/4, W/4, 8]."""
    x = dc.as_node(image, dtype=params["app.stem1.w"].dtype)
    H, W, _ = x.shape
    if H % 4 or W % 4:
        raise ShapeMismatchError(f"appearance encoder needs dims divisible by 4, got {H}x{W}")
    t = dc.relu(conv(params, "app.stem1", x, stride=2, padding=1))
    t = dc.relu(conv(params, "app.stem2", t, stride=2, padding=1))
    for r in (1, 2, 3):
        inner = dc.relu(conv(params, f"app.res{r}a", t, stride=1, padding=1))
        inner = conv(params, f"app.res{r}b", inner, stride=1, padding=1)
        t = dc.relu(dc.add(t, inner))
    return conv(params, "app.head", t, stride=1, padding=1)


def build_pyramid(params: ParamDict, image_pm1: DiffNode | np.ndarray) -> FeaturePyramid:
    """Run both encoders on one [-1, 1]-normalized view."""
    arr = image_pm1.values if isinstance(image_pm1, DiffNode) else np.asarray(image_pm1)
    H, W, _ = arr.shape
    f_gl, f_gh = encode_geometry(params, image_pm1)
    f_a = encode_appearance(params, image_pm1)
    return FeaturePyramid(f_gl=f_gl, f_gh=f_gh, f_a=f_a, image_width=W, image_height=H)


# --- pixel-aligned sampling ---------------------------------------------------


def pixel_to_grid(uv: np.ndarray, image_wh: tuple[int, int], grid_hw: tuple[int, int]) -> np.ndarray:
    """Pixel (u, v) -> fractional grid (row, col) under the cell-center convention."""
    W, H = image_wh
    gh, gw = grid_hw
    col = uv[:, 0] * (gw / W) - 0.5
    row = uv[:, 1] * (gh / H) - 0.5
    return np.stack([row, col], axis=1)


def sample_pixel_aligned_batch(
    grid: DiffNode,
    camera: Camera,
    points: np.ndarray,
    image_wh: tuple[int, int] | None = None,
) -> tuple[DiffNode, np.ndarray]:
    """Project points into the view and bilinearly sample the grid.

    Returns ([M, C] features, [M] validity). Behind-camera or out-of-grid
    points yield zero features and valid=False. ``image_wh`` defaults to the
    camera's pixel dimensions (pass it when sampling grids built for a
    different resolution).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    wh = image_wh if image_wh is not None else (camera.width, camera.height)
    gh, gw = grid.shape[0], grid.shape[1]
    uv, _, in_front = project_many(camera, points)
    rc = pixel_to_grid(uv, wh, (gh, gw))
    rc[~in_front] = -1.0  # forces the out-of-bounds zero path
    feats = dc.bilinear_sample(grid, rc)
    valid = in_front & (rc[:, 0] >= 0) & (rc[:, 0] <= gh - 1) & (rc[:, 1] >= 0) & (rc[:, 1] <= gw - 1)
    return feats, valid


def sample_pixel_aligned(
    grid: DiffNode,
    camera: Camera,
    X,
    image_wh: tuple[int, int] | None = None,
) -> tuple[DiffNode, bool]:
    """Single-point pixel-aligned feature: ([C] vector, validity flag)."""
    feats, valid = sample_pixel_aligned_batch(grid, camera, np.asarray(X, dtype=np.float64)[None, :], image_wh)
    return dc.reshape(feats, (grid.shape[2],)), bool(valid[0])
