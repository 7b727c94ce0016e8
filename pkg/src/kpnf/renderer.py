"""Volume rendering: ray sampling and differentiable quadrature compositing.

Rays are bounded by proxy entrance/exit; the coarse pass draws stratified
(or deterministic midpoint) depths, the fine pass inverse-CDF samples the
coarse quadrature weights and re-evaluates the merged union with the same
field weights. Compositing uses the standard discretization

    tau_i = sigma_i * delta_i
    T_i   = exp(-sum_{j<i} tau_j)      alpha_i = 1 - exp(-tau_i)
    C     = sum_i T_i alpha_i c_i + T_final * background

which is exact for piecewise-constant fields aligned with the segments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from kpnf import diffcore as dc
from kpnf.diffcore import DiffNode
from kpnf.errors import InputValidationError
from kpnf.geometry import ProxyShape, Ray, intersect_proxy_batch

# field callback: (points [M,3], dirs [M,3]) -> (colors [M,3], sigmas [M]),
# either DiffNodes (trainable fields) or plain arrays (analytic fields)
FieldFn = Callable[[np.ndarray, np.ndarray], tuple]


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sampling: str = "stratified"  # or "midpoint"
    chunk_rays: int = 1024
    clip_dot: float | None = None

    def __post_init__(self):
        if self.n_coarse < 1:
            raise InputValidationError("n_coarse must be >= 1")
        if self.n_fine < 0:
            raise InputValidationError("n_fine must be >= 0")
        if self.sampling not in ("stratified", "midpoint"):
            raise InputValidationError(f"unknown sampling mode {self.sampling!r}")


@dataclass(frozen=True)
class SampleBatch:
    """One ray's sorted sample depths with field values at each depth."""

    depths: np.ndarray  # [S], strictly increasing within [t_near, t_far]
    colors: np.ndarray  # [S, 3]
    sigmas: np.ndarray  # [S]
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64)
        object.__setattr__(self, "depths", d)
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.float64))
        object.__setattr__(self, "sigmas", np.asarray(self.sigmas, dtype=np.float64))
        if d.ndim != 1 or len(d) < 1:
            raise InputValidationError("SampleBatch needs at least one depth")
        if np.any(np.diff(d) <= 0):
            raise InputValidationError("sample depths must be strictly increasing")
        if d[-1] > self.t_far:
            raise InputValidationError("samples extend past t_far")
        if self.colors.shape != (len(d), 3) or self.sigmas.shape != (len(d),):
            raise InputValidationError("colors/sigmas must align with depths")

    @property
    def deltas(self) -> np.ndarray:
        return np.append(np.diff(self.depths), self.t_far - self.depths[-1])


@dataclass(frozen=True)
class RenderedPixel:
    rgb: np.ndarray  # [3] in [0, 1] against the given background
    alpha: float  # 1 - final transmittance
    expected_depth: float


@dataclass
class RenderResult:
    image: np.ndarray  # [H, W, 3]
    alpha: np.ndarray  # [H, W]
    depth: np.ndarray  # [H, W]


# --- depth sampling -------------------------------------------------------------


def sample_coarse_batch(
    t_near: np.ndarray,
    t_far: np.ndarray,
    n: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """[R, n] stratified depths (one uniform draw per equal bin), or bin
    midpoints when rng is None."""
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if np.any(t_far <= t_near):
        raise InputValidationError("rays must be bounded with t_near < t_far")
    R = t_near.shape[0]
    width = (t_far - t_near)[:, None] / n
    starts = t_near[:, None] + width * np.arange(n)
    u = rng.uniform(size=(R, n)) if rng is not None else 0.5
    return starts + width * u


def sample_coarse(ray: Ray, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Coarse depths for a single bounded ray; midpoint mode when rng is None."""
    if not ray.bounded:
        raise InputValidationError("cannot sample an unbounded ray")
    return sample_coarse_batch(np.array([ray.t_near]), np.array([ray.t_far]), n, rng)[0]


def sample_fine_batch(
    depths: np.ndarray,
    weights: np.ndarray,
    t_near: np.ndarray,
    t_far: np.ndarray,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant per-segment weight PDF.

    Segment i spans [depths_i, depths_{i+1}) (last: to t_far) with mass
    proportional to the coarse quadrature weight of sample i. Rays whose
    weights all (near-)vanish fall back to stratified sampling over
    [t_near, t_far]. Returns the fine depths merged and sorted with the
    coarse ones: [R, S + n].
    """
    depths = np.asarray(depths, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != depths.shape:
        raise InputValidationError("weights must align with coarse depths")
    if np.any(weights < -1e-12):
        raise InputValidationError("quadrature weights must be non-negative")
    weights = np.maximum(weights, 0.0)
    R, S = depths.shape

    starts = depths
    ends = np.concatenate([depths[:, 1:], np.asarray(t_far, dtype=np.float64)[:, None]], axis=1)
    seg_len = ends - starts

    total = weights.sum(axis=1)
    degenerate = total < 1e-12
    safe_total = np.where(degenerate, 1.0, total)
    cdf = np.cumsum(weights, axis=1) / safe_total[:, None]
    cdf[:, -1] = 1.0

    u = rng.uniform(size=(R, n))
    # row-offset trick: make the concatenated cdf globally monotone
    offsets = 2.0 * np.arange(R)[:, None]
    idx = np.searchsorted((cdf + offsets).ravel(), (u + offsets).ravel(), side="left")
    idx = (idx - np.repeat(np.arange(R), n) * S).clip(0, S - 1).reshape(R, n)

    rows = np.repeat(np.arange(R)[:, None], n, axis=1)
    cdf_lo = np.concatenate([np.zeros((R, 1)), cdf[:, :-1]], axis=1)
    mass = np.maximum(cdf[rows, idx] - cdf_lo[rows, idx], 1e-12)
    frac = (u - cdf_lo[rows, idx]) / mass
    fine = starts[rows, idx] + frac * seg_len[rows, idx]

    if np.any(degenerate):
        fallback = sample_coarse_batch(np.asarray(t_near)[degenerate], np.asarray(t_far)[degenerate], n, rng)
        fine[degenerate] = fallback

    return np.sort(np.concatenate([depths, fine], axis=1), axis=1)


def sample_fine(
    ray: Ray,
    coarse_depths: np.ndarray,
    coarse_weights: np.ndarray,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Single-ray importance sampling; returns the merged sorted union."""
    return sample_fine_batch(
        np.asarray(coarse_depths)[None, :],
        np.asarray(coarse_weights)[None, :],
        np.array([ray.t_near]),
        np.array([ray.t_far]),
        n,
        rng,
    )[0]


# --- compositing -----------------------------------------------------------------


@dataclass
class CompositeRays:
    rgb: DiffNode  # [R, 3]
    alpha: DiffNode  # [R]
    weights: DiffNode  # [R, S] quadrature weights T_i alpha_i
    expected_depth: np.ndarray  # [R], diagnostic (not differentiated)


def composite_rays(
    depths: np.ndarray,
    t_far: np.ndarray,
    colors,
    sigmas,
    background=(0.0, 0.0, 0.0),
) -> CompositeRays:
    """Quadrature-composite a batch of rays; differentiable in colors/sigmas.

    depths [R, S] (sorted), t_far [R]; colors [R, S, 3] and sigmas [R, S]
    as DiffNodes or arrays. The final segment length is t_far - t_S.
    """
    depths = np.asarray(depths, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    R, S = depths.shape
    colors = dc.as_node(colors) if not isinstance(colors, DiffNode) else colors
    sigmas = dc.as_node(sigmas) if not isinstance(sigmas, DiffNode) else sigmas
    dtype = sigmas.dtype

    deltas = np.concatenate([np.diff(depths, axis=1), (t_far[:, None] - depths[:, -1:])], axis=1)
    if np.any(deltas < 0):
        raise InputValidationError("depths must be sorted and within t_far")

    tau = dc.multiply(sigmas, dc.constant(deltas, dtype=dtype))  # [R, S]
    transmittance = dc.exp(dc.negate(dc.cumsum(tau, axis=1, exclusive=True)))
    alpha_i = dc.subtract(1.0, dc.exp(dc.negate(tau)))
    weights = dc.multiply(transmittance, alpha_i)  # [R, S]

    t_final = dc.exp(dc.negate(dc.sum_reduce(tau, axis=1)))  # [R]
    alpha = dc.subtract(1.0, t_final)

    rgb = dc.sum_reduce(dc.multiply(dc.reshape(weights, (R, S, 1)), colors), axis=1)
    bg = np.asarray(background, dtype=np.float64)
    rgb = dc.add(rgb, dc.multiply(dc.reshape(t_final, (R, 1)), dc.constant(bg[None, :], dtype=dtype)))

    w = weights.values
    expected_depth = (w * depths).sum(axis=1) / np.maximum(alpha.values, 1e-8)
    return CompositeRays(rgb=rgb, alpha=alpha, weights=weights, expected_depth=expected_depth)


def composite(samples: SampleBatch, background=(0.0, 0.0, 0.0)) -> RenderedPixel:
    """Single-ray convenience wrapper over composite_rays."""
    result = composite_rays(
        samples.depths[None, :],
        np.array([samples.t_far]),
        samples.colors[None, :, :],
        samples.sigmas[None, :],
        background,
    )
    return RenderedPixel(
        rgb=result.rgb.values[0].astype(np.float64),
        alpha=float(result.alpha.values[0]),
        expected_depth=float(result.expected_depth[0]),
    )


# --- ray-batch and image rendering ---------------------------------------------


def render_rays(
    field: FieldFn,
    origin: np.ndarray,
    dirs: np.ndarray,
    t_near: np.ndarray,
    t_far: np.ndarray,
    config: RenderConfig,
    rng: np.random.Generator | None = None,
) -> CompositeRays:
    """Coarse (+ optional fine) render of a shared-origin ray bundle.

    The coarse pass runs gradient-free to score segments; the merged union
    is re-evaluated once with gradients flowing (same field weights).
    Stratified sampling requires an rng; midpoint mode ignores it.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    sampler_rng = None if config.sampling == "midpoint" else rng
    if config.sampling == "stratified" and rng is None:
        raise InputValidationError("stratified sampling needs an rng")

    depths = sample_coarse_batch(t_near, t_far, config.n_coarse, sampler_rng)

    if config.n_fine > 0:
        if rng is None:
            raise InputValidationError("fine sampling needs an rng")
        with dc.no_grad():
            coarse = _evaluate_and_composite(field, origin, dirs, depths, t_far, config)
        depths = sample_fine_batch(depths, coarse.weights.values, t_near, t_far, config.n_fine, rng)

    return _evaluate_and_composite(field, origin, dirs, depths, t_far, config)


def _evaluate_and_composite(field, origin, dirs, depths, t_far, config) -> CompositeRays:
    R, S = depths.shape
    points = origin[None, None, :] + depths[:, :, None] * dirs[:, None, :]
    dirs_flat = np.repeat(dirs, S, axis=0)
    c, sigma = field(points.reshape(R * S, 3), dirs_flat)
    colors = dc.reshape(c if isinstance(c, DiffNode) else dc.as_node(c), (R, S, 3))
    sigmas = dc.reshape(sigma if isinstance(sigma, DiffNode) else dc.as_node(sigma), (R, S))
    return composite_rays(depths, t_far, colors, sigmas, config.background)


def render_image(
    field: FieldFn,
    camera,
    proxy: ProxyShape,
    config: RenderConfig,
    rng: np.random.Generator | None = None,
) -> RenderResult:
    """Render a full view: per pixel, proxy-bounded ray, coarse+fine, composite.

    Rays that miss the proxy get the background color with alpha 0. Runs
    gradient-free; chunked to bound memory.
    """
    from kpnf.geometry import generate_ray_grid

    H, W = camera.height, camera.width
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pixels = np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=1)
    origin, dirs = generate_ray_grid(camera, pixels)
    t_near, t_far, hit = intersect_proxy_batch(origin, dirs, proxy)

    image = np.empty((H * W, 3), dtype=np.float64)
    image[:] = np.asarray(config.background, dtype=np.float64)
    alpha = np.zeros(H * W)
    depth = np.zeros(H * W)

    hit_idx = np.flatnonzero(hit)
    with dc.no_grad():
        for lo in range(0, len(hit_idx), config.chunk_rays):
            sel = hit_idx[lo : lo + config.chunk_rays]
            out = render_rays(field, origin, dirs[sel], t_near[sel], t_far[sel], config, rng)
            image[sel] = out.rgb.values
            alpha[sel] = out.alpha.values
            depth[sel] = out.expected_depth

    return RenderResult(
        image=image.reshape(H, W, 3),
        alpha=alpha.reshape(H, W),
        depth=depth.reshape(H, W),
    )
