"""PSNR and SSIM reconstruction metrics over optionally masked images.

PSNR uses a 99 dB cap for exact matches so CSVs stay finite. SSIM follows
the standard formulation: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
K2 = 0.03, dynamic range 1.0, per-channel maps averaged over valid window
positions; windows containing no masked pixel are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from kpnf.errors import EmptyMaskError, InputValidationError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if a.shape != b.shape:
        raise InputValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise InputValidationError(f"expected [H,W,3] images, got {a.shape}")
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != a.shape[:2]:
        raise InputValidationError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    if not mask.any():
        raise EmptyMaskError("metric mask selects no pixels")
    return mask


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) over masked pixels and channels; 99 dB when MSE = 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = _check_pair(a, b, mask)
    diff = (a - b)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode correlation of a [H, W] map."""
    rows = sliding_window_view(img, len(kernel), axis=1) @ kernel
    cols = sliding_window_view(rows, len(kernel), axis=0)
    return cols @ kernel


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Structural similarity in [-1, 1]; 1.0 iff the images agree on the mask."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = _check_pair(a, b, mask)
    H, W = a.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise InputValidationError(f"image {H}x{W} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")

    kernel = gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    # window positions whose support contains at least one masked pixel
    counts = sliding_window_view(mask.astype(np.float64), (SSIM_WINDOW, SSIM_WINDOW)).sum(axis=(2, 3))
    keep = counts > 0
    if not keep.any():
        raise EmptyMaskError("no SSIM window overlaps the mask")

    channel_means = []
    for ch in range(3):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = _filter_valid(x * x, kernel) - mu_x * mu_x
        var_y = _filter_valid(y * y, kernel) - mu_y * mu_y
        cov = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        channel_means.append(float(np.mean((num / den)[keep])))
    return float(np.mean(channel_means))


@dataclass
class ImageMetrics:
    name: str
    psnr_db: float
    ssim: float
    mask_coverage: float


@dataclass
class MetricReport:
    """Per-image scores plus aggregates, ready for CSV serialization."""

    images: list[ImageMetrics] = field(default_factory=list)

    def add(self, name: str, a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> ImageMetrics:
        coverage = 1.0 if mask is None else float(np.mean(np.asarray(mask, dtype=bool)))
        m = ImageMetrics(name=name, psnr_db=psnr(a, b, mask), ssim=ssim(a, b, mask), mask_coverage=coverage)
        self.images.append(m)
        return m

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([m.psnr_db for m in self.images])) if self.images else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([m.ssim for m in self.images])) if self.images else float("nan")

    def csv_rows(self) -> list[list[str]]:
        header = ["image", "psnr_db", "ssim", "mask_coverage"]
        rows = [header]
        for m in self.images:
            rows.append([m.name, f"{m.psnr_db:.6f}", f"{m.ssim:.8f}", f"{m.mask_coverage:.6f}"])
        rows.append(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.8f}", ""])
        return rows


def foreground_mask(rendered_alpha: np.ndarray, gt_image: np.ndarray, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Evaluation mask: rendered alpha > 0.5 union ground-truth foreground.

    Ground-truth foreground = pixels that differ from the background color
    by more than one 8-bit quantization step.
    """
    bg = np.asarray(background, dtype=np.float64)
    gt_fg = np.abs(np.asarray(gt_image) - bg).max(axis=2) > (1.5 / 255.0)
    return (np.asarray(rendered_alpha) > 0.5) | gt_fg
