"""PSNR/SSIM unit cases, closed forms, and symmetry properties."""

import numpy as np
import pytest

from kpnf.errors import EmptyMaskError, InputValidationError
from kpnf.metrics import MetricReport, foreground_mask, psnr, ssim


def rand_image(rng, h=24, w=24):
    return rng.uniform(size=(h, w, 3))


class TestPSNR:
    def test_identical_images_hit_cap(self):
        rng = np.random.default_rng(0)
        a = rand_image(rng)
        assert psnr(a, a.copy()) == 99.0

    def test_uniform_difference(self):
        a = np.zeros((16, 16, 3))
        b = np.full((16, 16, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_single_channel_formula(self):
        """One channel of one pixel off by 0.5: PSNR = 10 log10(3n / 0.25)."""
        h = w = 16
        n = h * w
        a = np.full((h, w, 3), 0.25)
        b = a.copy()
        b[3, 7, 1] += 0.5
        expected = 10 * np.log10(3 * n / 0.25)
        assert psnr(a, b) == pytest.approx(expected, abs=1e-12)

    def test_masked(self):
        a = np.zeros((8, 8, 3))
        b = np.zeros((8, 8, 3))
        b[0, 0] = 1.0  # outside mask
        mask = np.ones((8, 8), dtype=bool)
        mask[0, 0] = False
        assert psnr(a, b, mask) == 99.0

    def test_empty_mask_rejected(self):
        a = np.zeros((8, 8, 3))
        with pytest.raises(EmptyMaskError):
            psnr(a, a, np.zeros((8, 8), dtype=bool))

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rand_image(rng), rand_image(rng)
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)


class TestSSIM:
    def test_identical_images_one(self):
        rng = np.random.default_rng(2)
        a = rand_image(rng)
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        """a = 0, b = 1: SSIM = C1 / (1 + C1), to 1e-9."""
        a = np.zeros((16, 16, 3))
        b = np.ones((16, 16, 3))
        c1 = 0.01**2
        assert ssim(a, b) == pytest.approx(c1 / (1 + c1), abs=1e-9)

    def test_noise_monotonicity(self):
        """SSIM strictly decreases with noise amplitude."""
        rng = np.random.default_rng(3)
        a = rand_image(rng, 32, 32) * 0.6 + 0.2
        noise = rng.normal(size=a.shape)
        values = [ssim(a, np.clip(a + amp * noise, 0, 1)) for amp in (0.01, 0.02, 0.05)]
        assert values[0] > values[1] > values[2]

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = rand_image(rng), rand_image(rng)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small_image_rejected(self):
        a = np.zeros((8, 8, 3))
        with pytest.raises(InputValidationError):
            ssim(a, a)

    def test_range(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            v = ssim(rand_image(rng), rand_image(rng))
            assert -1.0 <= v <= 1.0

    def test_identical_masking_invariance(self):
        """Identical masking applied to both images leaves metrics unchanged."""
        rng = np.random.default_rng(6)
        a, b = rand_image(rng), rand_image(rng)
        mask = np.ones((24, 24), dtype=bool)
        base_p, base_s = psnr(a, b, mask), ssim(a, b, mask)
        a2, b2 = a.copy(), b.copy()
        assert psnr(a2, b2, mask) == pytest.approx(base_p, abs=1e-12)
        assert ssim(a2, b2, mask) == pytest.approx(base_s, abs=1e-12)


class TestReport:
    def test_report_aggregates_and_csv(self):
        rng = np.random.default_rng(7)
        report = MetricReport()
        a = rand_image(rng)
        report.add("v0", a, a.copy())
        report.add("v1", np.zeros((24, 24, 3)), np.full((24, 24, 3), 0.1))
        assert report.mean_psnr == pytest.approx((99.0 + 20.0) / 2)
        rows = report.csv_rows()
        assert rows[0] == ["image", "psnr_db", "ssim", "mask_coverage"]
        assert rows[-1][0] == "mean"
        assert len(rows) == 4

    def test_foreground_mask(self):
        alpha = np.zeros((8, 8))
        alpha[2, 2] = 0.9
        gt = np.zeros((8, 8, 3))
        gt[5, 5] = [0.5, 0.2, 0.1]
        mask = foreground_mask(alpha, gt)
        assert mask[2, 2] and mask[5, 5]
        assert not mask[0, 0]
