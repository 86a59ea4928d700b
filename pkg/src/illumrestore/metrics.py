"""Full-reference quality metrics and the per-directory evaluation report."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import CorpusError, DimensionError
from .histprior import HistogramPrior, illumination_histogram, kl_divergence
from .imaging import list_images, load_image

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit peak, capped at ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _luminance(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=2) if img.ndim == 3 else img


def ssim(a, b) -> float:
    """Mean SSIM of the channel-mean luminance with an 11-tap Gaussian window.

    Only window positions fully inside the image are averaged.
    """
    a, b = _pair(a, b)
    a, b = _luminance(a), _luminance(b)
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"image {a.shape} smaller than the {SSIM_WINDOW}-pixel SSIM window")
    taps = _gaussian_taps()

    def blur(x):
        return correlate1d(correlate1d(x, taps, axis=0, mode="reflect"), taps, axis=1, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    r = SSIM_WINDOW // 2
    return float(np.mean((num / den)[r:-r, r:-r]))


@dataclass
class MetricsRow:
    name: str
    psnr: float
    ssim: float
    hist_kl: float


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def means(self) -> dict[str, float]:
        if not self.rows:
            return {"psnr": float("nan"), "ssim": float("nan"), "hist_kl": float("nan")}
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in ("psnr", "ssim", "hist_kl")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["name", "psnr", "ssim", "hist_kl"])
            for r in self.rows:
                writer.writerow([r.name, f"{r.psnr:.6g}", f"{r.ssim:.6g}", f"{r.hist_kl:.6g}"])
            m = self.means()
            writer.writerow(["mean", f"{m['psnr']:.6g}", f"{m['ssim']:.6g}", f"{m['hist_kl']:.6g}"])


def hist_kl(img, prior: HistogramPrior) -> float:
    """KL divergence of an image's illumination histogram from the prior."""
    return kl_divergence(illumination_histogram(img, prior.bin_count), prior)


def _rgb(img):
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


def evaluate_dirs(restored_dir, reference_dir, prior: HistogramPrior) -> MetricsReport:
    """Compare each restored image with the same-named reference image."""
    restored = list_images(restored_dir)
    if not restored:
        raise CorpusError(f"no images in {restored_dir}")
    report = MetricsReport()
    for path in restored:
        ref_path = Path(reference_dir) / path.name
        if not ref_path.is_file():
            raise CorpusError(f"no reference image named {path.name} in {reference_dir}")
        out, ref = _rgb(load_image(path)), _rgb(load_image(ref_path))
        report.rows.append(MetricsRow(path.name, psnr(out, ref), ssim(out, ref), hist_kl(out, prior)))
    return report
