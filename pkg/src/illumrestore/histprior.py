"""Illumination histograms, the corpus histogram prior and the histogram-guided loss.

Histograms use ``bin_count`` uniform bins on ``[0, 1]`` (the value 1.0 falls
in the last bin).  Every produced histogram is normalized, then smoothed by
adding ``EPS_H`` per bin and renormalizing, so KL divergences never divide by
zero.  The training loss uses a triangular soft-binning whose hard-binning
limit is exact on bin centres.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CorpusError, DimensionError, ImageFormatError, ImageLoadError
from .imaging import list_images, load_image
from .retinex import decompose

log = logging.getLogger(__name__)

DEFAULT_BINS = 64
EPS_H = 1e-6


@dataclass(frozen=True)
class Histogram:
    bins: np.ndarray

    @property
    def bin_count(self) -> int:
        return len(self.bins)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.bin_count + 1)


@dataclass(frozen=True)
class HistogramPrior:
    bins: np.ndarray
    corpus_size: int

    def __post_init__(self):
        if self.corpus_size < 1:
            raise ValueError("corpus_size must be at least 1")

    @property
    def bin_count(self) -> int:
        return len(self.bins)

    def save(self, path) -> None:
        text = f"{self.bin_count}\n{self.corpus_size}\n" + " ".join(repr(float(b)) for b in self.bins) + "\n"
        Path(path).write_text(text)

    @classmethod
    def load(cls, path) -> "HistogramPrior":
        lines = Path(path).read_text().split("\n")
        try:
            bin_count, corpus_size = int(lines[0]), int(lines[1])
            bins = np.array([float(v) for v in lines[2].split()], dtype=np.float64)
        except (IndexError, ValueError) as exc:
            raise ImageFormatError(f"{path}: malformed prior file") from exc
        if len(bins) != bin_count:
            raise DimensionError(f"{path}: header says {bin_count} bins, found {len(bins)}")
        return cls(bins=bins, corpus_size=corpus_size)


def smooth(p, eps: float = EPS_H):
    """Add ``eps`` to every bin of a normalized histogram and renormalize."""
    return (p + eps) / (1.0 + p.shape[-1] * eps)


def _check_illum(values, bin_count: int) -> None:
    if bin_count < 2:
        raise ValueError("bin_count must be at least 2")
    shape = tuple(values.shape)
    if 0 in shape or not shape:
        raise DimensionError("cannot histogram an empty image")
    if len(shape) == 3 and shape[-1] != 1 and shape[0] != 1:
        raise DimensionError(f"histograms need single-channel illumination, got shape {shape}")


def hard_histogram(illum, bin_count: int = DEFAULT_BINS, eps: float = EPS_H) -> Histogram:
    illum = np.asarray(illum, dtype=np.float64)
    _check_illum(illum, bin_count)
    idx = np.clip(np.floor(illum.ravel() * bin_count).astype(np.int64), 0, bin_count - 1)
    counts = np.bincount(idx, minlength=bin_count).astype(np.float64)
    return Histogram(bins=smooth(counts / counts.sum(), eps))


def soft_histogram_tensor(values: torch.Tensor, bin_count: int = DEFAULT_BINS,
                          bandwidth: float | None = None, eps: float = EPS_H) -> torch.Tensor:
    """Differentiable normalized histogram of every element in ``values``.

    Each value is clamped to the span of the bin centres and spreads weight
    ``max(0, 1 - |v - c| / bandwidth)`` onto every bin centre ``c``.
    """
    _check_illum(values, bin_count)
    if bandwidth is None:
        bandwidth = 1.0 / bin_count
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    centers = (torch.arange(bin_count, dtype=values.dtype, device=values.device) + 0.5) / bin_count
    v = values.reshape(-1, 1).clamp(float(centers[0]), float(centers[-1]))
    weights = torch.relu(1.0 - (v - centers).abs() / bandwidth)
    mass = weights.sum(dim=0)
    return smooth(mass / mass.sum(), eps)


def soft_histogram(illum, bin_count: int = DEFAULT_BINS, bandwidth: float | None = None,
                   eps: float = EPS_H) -> Histogram:
    values = torch.as_tensor(np.asarray(illum, dtype=np.float64))
    with torch.no_grad():
        bins = soft_histogram_tensor(values, bin_count, bandwidth, eps)
    return Histogram(bins=bins.numpy())


def _bins(h):
    return h.bins if isinstance(h, (Histogram, HistogramPrior)) else h


def kl_divergence(p, q) -> float:
    """``sum_i p_i ln(p_i / q_i)``; zero-probability entries of ``p`` contribute nothing."""
    p = np.asarray(_bins(p), dtype=np.float64)
    q = np.asarray(_bins(q), dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"bin count mismatch: {p.shape} vs {q.shape}")
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def kl_divergence_tensor(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    if p.shape != q.shape:
        raise DimensionError(f"bin count mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    return torch.sum(torch.special.xlogy(p, p) - p * torch.log(q))


def hic_loss(corrected_illum: torch.Tensor, prior: HistogramPrior, bandwidth: float | None = None) -> torch.Tensor:
    """KL(soft histogram of ``corrected_illum`` || prior).

    A 4-D ``(N, C, H, W)`` input is treated as a batch: one histogram per
    item, losses averaged.
    """
    q = torch.as_tensor(prior.bins, dtype=corrected_illum.dtype, device=corrected_illum.device)
    if corrected_illum.dim() == 4:
        losses = [kl_divergence_tensor(soft_histogram_tensor(item, prior.bin_count, bandwidth), q)
                  for item in corrected_illum]
        return torch.stack(losses).mean()
    return kl_divergence_tensor(soft_histogram_tensor(corrected_illum, prior.bin_count, bandwidth), q)


def illumination_histogram(img, bin_count: int = DEFAULT_BINS) -> Histogram:
    """Hard histogram of an RGB image's max-channel illumination."""
    return hard_histogram(decompose(img).illumination, bin_count)


def build_prior(corpus_dir, bin_count: int = DEFAULT_BINS) -> HistogramPrior:
    paths = list_images(corpus_dir) if Path(corpus_dir).is_dir() else []
    if not paths:
        raise CorpusError(f"no PNG/PPM images found in {corpus_dir}")
    hists, skipped = [], 0
    for path in paths:
        try:
            img = load_image(path)
            if img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            hists.append(illumination_histogram(img, bin_count).bins)
        except (ImageLoadError, ImageFormatError, DimensionError, ValueError) as exc:
            skipped += 1
            log.warning("skipping %s: %s", path, exc)
    if not hists:
        raise CorpusError(f"all {skipped} images in {corpus_dir} were unreadable")
    if skipped:
        log.warning("%d of %d corpus images skipped", skipped, len(paths))
    total = np.zeros(bin_count)
    for h in hists:  # index order, independent of load timing
        total += h
    mean = total / len(hists)
    return HistogramPrior(bins=mean / mean.sum(), corpus_size=len(hists))
