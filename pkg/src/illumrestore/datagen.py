"""Synthetic illumination degradation for building unlabeled training corpora.

A clean image is decomposed, its illumination raised to a sampled gamma
(``> 1`` darkens, ``< 1`` brightens), recomposed, and corrupted with
clipped Gaussian noise.  Everything is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CorpusError
from .imaging import list_images, load_image, save_image
from .retinex import decompose, recompose

MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class DegradeSpec:
    """Degradation parameters.

    ``noise_sigma`` is the Gaussian std; with ``sigma_jitter`` each image
    instead draws its std uniformly from ``[0, noise_sigma]``.  ``mode``
    selects under-exposure, over-exposure, or ``mixed`` (left half under,
    right half over).
    """
    gamma_range_under: tuple[float, float] = (2.0, 5.0)
    gamma_range_over: tuple[float, float] = (0.2, 0.5)
    noise_sigma: float = 0.05
    mode: str = "under"
    rng_seed: int = 0
    sigma_jitter: bool = False

    def __post_init__(self):
        for lo, hi in (self.gamma_range_under, self.gamma_range_over):
            if not 0 < lo <= hi:
                raise ValueError("gamma intervals must be positive and ordered")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.mode not in ("under", "over", "mixed"):
            raise ValueError(f"unknown degradation mode {self.mode!r}")


@dataclass(frozen=True)
class DegradeParams:
    gammas: tuple[float, ...]
    sigma: float
    seed: int
    noiseless: np.ndarray = field(repr=False, compare=False)

    def gamma_text(self) -> str:
        return ",".join(f"{g:.6g}" for g in self.gammas)


def apply_gamma(clean, gamma) -> np.ndarray:
    """Raise the illumination of ``clean`` to ``gamma`` (scalar or HxWx1 map)."""
    pair = decompose(clean)
    return recompose(pair.reflectance, np.power(pair.illumination, gamma))


def degrade(clean, spec: DegradeSpec) -> tuple[np.ndarray, DegradeParams]:
    clean = np.asarray(clean, dtype=np.float32)
    rng = np.random.default_rng(spec.rng_seed)
    under = float(rng.uniform(*spec.gamma_range_under))
    over = float(rng.uniform(*spec.gamma_range_over))
    sigma = float(rng.uniform(0.0, spec.noise_sigma)) if spec.sigma_jitter else spec.noise_sigma
    if spec.mode == "under":
        gammas, gamma_map = (under,), under
    elif spec.mode == "over":
        gammas, gamma_map = (over,), over
    else:
        gammas = (under, over)
        gamma_map = np.full(clean.shape[:2] + (1,), under, dtype=np.float32)
        gamma_map[:, clean.shape[1] // 2:] = over
    noiseless = apply_gamma(clean, gamma_map)
    noise = rng.standard_normal(noiseless.shape).astype(np.float32) * np.float32(sigma)
    degraded = np.clip(noiseless + noise, 0.0, 1.0)
    return degraded, DegradeParams(gammas=gammas, sigma=sigma, seed=spec.rng_seed, noiseless=noiseless)


@dataclass(frozen=True)
class ManifestEntry:
    source: str
    gamma: str
    sigma: float
    seed: int
    output: str


def make_corpus(clean_dir, out_dir, spec: DegradeSpec, n: int) -> list[ManifestEntry]:
    """Write ``n`` degraded images (cycling over the sorted clean sources) and a manifest.

    Image ``i`` uses seed ``spec.rng_seed * 1_000_003 + i`` so any pair can
    be regenerated from its manifest line alone.
    """
    sources = list_images(clean_dir) if Path(clean_dir).is_dir() else []
    if not sources:
        raise CorpusError(f"no PNG/PPM images found in {clean_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        src = sources[i % len(sources)]
        seed = spec.rng_seed * 1_000_003 + i
        img = load_image(src)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        degraded, params = degrade(img, replace(spec, rng_seed=seed))
        name = f"deg_{i:05d}.png"
        save_image(degraded, out_dir / name)
        entries.append(ManifestEntry(str(src), params.gamma_text(), params.sigma, seed, name))
    write_manifest(entries, out_dir / MANIFEST_NAME)
    return entries


def write_manifest(entries, path) -> None:
    lines = [f"{e.source}\t{e.gamma}\t{e.sigma:.6g}\t{e.seed}\n" for e in entries]
    Path(path).write_text("".join(lines))


def read_manifest(path) -> list[tuple[str, str, float, int]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line:
            src, gamma, sigma, seed = line.split("\t")
            rows.append((src, gamma, float(sigma), int(seed)))
    return rows
