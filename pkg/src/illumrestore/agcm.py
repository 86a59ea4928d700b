"""Adaptive gamma correction of the illumination map and its stage-1 losses.

The corrected illumination is a per-pixel blend of two gamma curves,
``W_u * L**gamma_u + W_o * L**gamma_o``, recombined with the reflectance.
All tensors here are ``(N, C, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import DimensionError, DomainError
from .retinex import EPS_FLOOR, decompose_batch, recompose_batch

GAMMA_MIN = 0.1
GAMMA_MAX = 10.0
REGION = 16
TARGET_E = 0.6
LAMBDA_G = 20.0


@dataclass
class CorrectionMaps:
    gamma_u: torch.Tensor
    gamma_o: torch.Tensor
    weight_u: torch.Tensor
    weight_o: torch.Tensor

    @classmethod
    def constant(cls, like: torch.Tensor, gamma_u: float, gamma_o: float, weight_u: float = 0.5) -> "CorrectionMaps":
        shape = (like.shape[0], 1) + tuple(like.shape[-2:])
        full = lambda v: torch.full(shape, float(v), dtype=like.dtype, device=like.device)  # noqa: E731
        return cls(full(gamma_u), full(gamma_o), full(weight_u), full(1.0 - weight_u))

    def select(self, i: int) -> "CorrectionMaps":
        """The maps of batch item ``i`` (batch dimension kept)."""
        return CorrectionMaps(self.gamma_u[i:i + 1], self.gamma_o[i:i + 1],
                              self.weight_u[i:i + 1], self.weight_o[i:i + 1])

    def stacked_gammas(self) -> torch.Tensor:
        return torch.cat([self.gamma_u, self.gamma_o], dim=1)


# predictor(reflectance, illumination) -> CorrectionMaps
Predictor = Callable[[torch.Tensor, torch.Tensor], CorrectionMaps]


@dataclass(frozen=True)
class CorrectionSettings:
    """Switches for the correction ablations.

    ``mode="gc"`` replaces the learned maps with a single global gamma
    ``gc_gamma``; ``use_retinex=False`` corrects the whole RGB image instead
    of its illumination map (the predictor must then accept 3-channel
    illumination).
    """
    mode: str = "adaptive"
    gc_gamma: float = 0.2
    use_retinex: bool = True

    def __post_init__(self):
        if self.mode not in ("adaptive", "gc"):
            raise ValueError(f"unknown correction mode {self.mode!r}")
        if self.gc_gamma <= 0:
            raise DomainError("gc_gamma must be positive")


def apply_correction(illum: torch.Tensor, maps: CorrectionMaps) -> torch.Tensor:
    for name in ("gamma_u", "gamma_o", "weight_u", "weight_o"):
        m = getattr(maps, name)
        if m.dim() != illum.dim() or m.shape[0] != illum.shape[0] or m.shape[-2:] != illum.shape[-2:] \
                or m.shape[1] not in (1, illum.shape[1]):
            raise DimensionError(f"{name} of shape {tuple(m.shape)} does not match illumination {tuple(illum.shape)}")
    if bool((illum <= 0).any()):
        raise DomainError("illumination must be strictly positive")
    return maps.weight_u * illum.pow(maps.gamma_u) + maps.weight_o * illum.pow(maps.gamma_o)


def correct_image(x: torch.Tensor, predictor: Predictor | None,
                  settings: CorrectionSettings = CorrectionSettings()):
    """Correct a batch of degraded images.

    Returns ``(corrected, maps, (reflectance, illumination, corrected_illum))``.
    """
    if x.dim() != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected an Nx3xHxW batch, got {tuple(x.shape)}")
    if settings.use_retinex:
        refl, illum = decompose_batch(x)
    else:
        refl, illum = torch.ones_like(x), x.clamp_min(EPS_FLOOR)
    if settings.mode == "gc":
        maps = CorrectionMaps.constant(illum, settings.gc_gamma, settings.gc_gamma)
    else:
        maps = predictor(refl, illum)
    new_illum = apply_correction(illum, maps)
    corrected = recompose_batch(refl, new_illum)
    return corrected, maps, (refl, illum, new_illum)


def region_means(img: torch.Tensor, region: int = REGION) -> torch.Tensor:
    """Mean channel-averaged intensity of each non-overlapping ``region`` square.

    The image is centre-cropped to a multiple of ``region`` first.
    """
    h, w = img.shape[-2:]
    if h < region or w < region:
        raise DimensionError(f"image {h}x{w} is smaller than one {region}x{region} region")
    top, left = (h % region) // 2, (w % region) // 2
    hh, ww = h - h % region, w - w % region
    gray = img[..., top:top + hh, left:left + ww].mean(dim=1, keepdim=True)
    return F.avg_pool2d(gray, region)


def exposure_loss(corrected: torch.Tensor, target_E: float = TARGET_E, region: int = REGION) -> torch.Tensor:
    if corrected.dim() == 3:
        corrected = corrected.unsqueeze(0)
    return (region_means(corrected, region) - target_E).abs().mean()


def forward_diff(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Horizontal and vertical forward differences, zero in the last column/row."""
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return dx, dy


def _rms(*parts: torch.Tensor) -> torch.Tensor:
    flat = torch.cat([p.reshape(-1) for p in parts])
    return torch.linalg.vector_norm(flat) / math.sqrt(flat.numel())


def eatv_loss(maps: CorrectionMaps, reflectance: torch.Tensor, lambda_g: float = LAMBDA_G) -> torch.Tensor:
    """Edge-aware total variation of both gamma maps.

    Gamma differences are damped by ``exp(-lambda_g * |grad R|)`` where
    ``|grad R|`` is the channel-mean absolute reflectance difference along
    the same direction.  Each map contributes the root-mean-square of its
    weighted differences.
    """
    if lambda_g <= 0:
        raise DomainError("lambda_g must be positive")
    if reflectance.shape[0] != maps.gamma_u.shape[0] or reflectance.shape[-2:] != maps.gamma_u.shape[-2:]:
        raise DimensionError(
            f"reflectance {tuple(reflectance.shape)} does not match gamma maps {tuple(maps.gamma_u.shape)}")
    rx, ry = forward_diff(reflectance)
    wx = torch.exp(-lambda_g * rx.abs().mean(dim=1, keepdim=True))
    wy = torch.exp(-lambda_g * ry.abs().mean(dim=1, keepdim=True))
    total = reflectance.new_zeros(())
    for gamma in (maps.gamma_u, maps.gamma_o):
        gx, gy = forward_diff(gamma)
        total = total + _rms(gx * wx, gy * wy)
    return total
