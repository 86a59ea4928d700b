"""Max-channel Retinex decomposition.

Illumination is the per-pixel channel maximum, floored at ``EPS_FLOOR``;
reflectance is the image divided by it.  The pair is exactly invertible
wherever the channel maximum is at least the floor.

Numpy functions work on single ``(H, W, C)`` images; the ``*_batch``
variants work on differentiable ``(N, C, H, W)`` tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError

EPS_FLOOR = 1e-4


@dataclass(frozen=True)
class RetinexPair:
    reflectance: np.ndarray   # H x W x 3
    illumination: np.ndarray  # H x W x 1


def decompose(img, eps_floor: float = EPS_FLOOR) -> RetinexPair:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"decomposition needs an HxWx3 colour image, got {img.shape}")
    illum = np.maximum(img.max(axis=2, keepdims=True), np.float32(eps_floor))
    refl = np.clip(img / illum, 0.0, 1.0)
    return RetinexPair(reflectance=refl.astype(np.float32), illumination=illum.astype(np.float32))


def recompose(reflectance, illumination) -> np.ndarray:
    refl = np.asarray(reflectance, dtype=np.float32)
    illum = np.asarray(illumination, dtype=np.float32)
    if refl.ndim != 3 or illum.ndim != 3 or refl.shape[:2] != illum.shape[:2] or illum.shape[2] not in (1, refl.shape[2]):
        raise DimensionError(f"cannot recompose reflectance {refl.shape} with illumination {illum.shape}")
    return np.clip(refl * illum, 0.0, 1.0)


def decompose_batch(x: torch.Tensor, eps_floor: float = EPS_FLOOR) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(reflectance, illumination)`` for an ``(N, 3, H, W)`` batch."""
    if x.dim() != 4 or x.shape[1] != 3:
        raise DimensionError(f"decomposition needs an Nx3xHxW batch, got {tuple(x.shape)}")
    illum = x.amax(dim=1, keepdim=True).clamp_min(eps_floor)
    refl = (x / illum).clamp(0.0, 1.0)
    return refl, illum


def recompose_batch(reflectance: torch.Tensor, illumination: torch.Tensor) -> torch.Tensor:
    if reflectance.dim() != 4 or illumination.dim() != 4 or reflectance.shape[-2:] != illumination.shape[-2:] \
            or illumination.shape[1] not in (1, reflectance.shape[1]):
        raise DimensionError(
            f"cannot recompose reflectance {tuple(reflectance.shape)} with illumination {tuple(illumination.shape)}")
    return (reflectance * illumination).clamp(0.0, 1.0)
