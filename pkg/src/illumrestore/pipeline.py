"""End-to-end inference from a training output directory."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .agcm import correct_image
from .errors import ConfigError, DimensionError
from .nets import AgcmNet, NoisePredictor, load_into
from .pcdm import PerturbConfig, restore
from .training import AGCM_CKPT, CONFIG_NAME, PCDM_CKPT, TrainConfig, build_models


@dataclass
class Restorer:
    cfg: TrainConfig
    agcm: AgcmNet
    pcdm: NoisePredictor

    @classmethod
    def from_dir(cls, checkpoint_dir) -> "Restorer":
        d = Path(checkpoint_dir)
        if not (d / CONFIG_NAME).is_file():
            raise ConfigError(f"{d} has no {CONFIG_NAME}; is it a training output directory?")
        cfg = TrainConfig.load(d / CONFIG_NAME)
        agcm, pcdm, _ = build_models(cfg)
        load_into(agcm, d / AGCM_CKPT)
        load_into(pcdm, d / PCDM_CKPT)
        agcm.eval()
        pcdm.eval()
        return cls(cfg, agcm, pcdm)

    @torch.no_grad()
    def correct(self, img: np.ndarray) -> np.ndarray:
        x = _to_batch(img)
        return _to_image(correct_image(x, self.agcm, self.cfg.correction)[0])

    @torch.no_grad()
    def restore(self, img: np.ndarray, t_star: int | None = None, steps: int | None = None, seed: int = 0,
                stage1_only: bool = False) -> np.ndarray:
        """Correct exposure, then (unless ``stage1_only``) run the diffusion sampler."""
        x = _to_batch(img)
        corrected = correct_image(x, self.agcm, self.cfg.correction)[0]
        if stage1_only:
            return _to_image(corrected)
        t_star = self.cfg.t_star_infer if t_star is None else t_star
        steps = self.cfg.sample_steps if steps is None else steps
        pc = PerturbConfig(t_star_max=max(t_star, self.cfg.t_star_max), t_star_infer=t_star, sample_steps=steps)
        condition = corrected if self.cfg.condition == "corrected" else x
        out = restore(self.pcdm, corrected, pc, self.cfg.schedule(), seed, condition=condition)
        return _to_image(out)


def _to_batch(img) -> torch.Tensor:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 image, got {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).unsqueeze(0)


def _to_image(x: torch.Tensor) -> np.ndarray:
    return x[0].permute(1, 2, 0).contiguous().numpy()
