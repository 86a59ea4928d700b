"""Perturbed-state diffusion: schedule, noising, losses and the restoration sampler.

The corrected image is treated as the diffusion state at an intermediate
step ``t_star``.  Training continues the forward process from there; at
inference a deterministic implicit sampler walks from ``t_star`` back to 0.

Timesteps may be Python ints or ``(N,)`` integer tensors (one per batch
item).  Arrays are ``(N, C, H, W)`` tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray        # betas[s - 1] is beta_s, s = 1..T
    alpha_bars: np.ndarray   # alpha_bars[t], t = 0..T, alpha_bars[0] == 1

    def __post_init__(self):
        if len(self.betas) != self.T or len(self.alpha_bars) != self.T + 1:
            raise DimensionError("schedule arrays do not match T")

    def check_t(self, t) -> None:
        arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
        if np.any(arr < 0) or np.any(arr > self.T):
            raise DomainError(f"timestep outside [0, {self.T}]")

    def abar(self, t, like: torch.Tensor) -> torch.Tensor:
        """``alpha_bar_t`` as a tensor broadcastable against ``like``."""
        self.check_t(t)
        if isinstance(t, torch.Tensor) and t.dim() > 0:
            vals = torch.as_tensor(self.alpha_bars, dtype=like.dtype, device=like.device)[t.long()]
            return vals.view(-1, *([1] * (like.dim() - 1)))
        return torch.tensor(self.alpha_bars[int(t)], dtype=like.dtype, device=like.device)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise DomainError("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise DomainError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - np.longdouble(betas)).astype(np.float64)])
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise DimensionError(f"noise {tuple(eps.shape)} does not match x0 {tuple(x0.shape)}")
    a = sched.abar(t, x0)
    return a.sqrt() * x0 + (1 - a).sqrt() * eps


def perturb_from_state(x_tstar: torch.Tensor, t_star, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Continue the forward process from step ``t_star`` to step ``t``."""
    if eps.shape != x_tstar.shape:
        raise DimensionError(f"noise {tuple(eps.shape)} does not match state {tuple(x_tstar.shape)}")
    if np.any(np.asarray(torch.as_tensor(t).cpu()) < np.asarray(torch.as_tensor(t_star).cpu())):
        raise DomainError("t must not be smaller than t_star")
    ratio = sched.abar(t, x_tstar) / sched.abar(t_star, x_tstar)
    return ratio.sqrt() * x_tstar + (1 - ratio).clamp_min(0).sqrt() * eps


def _rms(x: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(x) / math.sqrt(x.numel())


def diffusion_loss(net, x_t: torch.Tensor, t, y: torch.Tensor, eps_true: torch.Tensor,
                   eps_pred: torch.Tensor | None = None) -> torch.Tensor:
    """Root-mean-square error between the true and predicted noise.

    ``eps_pred`` may be passed to reuse a forward pass already computed.
    """
    if eps_true.shape != x_t.shape or y.shape != x_t.shape:
        raise DimensionError("x_t, y and eps_true must share a shape")
    if eps_pred is None:
        eps_pred = net(x_t, t, y)
    return _rms(eps_true - eps_pred)


def estimate_x0(x_t: torch.Tensor, t, eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    a = sched.abar(t, x_t)
    return (x_t - (1 - a).sqrt() * eps_pred) / a.sqrt()


def pdc_loss(phi, x_tstar: torch.Tensor, x0_hat: torch.Tensor, t_star, eps_new: torch.Tensor,
             sched: NoiseSchedule) -> torch.Tensor:
    """Feature-space RMS distance between ``x_tstar`` and ``x0_hat`` re-noised to ``t_star``."""
    if x0_hat.shape != x_tstar.shape or eps_new.shape != x_tstar.shape:
        raise DimensionError("x_tstar, x0_hat and eps_new must share a shape")
    renoised = forward_diffuse(x0_hat, t_star, eps_new, sched)
    return _rms(phi(x_tstar) - phi(renoised))


@dataclass(frozen=True)
class PerturbConfig:
    t_star_max: int = 50
    t_star_infer: int = 50
    sample_steps: int = 20

    def __post_init__(self):
        if not 0 <= self.t_star_infer <= self.t_star_max:
            raise DomainError("need 0 <= t_star_infer <= t_star_max")
        if self.sample_steps < 1:
            raise DomainError("sample_steps must be at least 1")


def sampling_timesteps(t_star: int, steps: int) -> list[int]:
    """Uniformly spaced integer timesteps from ``t_star`` down to 0 (inclusive)."""
    ts = np.rint(np.linspace(t_star, 0, steps + 1)).astype(int).tolist()
    out = [ts[0]]
    for t in ts[1:]:
        if t != out[-1]:
            out.append(t)
    return out


@torch.no_grad()
def restore(net, corrected: torch.Tensor, cfg: PerturbConfig, sched: NoiseSchedule, rng_seed: int = 0,
            condition: torch.Tensor | None = None, clamp: bool = True) -> torch.Tensor:
    """Deterministic implicit (eta = 0) reverse diffusion from ``t_star_infer``.

    ``corrected`` is both the starting state and, unless ``condition`` is
    given, the conditioning image.  ``rng_seed`` is accepted for interface
    symmetry; the eta = 0 recursion draws no noise.
    """
    t_star = cfg.t_star_infer
    if t_star > sched.T:
        raise DomainError(f"t_star {t_star} exceeds schedule length {sched.T}")
    y = corrected if condition is None else condition
    if y.shape != corrected.shape:
        raise DimensionError("condition must match the corrected image shape")
    x = corrected
    ts = sampling_timesteps(t_star, cfg.sample_steps)
    for t_cur, t_prev in zip(ts[:-1], ts[1:]):
        eps = net(x, t_cur, y)
        x0_hat = estimate_x0(x, t_cur, eps, sched)
        a_prev = sched.abar(t_prev, x)
        x = a_prev.sqrt() * x0_hat + (1 - a_prev).sqrt() * eps
    return x.clamp(0.0, 1.0) if clamp else x
