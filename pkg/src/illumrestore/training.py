"""Two-stage zero-reference training.

Stage 1 fits the gamma-correction net with exposure, histogram and
edge-aware smoothness losses.  Stage 2 freezes it and fits the noise
predictor on the corrected images, which serve as intermediate diffusion
states.  Each stage owns its own Adam optimizer.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .agcm import CorrectionSettings, correct_image, eatv_loss, exposure_loss
from .errors import ConfigError, CorpusError, DimensionError
from .histprior import HistogramPrior, hic_loss
from .imaging import PatchSpec, extract_patches, list_images, load_image
from .nets import AgcmNet, FeatureExtractor, NoisePredictor, save_checkpoint
from .pcdm import NoiseSchedule, diffusion_loss, estimate_x0, make_schedule, pdc_loss, perturb_from_state

log = logging.getLogger(__name__)

CONFIG_NAME = "config.txt"
AGCM_CKPT = "agcm.ckpt"
PCDM_CKPT = "pcdm.ckpt"
LOSS_LOG = "loss.csv"
LOSS_FIGURE = "loss_curves.png"


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 1.0
    lambda_g: float = 20.0
    target_E: float = 0.6
    batch_size: int = 4
    patch_size: int = 64
    stage1_iters: int = 2000
    stage2_iters: int = 10000
    lr_stage1: float = 1e-4
    lr_stage2: float = 8e-5
    lr_decay: float = 0.8
    t_star_max: int = 50
    t_star_infer: int = 50
    sample_steps: int = 20
    rng_seed: int = 0
    # diffusion schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # networks
    bins: int = 64
    agcm_width: int = 16
    unet_widths: tuple = (16, 32)
    emb_dim: int = 32
    phi_mode: str = "frozen-random-cnn"
    phi_weights: str = ""
    # ablation switches
    agcm_mode: str = "adaptive"        # adaptive | gc
    gc_gamma: float = 0.2
    use_retinex: bool = True
    normalize_weights: bool = True
    condition: str = "corrected"       # corrected | degraded
    delta_t_lower: str = "tstar"       # tstar | zero
    stage2_mode: str = "combined"      # combined | two_step
    clamp_x0: bool = True

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0 or self.lambda_g <= 0:
            raise ConfigError("lambda weights must be non-negative and lambda_g positive")
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("learning rates must be positive and lr_decay in (0, 1]")
        if self.stage1_iters < 0 or self.stage2_iters < 0 or self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("iteration counts must be >= 0, batch and patch sizes >= 1")
        if not 0 <= self.t_star_infer <= self.T or not 0 <= self.t_star_max <= self.T:
            raise ConfigError("t_star values must lie in [0, T]")
        choices = {"agcm_mode": ("adaptive", "gc"), "condition": ("corrected", "degraded"),
                   "delta_t_lower": ("tstar", "zero"), "stage2_mode": ("combined", "two_step"),
                   "phi_mode": FeatureExtractor.MODES}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")

    @property
    def correction(self) -> CorrectionSettings:
        return CorrectionSettings(mode=self.agcm_mode, gc_gamma=self.gc_gamma, use_retinex=self.use_retinex)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse ``key=value`` lines; ``profile=NAME`` picks the base profile."""
        pairs = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            pairs[key] = value
        if "profile" in pairs:
            name = pairs.pop("profile")
            if name not in PROFILES:
                raise ConfigError(f"unknown profile {name!r}")
            base = PROFILES[name]
        base = base or cls()
        return base.with_overrides(pairs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, pairs: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(self)}
        updates = {}
        for key, value in pairs.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(self, key)
            if not isinstance(value, str):
                updates[key] = value
                continue
            try:
                if isinstance(current, bool):
                    if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(value)
                    updates[key] = value.lower() in ("true", "1", "yes")
                elif isinstance(current, tuple):
                    updates[key] = tuple(int(x) for x in value.split(","))
                elif isinstance(current, int):
                    updates[key] = int(float(value)) if "e" in value.lower() else int(value)
                elif isinstance(current, float):
                    updates[key] = float(value)
                else:
                    updates[key] = value
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
        return dataclasses.replace(self, **updates)


PROFILES = {
    "desk": TrainConfig(),
    "full": TrainConfig(patch_size=256, stage1_iters=100_000, stage2_iters=1_000_000),
}


def build_models(cfg: TrainConfig):
    """Fresh ``(agcm, pcdm, phi)`` initialised from ``cfg.rng_seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.rng_seed)
        agcm = AgcmNet(illum_channels=1 if cfg.use_retinex else 3, width=cfg.agcm_width,
                       normalize_weights=cfg.normalize_weights)
        pcdm = NoisePredictor(widths=cfg.unet_widths, emb_dim=cfg.emb_dim, T=cfg.T)
    phi = FeatureExtractor(cfg.phi_mode, seed=cfg.rng_seed, weights_path=cfg.phi_weights or None)
    return agcm, pcdm, phi


@dataclass
class TrainState:
    agcm: AgcmNet
    pcdm: NoisePredictor
    opt1: torch.optim.Optimizer | None = None
    opt2: torch.optim.Optimizer | None = None
    sched1: torch.optim.lr_scheduler.LRScheduler | None = None
    iteration: int = 0
    stage: int = 1
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    gen: torch.Generator = field(default_factory=lambda: torch.Generator().manual_seed(0))

    @classmethod
    def create(cls, cfg: TrainConfig, agcm=None, pcdm=None) -> "TrainState":
        if agcm is None or pcdm is None:
            agcm, pcdm, _ = build_models(cfg)
        state = cls(agcm=agcm, pcdm=pcdm, rng=np.random.default_rng(cfg.rng_seed),
                    gen=torch.Generator().manual_seed(cfg.rng_seed))
        params = [p for p in agcm.parameters()]
        if cfg.agcm_mode == "adaptive" and params:
            state.opt1 = torch.optim.Adam(params, lr=cfg.lr_stage1)
            step = max(1, cfg.stage1_iters // 5)
            state.sched1 = torch.optim.lr_scheduler.StepLR(state.opt1, step_size=step, gamma=cfg.lr_decay)
        state.opt2 = torch.optim.Adam(pcdm.parameters(), lr=cfg.lr_stage2)
        return state


def _as_batch(batch) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        x = batch
    elif len(batch) == 0:
        raise DimensionError("empty batch")
    else:
        x = torch.from_numpy(np.stack([np.asarray(b, dtype=np.float32) for b in batch])).permute(0, 3, 1, 2)
    if x.dim() != 4 or x.shape[0] == 0 or x.shape[1] != 3:
        raise DimensionError(f"expected a non-empty batch of RGB images, got {tuple(x.shape)}")
    return x.contiguous()


def _freeze(module, frozen: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)


def stage1_losses(state: TrainState, x: torch.Tensor, prior: HistogramPrior, cfg: TrainConfig):
    corrected, maps, (refl, _, new_illum) = correct_image(x, state.agcm, cfg.correction)
    l_exp = exposure_loss(corrected, cfg.target_E)
    hist_input = new_illum if new_illum.shape[1] == 1 else new_illum.amax(dim=1, keepdim=True)
    l_hic = hic_loss(hist_input, prior)
    l_eatv = torch.stack([eatv_loss(maps.select(i), refl[i:i + 1], cfg.lambda_g)
                          for i in range(x.shape[0])]).mean()
    total = l_exp + cfg.lambda1 * l_hic + cfg.lambda2 * l_eatv
    return total, {"exp": l_exp, "hic": l_hic, "eatv": l_eatv}


def stage1_step(state: TrainState, batch, prior: HistogramPrior, cfg: TrainConfig):
    """One optimizer step on the correction net; returns ``(state, breakdown)``."""
    x = _as_batch(batch)
    state.stage = 1
    _freeze(state.pcdm, True)
    _freeze(state.agcm, False)
    total, terms = stage1_losses(state, x, prior, cfg)
    if state.opt1 is not None and total.requires_grad:
        state.opt1.zero_grad(set_to_none=True)
        total.backward()
        state.opt1.step()
        state.sched1.step()
    state.iteration += 1
    breakdown = {"total": float(total.detach())}
    breakdown.update({k: float(v.detach()) for k, v in terms.items()})
    return state, breakdown


def sample_timesteps(rng: np.random.Generator, n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``t_star`` uniformly on ``[0, t_star_max]`` and ``t = t_star + dt``.

    ``dt`` is uniform on the integers ``[lo, T - t_star]`` with ``lo = t_star``
    (``delta_t_lower="tstar"``) or ``lo = 0``; ``lo`` is capped at the upper end.
    """
    t_star = rng.integers(0, cfg.t_star_max + 1, size=n)
    hi = cfg.T - t_star
    lo = np.minimum(t_star if cfg.delta_t_lower == "tstar" else np.zeros_like(t_star), hi)
    return t_star, t_star + rng.integers(lo, hi + 1)


def stage2_losses(state: TrainState, x: torch.Tensor, cfg: TrainConfig, sched: NoiseSchedule, phi,
                  t_star: torch.Tensor, t: torch.Tensor, eps_t: torch.Tensor, eps_tstar: torch.Tensor,
                  corrected: torch.Tensor | None = None, need_pdc_grad: bool = True):
    if corrected is None:
        with torch.no_grad():
            corrected = correct_image(x, state.agcm, cfg.correction)[0]
    x_tstar = corrected
    y = corrected if cfg.condition == "corrected" else x
    x_t = perturb_from_state(x_tstar, t_star, t, eps_t, sched)
    eps_pred = state.pcdm(x_t, t, y)
    l_diff = diffusion_loss(state.pcdm, x_t, t, y, eps_t, eps_pred=eps_pred)
    with torch.set_grad_enabled(need_pdc_grad and torch.is_grad_enabled()):
        x0_hat = estimate_x0(x_t, t, eps_pred, sched)
        if cfg.clamp_x0:
            x0_hat = x0_hat.clamp(0.0, 1.0)
        l_pdc = pdc_loss(phi, x_tstar, x0_hat, t_star, eps_tstar, sched)
    return l_diff, l_pdc


def stage2_step(state: TrainState, batch, cfg: TrainConfig, sched: NoiseSchedule, phi):
    """One stage-2 update of the noise predictor; the correction net stays frozen."""
    x = _as_batch(batch)
    state.stage = 2
    _freeze(state.agcm, True)
    _freeze(state.pcdm, False)
    n = x.shape[0]
    t_star_np, t_np = sample_timesteps(state.rng, n, cfg)
    t_star, t = torch.from_numpy(t_star_np), torch.from_numpy(t_np)
    eps_t = torch.randn(x.shape, generator=state.gen, dtype=x.dtype)
    eps_tstar = torch.randn(x.shape, generator=state.gen, dtype=x.dtype)
    with torch.no_grad():
        corrected = correct_image(x, state.agcm, cfg.correction)[0]
    use_pdc = cfg.lambda3 > 0
    opt = state.opt2
    if cfg.stage2_mode == "combined":
        l_diff, l_pdc = stage2_losses(state, x, cfg, sched, phi, t_star, t, eps_t, eps_tstar, corrected, use_pdc)
        total = l_diff + cfg.lambda3 * l_pdc if use_pdc else l_diff
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
    else:
        l_diff, _ = stage2_losses(state, x, cfg, sched, phi, t_star, t, eps_t, eps_tstar, corrected, False)
        opt.zero_grad(set_to_none=True)
        l_diff.backward()
        opt.step()
        _, l_pdc = stage2_losses(state, x, cfg, sched, phi, t_star, t, eps_t, eps_tstar, corrected, use_pdc)
        if use_pdc:
            opt.zero_grad(set_to_none=True)
            (cfg.lambda3 * l_pdc).backward()
            opt.step()
    state.iteration += 1
    diff, pdc = float(l_diff.detach()), float(l_pdc.detach())
    return state, {"total": diff + cfg.lambda3 * pdc, "diff": diff, "pdc": pdc}


def load_corpus(corpus_dir) -> list[np.ndarray]:
    paths = list_images(corpus_dir) if Path(corpus_dir).is_dir() else []
    if not paths:
        raise CorpusError(f"no PNG/PPM images found in {corpus_dir}")
    images = []
    for p in paths:
        img = load_image(p)
        images.append(np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img)
    return images


def sample_batch(images: list[np.ndarray], rng: np.random.Generator, cfg: TrainConfig) -> list[np.ndarray]:
    spec = PatchSpec(cfg.patch_size)
    batch = []
    for _ in range(cfg.batch_size):
        img = images[int(rng.integers(len(images)))]
        batch.extend(extract_patches(img, spec, int(rng.integers(2 ** 31)), 1))
    return batch


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def run_training(corpus_dir, prior: HistogramPrior, cfg: TrainConfig, out_dir, progress: bool = False) -> dict:
    """Run both stages and write checkpoints, config, loss log and loss figure to ``out_dir``."""
    from .plotting import plot_loss_curves

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = load_corpus(corpus_dir)
    if prior.bin_count != cfg.bins:
        raise ConfigError(f"prior has {prior.bin_count} bins but config asks for {cfg.bins}")
    agcm, pcdm, phi = build_models(cfg)
    state = TrainState.create(cfg, agcm, pcdm)
    batch_rng = np.random.default_rng([cfg.rng_seed, 1])
    sched = cfg.schedule()
    rows = []
    with open(out_dir / LOSS_LOG, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "stage", "total", "term1", "term2", "term3"])
        for i in range(cfg.stage1_iters):
            state, b = stage1_step(state, sample_batch(images, batch_rng, cfg), prior, cfg)
            writer.writerow([i, 1, _fmt(b["total"]), _fmt(b["exp"]), _fmt(b["hic"]), _fmt(b["eatv"])])
            rows.append({"iter": i, "stage": 1, "total": b["total"]})
            if progress and (i + 1) % 100 == 0:
                log.info("stage 1 iter %d total %.4f", i + 1, b["total"])
        for i in range(cfg.stage2_iters):
            state, b = stage2_step(state, sample_batch(images, batch_rng, cfg), cfg, sched, phi)
            it = cfg.stage1_iters + i
            writer.writerow([it, 2, _fmt(b["total"]), _fmt(b["diff"]), _fmt(b["pdc"]), ""])
            rows.append({"iter": it, "stage": 2, "total": b["total"]})
            if progress and (i + 1) % 500 == 0:
                log.info("stage 2 iter %d total %.4f", i + 1, b["total"])
    save_checkpoint(state.agcm, out_dir / AGCM_CKPT)
    save_checkpoint(state.pcdm, out_dir / PCDM_CKPT)
    cfg.save(out_dir / CONFIG_NAME)
    plot_loss_curves(rows, out_dir / LOSS_FIGURE)
    return {"agcm": out_dir / AGCM_CKPT, "pcdm": out_dir / PCDM_CKPT, "config": out_dir / CONFIG_NAME,
            "loss_log": out_dir / LOSS_LOG, "figure": out_dir / LOSS_FIGURE, "state": state}
