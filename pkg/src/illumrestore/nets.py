"""Trainable networks and the checkpoint container.

* :class:`AgcmNet` predicts the two gamma maps and two blend weights.
* :class:`NoisePredictor` is a small conditional U-Net ``eps(x_t, t, y)``.
* :class:`FeatureExtractor` is the frozen feature map used by the
  consistency loss.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .agcm import GAMMA_MAX, GAMMA_MIN, CorrectionMaps
from .errors import ConfigError, DimensionError, DomainError, ImageFormatError


class ChannelAttention(nn.Module):
    """Squeeze-excite gate: global average pool, bottleneck MLP, sigmoid."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        return x * torch.sigmoid(self.fc2(F.relu(self.fc1(s))))


def _conv_relu(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU())


class AgcmNet(nn.Module):
    """Two-branch gamma/weight predictor.

    The structure branch turns ``concat(L, R)`` into a feature ``Fs``.  The
    gamma branch fuses an embedding of ``L`` with ``Fs`` through channel
    attention and emits two log-gamma channels squashed into
    ``[gamma_min, gamma_max]``.  The weight branch reads ``Fs`` and emits two
    blend weights (softmax, so they sum to one).  Both heads start at zero,
    i.e. gamma = 1 and weights = 1/2.
    """

    def __init__(self, illum_channels: int = 1, width: int = 16, normalize_weights: bool = True,
                 gamma_min: float = GAMMA_MIN, gamma_max: float = GAMMA_MAX):
        super().__init__()
        if not 0 < gamma_min < 1 < gamma_max:
            raise DomainError("gamma bounds must satisfy 0 < gamma_min < 1 < gamma_max")
        self.illum_channels = illum_channels
        self.normalize_weights = normalize_weights
        self.log_gamma_min = math.log(gamma_min)
        self.log_gamma_max = math.log(gamma_max)
        self.structure = nn.Sequential(
            _conv_relu(illum_channels + 3, width), _conv_relu(width, width), _conv_relu(width, width))
        self.illum_embed = _conv_relu(illum_channels, width)
        self.attention = ChannelAttention(2 * width)
        self.gamma_body = _conv_relu(2 * width, width)
        self.gamma_head = nn.Conv2d(width, 2, 3, padding=1)
        self.weight_body = _conv_relu(width, width)
        self.weight_head = nn.Conv2d(width, 2, 3, padding=1)
        for head in (self.gamma_head, self.weight_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, reflectance: torch.Tensor, illumination: torch.Tensor) -> CorrectionMaps:
        if reflectance.shape[0] != illumination.shape[0] or reflectance.shape[-2:] != illumination.shape[-2:]:
            raise DimensionError(
                f"reflectance {tuple(reflectance.shape)} and illumination {tuple(illumination.shape)} disagree")
        if illumination.shape[1] != self.illum_channels:
            raise DimensionError(f"net expects {self.illum_channels}-channel illumination")
        fs = self.structure(torch.cat([illumination, reflectance], dim=1))
        fused = self.attention(torch.cat([self.illum_embed(illumination), fs], dim=1))
        raw_gamma = self.gamma_head(self.gamma_body(fused))
        mid = 0.5 * (self.log_gamma_max + self.log_gamma_min)
        half = 0.5 * (self.log_gamma_max - self.log_gamma_min)
        gammas = torch.exp(mid + half * torch.tanh(raw_gamma))
        raw_w = self.weight_head(self.weight_body(fs))
        weights = torch.softmax(raw_w, dim=1) if self.normalize_weights else torch.sigmoid(raw_w)
        return CorrectionMaps(gammas[:, :1], gammas[:, 1:], weights[:, :1], weights[:, 1:])


def agcm_forward(net: AgcmNet, reflectance: torch.Tensor, illumination: torch.Tensor) -> CorrectionMaps:
    return net(reflectance, illumination)


def timestep_embedding(t: torch.Tensor, total: int, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of ``t / total`` with frequencies from 1 to 1000."""
    half = dim // 2
    s = t.to(torch.float64) / total
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=torch.float64))
    args = s[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class _TimeBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, convs):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1) if convs > 1 else None

    def forward(self, x, temb):
        h = F.silu(self.conv1(x) + self.emb(temb)[:, :, None, None])
        if self.conv2 is not None:
            h = F.silu(self.conv2(h))
        return h


class NoisePredictor(nn.Module):
    """Two-level conditional U-Net predicting the diffusion noise.

    The condition ``y`` is concatenated to ``x_t`` at the input; the timestep
    embedding is added inside every block.
    """

    def __init__(self, widths=(16, 32), emb_dim: int = 32, T: int = 1000, channels: int = 3,
                 convs_per_block: int = 2):
        super().__init__()
        w0, w1 = widths
        self.T = T
        self.emb_dim = emb_dim
        self.embed = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU())
        self.enc1 = _TimeBlock(2 * channels, w0, emb_dim, convs_per_block)
        self.enc2 = _TimeBlock(w0, w1, emb_dim, convs_per_block)
        self.dec1 = _TimeBlock(w1 + w0, w0, emb_dim, convs_per_block)
        self.out = nn.Conv2d(w0, channels, 1)

    def _timesteps(self, t, n, device):
        t = torch.as_tensor(t, device=device)
        if t.dim() == 0:
            t = t.expand(n)
        if bool(((t < 0) | (t > self.T)).any()):
            raise DomainError(f"timestep out of range [0, {self.T}]")
        return t

    def forward(self, x_t: torch.Tensor, t, y: torch.Tensor) -> torch.Tensor:
        if x_t.shape != y.shape:
            raise DimensionError(f"x_t {tuple(x_t.shape)} and condition {tuple(y.shape)} disagree")
        n, _, h, w = x_t.shape
        temb = self.embed(timestep_embedding(self._timesteps(t, n, x_t.device), self.T, self.emb_dim).to(x_t.dtype))
        inp = torch.cat([x_t, y], dim=1)
        pad = (0, w % 2, 0, h % 2)
        if any(pad):
            inp = F.pad(inp, pad, mode="replicate")
        h1 = self.enc1(inp, temb)
        h2 = self.enc2(F.avg_pool2d(h1, 2), temb)
        up = F.interpolate(h2, scale_factor=2, mode="nearest")
        out = self.out(self.dec1(torch.cat([up, h1], dim=1), temb))
        return out[..., :h, :w]


def noise_forward(net, x_t: torch.Tensor, t, y: torch.Tensor) -> torch.Tensor:
    return net(x_t, t, y)


_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
_VGG_TAPS = (3, 8, 15)  # relu1_2, relu2_2, relu3_3


class FeatureExtractor(nn.Module):
    """Frozen feature map for the consistency loss.

    ``identity`` returns its input.  ``frozen-random-cnn`` is three stride-2
    conv stages with fixed seeded weights.  ``external-pretrained`` builds a
    VGG-16 trunk from a torchvision state-dict file.  CNN modes return every
    stage's activations flattened and concatenated to ``(N, D)``.
    """

    MODES = ("identity", "frozen-random-cnn", "external-pretrained")

    def __init__(self, mode: str = "frozen-random-cnn", seed: int = 0, widths=(16, 32, 64),
                 weights_path=None):
        super().__init__()
        if mode not in self.MODES:
            raise ConfigError(f"unknown feature extractor mode {mode!r}")
        self.mode = mode
        self.stages = nn.ModuleList()
        if mode == "frozen-random-cnn":
            gen = torch.Generator().manual_seed(seed)
            cin = 3
            for cout in widths:
                conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
                bound = math.sqrt(6.0 / (cin * 9))
                with torch.no_grad():
                    conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                    conv.bias.zero_()
                self.stages.append(conv)
                cin = cout
        elif mode == "external-pretrained":
            if weights_path is None:
                raise ConfigError("external-pretrained mode needs a VGG-16 weights file")
            from torchvision.models import vgg16
            vgg = vgg16()
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            vgg.load_state_dict(state)
            self.trunk = vgg.features[:_VGG_TAPS[-1] + 1]
            self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise DimensionError(f"feature extractor needs Nx3xHxW input, got {tuple(x.shape)}")
        if self.mode == "identity":
            return x
        feats = []
        if self.mode == "frozen-random-cnn":
            h = x
            for conv in self.stages:
                h = F.relu(conv(h))
                feats.append(h.flatten(1))
        else:
            h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
            for i, layer in enumerate(self.trunk):
                h = layer(h)
                if i in _VGG_TAPS:
                    feats.append(h.flatten(1))
        return torch.cat(feats, dim=1)


def extract_features(phi: FeatureExtractor, img: torch.Tensor) -> torch.Tensor:
    return phi(img)


# checkpoint container: b"IRCK", uint32 version, uint32 count, then per entry
# uint32 name length, utf-8 name, uint32 ndim, uint32 dims..., float32 data (all little-endian)
_MAGIC = b"IRCK"
_VERSION = 1


def save_checkpoint(module_or_state, path) -> None:
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(state))]
    for name, value in state.items():
        arr = np.ascontiguousarray(torch.as_tensor(value).detach().cpu().numpy(), dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ImageFormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ImageFormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(buf):
        raise ImageFormatError(f"{path}: trailing bytes in checkpoint")
    return out


def load_into(module: nn.Module, path) -> nn.Module:
    state = {k: torch.from_numpy(v) for k, v in load_checkpoint(path).items()}
    module.load_state_dict(state)
    return module
