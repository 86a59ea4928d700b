import numpy as np
import pytest
import torch

from helpers import param_fd_errors
from illumrestore.agcm import GAMMA_MAX, GAMMA_MIN
from illumrestore.errors import ConfigError, DimensionError, DomainError, ImageFormatError
from illumrestore.nets import (
    AgcmNet, FeatureExtractor, NoisePredictor, agcm_forward, extract_features, load_checkpoint, load_into,
    noise_forward, save_checkpoint,
)


def _pair(h=12, w=10, n=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    refl = torch.rand(n, 3, h, w, generator=g)
    illum = torch.rand(n, 1, h, w, generator=g) * 0.9 + 0.1
    return refl, illum


def test_agcm_shapes_and_neutral_init():
    torch.manual_seed(0)
    net = AgcmNet()
    maps = agcm_forward(net, *_pair(13, 7))
    for m in (maps.gamma_u, maps.gamma_o, maps.weight_u, maps.weight_o):
        assert m.shape == (2, 1, 13, 7)
    assert torch.all(maps.gamma_u == 1) and torch.all(maps.gamma_o == 1)
    assert torch.all(maps.weight_u == 0.5) and torch.all(maps.weight_o == 0.5)


def test_agcm_deterministic():
    torch.manual_seed(1)
    net = AgcmNet()
    pair = _pair()
    a, b = net(*pair), net(*pair)
    assert torch.equal(a.gamma_u, b.gamma_u) and torch.equal(a.weight_o, b.weight_o)


@pytest.mark.parametrize("seed", range(5))
def test_agcm_invariants_for_arbitrary_parameters(seed):
    torch.manual_seed(seed)
    net = AgcmNet()
    with torch.no_grad():
        for p in net.parameters():
            p.normal_(0, 3.0)
    maps = net(*_pair(seed=seed))
    for g in (maps.gamma_u, maps.gamma_o):
        assert g.min() >= GAMMA_MIN * (1 - 1e-6) and g.max() <= GAMMA_MAX * (1 + 1e-6)
    torch.testing.assert_close(maps.weight_u + maps.weight_o, torch.ones_like(maps.weight_u), atol=1e-6, rtol=0)


def test_agcm_shape_errors():
    net = AgcmNet()
    refl, illum = _pair()
    with pytest.raises(DimensionError):
        net(refl[..., :5], illum)
    with pytest.raises(DimensionError):
        net(refl, illum.repeat(1, 3, 1, 1))


def test_noise_predictor_shapes_and_odd_sizes():
    torch.manual_seed(0)
    net = NoisePredictor()
    for h, w in ((16, 16), (9, 13)):
        x = torch.randn(2, 3, h, w)
        assert noise_forward(net, x, 10, x.clone()).shape == (2, 3, h, w)


def test_noise_predictor_timestep_reaches_output():
    torch.manual_seed(0)
    net = NoisePredictor()
    x, y = torch.randn(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    assert not torch.allclose(net(x, 5, y), net(x, 600, y))
    per_item = net(x.repeat(2, 1, 1, 1), torch.tensor([5, 600]), y.repeat(2, 1, 1, 1))
    torch.testing.assert_close(per_item[1:], net(x, 600, y))


def test_noise_predictor_reproducible_from_seed():
    x, y = torch.randn(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    torch.manual_seed(42)
    a = NoisePredictor()(x, 3, y)
    torch.manual_seed(42)
    b = NoisePredictor()(x, 3, y)
    assert torch.equal(a, b)


def test_noise_predictor_errors():
    net = NoisePredictor(T=100)
    x = torch.zeros(1, 3, 8, 8)
    with pytest.raises(DomainError):
        net(x, 101, x)
    with pytest.raises(DomainError):
        net(x, -1, x)
    with pytest.raises(DimensionError):
        net(x, 1, torch.zeros(1, 3, 8, 6))


def test_noise_predictor_parameter_gradients_tiny_net():
    torch.manual_seed(0)
    net = NoisePredictor(widths=(4, 4), emb_dim=4, convs_per_block=1).double()
    assert sum(p.numel() for p in net.parameters()) <= 1000
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    y = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    errs = param_fd_errors(lambda: (net(x, 37, y) ** 2).mean(), net)
    assert max(errs) < 1e-2


def test_feature_identity_and_frozen():
    x = torch.rand(2, 3, 16, 16)
    assert extract_features(FeatureExtractor("identity"), x) is x
    phi = FeatureExtractor("frozen-random-cnn", seed=3)
    assert all(not p.requires_grad for p in phi.parameters())
    phi.train()
    assert not phi.training
    f1, f2 = phi(x), phi(x)
    assert torch.equal(f1, f2) and f1.dim() == 2
    # 3 stride-2 stages: 8x8x16 + 4x4x32 + 2x2x64 per image
    assert f1.shape == (2, 8 * 8 * 16 + 4 * 4 * 32 + 2 * 2 * 64)
    assert torch.equal(FeatureExtractor("frozen-random-cnn", seed=3)(x), f1)


def test_feature_continuity():
    phi = FeatureExtractor("frozen-random-cnn").double()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    d = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    diffs = [float((phi(x + s * d) - phi(x)).norm()) for s in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)]
    assert all(b < a for a, b in zip(diffs, diffs[1:]))
    assert diffs[-1] < 1e-3


def test_feature_modes_validation():
    with pytest.raises(ConfigError):
        FeatureExtractor("vgg")
    with pytest.raises(ConfigError):
        FeatureExtractor("external-pretrained")


def test_external_pretrained_reads_weights(tmp_path):
    tv = pytest.importorskip("torchvision")
    torch.manual_seed(0)
    path = tmp_path / "vgg16.pth"
    torch.save(tv.models.vgg16().state_dict(), path)
    phi = FeatureExtractor("external-pretrained", weights_path=path)
    f = phi(torch.rand(1, 3, 16, 16))
    assert f.shape == (1, 64 * 16 * 16 + 128 * 8 * 8 + 256 * 4 * 4)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    net = NoisePredictor(widths=(4, 8), emb_dim=8)
    path = tmp_path / "n.ckpt"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    assert raw[:4] == b"IRCK" and int.from_bytes(raw[4:8], "little") == 1
    state = load_checkpoint(path)
    assert list(state) == list(net.state_dict())
    torch.manual_seed(1)
    other = load_into(NoisePredictor(widths=(4, 8), emb_dim=8), path)
    for (k, a), b in zip(net.state_dict().items(), other.state_dict().values()):
        assert torch.equal(a, b), k
        assert state[k].dtype == np.float32


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ImageFormatError):
        load_checkpoint(p)
