import pytest
import torch

from terradepth.autodiff import ShapeError, grad_check
from terradepth.coarse import CoarseDepthNet, PatchEmbed, Resample, predict_coarse, reassemble
from terradepth.config import ConfigError, ViTConfig

TINY = dict(image_size=8, patch_size=2, embed_dim=8, depth=4, heads=2, mlp_ratio=2,
            hook_layers=(1, 2, 3, 4), fusion_dim=16, hook_scales=(1, 2, 4, 8))


def tiny_net(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    net = CoarseDepthNet(ViTConfig(**TINY)).to(dtype)
    # a generic (non-small) head so every path carries signal
    torch.nn.init.normal_(net.head[-1].weight, std=0.3)
    return net


def test_default_shape_contract():
    net = CoarseDepthNet(ViTConfig())
    x = torch.rand(2, 3, 64, 64)
    assert net.embed(x).shape == (2, 65, 64)
    y, feats = net(x, return_features=True)
    assert y.shape == (2, 1, 64, 64)
    assert [tuple(f.shape) for f in feats["hooks"]] == [(2, 64, 8, 8)] * 4
    assert feats["pre_head"].shape == (2, 64, 32, 32)
    assert 0 < y.min() and y.max() < 1


@pytest.mark.parametrize("hw,tokens", [((64, 64), 64), ((8, 8), 1), ((64, 48), 48)])
def test_patch_counts(hw, tokens):
    emb = PatchEmbed(ViTConfig())
    assert emb(torch.zeros(1, 3, *hw)).shape == (1, tokens + 1, 64)


def test_patch_embed_rejects_indivisible():
    with pytest.raises(ShapeError):
        PatchEmbed(ViTConfig())(torch.zeros(1, 3, 60, 64))


@pytest.mark.parametrize("scale,out", [(8, 8), (4, 16), (32, 2), (16, 4)])
def test_resample_sizes(scale, out):
    r = Resample(ViTConfig(), scale)
    assert r(torch.zeros(1, 64, 8, 8)).shape == (1, 64, out, out)


def test_config_rejects_non_integral_stride():
    with pytest.raises(ConfigError):
        ViTConfig(patch_size=8, hook_scales=(3, 6, 12, 24), image_size=48).validate()
    with pytest.raises(ValueError):
        Resample(ViTConfig(), 12)


def test_all_zero_weights_give_half():
    net = CoarseDepthNet(ViTConfig())
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    y = net(torch.rand(1, 3, 64, 64))
    assert torch.equal(y, torch.full_like(y, 0.5))


def test_zero_residual_branches_pass_embeddings_through():
    net = CoarseDepthNet(ViTConfig())
    with torch.no_grad():
        for blk in net.blocks:
            for lin in (blk.attn.out, blk.mlp[2]):
                lin.weight.zero_()
                lin.bias.zero_()
    x = torch.rand(1, 3, 64, 64)
    tokens = net.embed(x)
    ref = reassemble(tokens[:, 1:], torch.arange(64), 8, 8)
    for f in net.encode(tokens, (8, 8)):
        assert torch.equal(f, ref)


def test_reassemble_undoes_permutation():
    torch.manual_seed(0)
    tokens = torch.randn(2, 12, 5)
    ref = reassemble(tokens, torch.arange(12), 3, 4)
    perm = torch.randperm(12)
    assert torch.equal(reassemble(tokens[:, perm], perm, 3, 4), ref)
    assert ref[0, :, 1, 2].tolist() == tokens[0, 6].tolist()


def test_output_range_for_extreme_input():
    net = tiny_net(dtype=torch.float32)
    y = net(torch.randn(2, 3, 8, 8) * 1e3)
    assert torch.isfinite(y).all() and (y >= 0).all() and (y <= 1).all()


def test_deterministic_and_predict_coarse():
    net = CoarseDepthNet(ViTConfig())
    x = torch.rand(1, 3, 64, 64)
    assert torch.equal(predict_coarse(x, net), predict_coarse(x, net))
    with pytest.raises(ValueError):
        predict_coarse(x, None)


def test_every_parameter_gets_gradient():
    torch.manual_seed(3)
    net = CoarseDepthNet(ViTConfig())
    x = torch.rand(2, 3, 64, 64)
    target = torch.rand(2, 1, 64, 64)
    ((net(x) - target) ** 2).mean().backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or p.grad.norm() == 0]
    assert dead == []


@pytest.mark.parametrize("seed", range(2))
def test_tiny_grad_check(seed):
    net = tiny_net(seed)
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    assert grad_check(lambda v: net(v).mean(), x, eps=1e-5) <= 1e-3


def test_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        CoarseDepthNet(ViTConfig())(torch.zeros(1, 1, 64, 64))
