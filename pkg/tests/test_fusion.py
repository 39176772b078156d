import pytest
import torch

from stseg.fusion import FUSION_MODES, SegmentationHead, build_fused_input, fused_channels
from stseg.losses import distance_map, similarity_map


def _pyr(seed, n=2, size=64):
    g = torch.Generator().manual_seed(seed)
    return tuple(torch.randn(n, c, size // s, size // s, generator=g) for c, s in ((64, 4), (128, 8), (256, 16)))


@pytest.mark.parametrize("mode, channels", [("product-similarity", 448), ("concat-ST", 896), ("cosine-distance", 3)])
def test_fused_shapes(mode, channels):
    x = build_fused_input(_pyr(0), _pyr(1), mode)
    assert fused_channels(mode) == channels
    assert tuple(x.shape) == (2, channels, 16, 16)


def test_self_similarity_sums_to_one_on_native_grid():
    t = _pyr(0)
    x = build_fused_input(t, t, "product-similarity")
    assert torch.allclose(x[:, :64].sum(1), torch.ones(2, 16, 16), atol=1e-5)
    # coarser levels are upsampled; on the stride-4 grid the sums stay at most 1
    assert (x[:, 64:192].sum(1) <= 1 + 1e-5).all()


def test_distance_channels_match_loss_maps():
    t, s = _pyr(0), _pyr(1)
    x = build_fused_input(t, s, "cosine-distance")
    assert torch.allclose(x[:, 0], distance_map(similarity_map(t[0], s[0])))


def test_unknown_mode():
    with pytest.raises(ValueError):
        build_fused_input(_pyr(0), _pyr(1), "sum")
    with pytest.raises(ValueError):
        fused_channels("sum")


def test_zero_head_outputs_half():
    head = SegmentationHead(448, width=16).eval()
    torch.nn.init.zeros_(head.logit.weight)
    torch.nn.init.zeros_(head.logit.bias)
    y = head(torch.randn(1, 448, 16, 16))
    assert tuple(y.shape) == (1, 1, 16, 16)
    assert torch.allclose(y, torch.full_like(y, 0.5))


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_head_gradients(mode):
    torch.manual_seed(0)
    head = SegmentationHead(fused_channels(mode), width=16).train()
    y = head(build_fused_input(_pyr(0), _pyr(1), mode))
    assert ((y > 0) & (y < 1)).all()
    y.mean().backward()
    assert all(p.grad is not None for p in head.parameters())
    assert head.logit.weight.grad.abs().sum() > 0


def test_head_accepts_single_image_in_eval():
    head = SegmentationHead(3, width=8).eval()
    assert tuple(head(torch.randn(1, 3, 8, 8)).shape) == (1, 1, 8, 8)
