import pytest
import torch

from flare_ssm.config import make_config
from flare_ssm.errors import ConfigError
from flare_ssm.head import LTSSM, DeepSWM, FusionHead, lt_strides


@pytest.mark.parametrize("m,L", [(672, 10), (64, 4), (16, 2), (8, 8), (7, 3)])
def test_ltssm_output_shape(m, L):
    lt = LTSSM(6, 5, m, L, blocks=1, state=2, mlp_ratio=1)
    assert lt(torch.randn(2, m, 6)).shape == (2, L, 5)


def test_ltssm_full_size_dims():
    lt = LTSSM(128, 64, 672, 10, blocks=1, state=4, mlp_ratio=1)
    assert lt(torch.randn(1, 672, 128)).shape == (1, 10, 64)


def test_ltssm_no_blocks():
    lt = LTSSM(4, 3, 16, 4, blocks=0)
    assert len(lt.blocks) == 0
    assert lt(torch.randn(1, 16, 4)).shape == (1, 4, 3)


def test_lt_strides_reject_lengthening():
    assert lt_strides(64, 4) == (4, 4)
    with pytest.raises(ConfigError):
        lt_strides(4, 8)


def test_fusion_probabilities():
    head = FusionHead(6, 8, state=2, mlp_ratio=1)
    p = head(torch.randn(5, 3, 6) * 20, torch.randn(5, 3, 6) * 20)
    assert torch.allclose(p.sum(-1), torch.ones(5), atol=1e-6)
    assert torch.all((p >= 0) & (p <= 1))


def test_fusion_zeroed_classifier_is_uniform():
    head = FusionHead(6, 8, state=2, mlp_ratio=1)
    with torch.no_grad():
        head.fc2.weight.zero_()
        head.fc2.bias.zero_()
    p = head(torch.randn(2, 3, 6), torch.randn(2, 3, 6))
    assert torch.allclose(p, torch.full((2, 4), 0.25))


def test_fusion_is_order_sensitive():
    torch.manual_seed(0)
    head = FusionHead(6, 8, state=2, mlp_ratio=1).double()
    a, b = torch.randn(1, 3, 6, dtype=torch.float64), torch.randn(1, 3, 6, dtype=torch.float64)
    assert not torch.allclose(head(a, b), head(b, a))


def test_fusion_rejects_mismatch():
    head = FusionHead(6)
    with pytest.raises(ValueError, match="matching"):
        head(torch.randn(1, 3, 6), torch.randn(1, 4, 6))


def test_reset_classifier_changes_only_ffn():
    torch.manual_seed(1)
    head = FusionHead(6, 8, state=2)
    before = {k: v.clone() for k, v in head.state_dict().items()}
    head.reset_classifier()
    after = head.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before if k.startswith("block"))
    assert not torch.equal(before["fc1.weight"], after["fc1.weight"])


def test_deep_swm_forward_tiny():
    cfg = make_config(profile="tiny")
    model = DeepSWM(cfg, with_mae=True)
    x = torch.randn(3, cfg.data.history, cfg.data.channels, cfg.data.height, cfg.data.width)
    x_pre = torch.randn(3, cfg.data.lt_history, cfg.data.channels, cfg.data.height, cfg.data.width)
    p = model(x, x_pre=x_pre)
    assert p.shape == (3, 4)
    h_pre = model.pre_features(x_pre)
    assert torch.allclose(model(x, h_pre=h_pre), p)
    assert model.backbone(x, h_pre).shape == (3, 2 * cfg.sse.seq_len, cfg.sse.dim)
