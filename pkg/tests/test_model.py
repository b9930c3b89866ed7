import pytest
import torch

from helpers import autograd, central_diff, rel_err
from icsl.featstats import SirConfig
from icsl.model import (
    GradientReversal,
    ModelConfig,
    StyleClassifier,
    build_model,
    forward_dual,
    forward_segment,
    register_backbone,
    reverse_gradient,
)
from icsl.errors import ConfigError


@pytest.fixture
def net():
    torch.manual_seed(0)
    return build_model(ModelConfig(num_classes=3))


def test_segment_output_is_a_distribution(net):
    model, _ = net
    model.eval()
    p = forward_segment(model, torch.rand(3, 64, 64))
    assert p.shape == (3, 64, 64)
    assert torch.allclose(p.sum(dim=0), torch.ones(64, 64), atol=1e-5)
    assert bool(((p >= 0) & (p <= 1)).all())


def test_zero_head_gives_uniform(net):
    model, _ = net
    model.eval()
    torch.nn.init.zeros_(model.decoder.head.weight)
    torch.nn.init.zeros_(model.decoder.head.bias)
    p = forward_segment(model, torch.rand(2, 3, 32, 32))
    assert torch.allclose(p, torch.full_like(p, 1 / 3))


def test_channel_mismatch_rejected(net):
    with pytest.raises(ValueError):
        forward_segment(net[0], torch.rand(1, 32, 32))


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_sir_stage_is_configurable(stage):
    model, clf = build_model(ModelConfig(sir_stage=stage))
    model.eval()
    x = torch.rand(2, 3, 48, 48)
    f = model.bottom(x)
    assert f.shape[1] == model.bottom_channels
    assert model(x).shape == (2, 3, 48, 48)


def test_bad_backbone_and_stage():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(backbone="mobilenet"))
    with pytest.raises(ConfigError):
        build_model(ModelConfig(sir_stage=4))


def test_register_backbone_seam():
    calls = []

    def factory(cfg):
        calls.append(cfg)
        from icsl.model import _build_tiny
        return _build_tiny(cfg)

    register_backbone("custom", factory)
    model, clf = build_model(ModelConfig(backbone="custom"))
    assert calls and isinstance(clf, StyleClassifier)


def test_dual_without_sir_paths_identical(net):
    model, clf = net
    out = forward_dual(model, clf, torch.rand(4, 3, 32, 32), SirConfig(enabled=False))
    assert torch.equal(out.p_seg, out.p_seg_hat)


def test_classifier_scores_in_open_unit_interval(net):
    model, clf = net
    out = forward_dual(model, clf, torch.rand(4, 3, 32, 32), SirConfig(), torch.Generator().manual_seed(0))
    for s in (out.p_c, out.p_c_hat):
        assert s.shape == (4,)
        assert bool(((s > 0) & (s < 1)).all())


def test_perturbing_one_sample_leaves_others_unchanged(net):
    model, clf = net
    model.eval()
    clf.eval()
    x = torch.rand(3, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    perm = torch.tensor([1, 0, 2])
    keep = forward_dual(model, clf, x, SirConfig(), perm=perm, lambdas=torch.ones(3))
    moved = forward_dual(model, clf, x, SirConfig(), perm=perm, lambdas=torch.tensor([0.0, 1.0, 1.0]))
    assert torch.equal(keep.p_seg, moved.p_seg)
    assert torch.allclose(keep.p_seg_hat[1:], moved.p_seg_hat[1:], atol=1e-6)
    assert not torch.allclose(keep.p_seg_hat[0], moved.p_seg_hat[0], atol=1e-6)


def test_shared_weights_between_paths(net):
    model, clf = net
    x = torch.rand(4, 3, 32, 32)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    n_params = sum(p.numel() for p in model.parameters())
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    out = forward_dual(model, None, x, SirConfig(), torch.Generator().manual_seed(0))
    # loss on the perturbed path alone still moves the one shared parameter set
    out.p_seg_hat[:, 1].mean().backward()
    opt.step()
    assert sum(p.numel() for p in model.parameters()) == n_params
    changed = [k for k, v in model.state_dict().items() if not torch.equal(v, before[k])]
    assert any(k.startswith("encoder_top") for k in changed)
    assert any(k.startswith("decoder") for k in changed)
    model.eval()
    again = forward_dual(model, None, x, SirConfig(enabled=False))
    assert torch.equal(again.p_seg, again.p_seg_hat)


def test_classifier_is_spatial_permutation_invariant():
    torch.manual_seed(3)
    clf = StyleClassifier(4).eval()
    with torch.no_grad():
        clf.norm.running_mean.uniform_(-1, 1)
        clf.norm.running_var.uniform_(0.5, 2)
    f = torch.randn(2, 4, 5, 7)
    idx = torch.randperm(35)
    shuffled = f.flatten(2)[:, :, idx].view_as(f)
    assert torch.allclose(clf(f), clf(shuffled), atol=1e-6)


def test_classifier_accepts_any_spatial_size():
    clf = StyleClassifier(3).eval()
    for h, w in ((1, 1), (9, 4), (32, 32)):
        s = clf(torch.randn(2, 3, h, w))
        assert s.shape == (2,)


def test_reverse_gradient_forward_identity():
    x = torch.randn(3, 4, 4)
    assert torch.equal(reverse_gradient(x, 0.7), x)
    assert torch.equal(GradientReversal(2.0)(x), x)


def test_reverse_gradient_sum_gradient():
    x = torch.randn(2, 2, 2, requires_grad=True)
    reverse_gradient(x, 1.0).sum().backward()
    assert torch.equal(x.grad, -torch.ones_like(x))


def test_reverse_gradient_against_finite_differences():
    x0 = torch.randn(2, 2, 2, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    # L = sum(y^2 / 2) with y the reversed input: dL/dx = -0.5 * x through the reversal
    g = autograd(lambda x: (reverse_gradient(x, 0.5) ** 2 / 2).sum(), x0)
    fd = central_diff(lambda x: (x ** 2 / 2).sum(), x0)
    assert rel_err(g, -0.5 * fd) < 1e-3
    assert rel_err(g, -0.5 * x0) < 1e-12


def test_negative_coefficient_rejected():
    with pytest.raises(ValueError):
        reverse_gradient(torch.zeros(1), -1.0)
