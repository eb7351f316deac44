"""Network builders: shapes, taps, determinism, init, gradient flow."""

import pytest
import torch

from vesseldistill.errors import ConfigError, ShapeError
from vesseldistill.nets import (VARIANTS, NetworkSpec, SegmentationNetwork,
                                build_network, init_parameters, preset)

TINY = {v: preset(v, "tiny") for v in VARIANTS}


def tiny_net(variant, **kw):
    spec = TINY[variant]
    if kw:
        spec = NetworkSpec(variant=variant, depth=spec.depth,
                           base_channels=spec.base_channels, **kw).resolve()
    return build_network(spec)


class TestSpec:
    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            NetworkSpec(variant="vgg").resolve()

    def test_bad_depth(self):
        with pytest.raises(ConfigError):
            NetworkSpec(variant="student_enet", depth=1).resolve()

    def test_tap_levels_must_be_in_range(self):
        with pytest.raises(ConfigError):
            NetworkSpec(variant="student_enet", depth=3,
                        tap_levels=(1, 4)).resolve()

    def test_default_taps_are_all_levels(self):
        spec = NetworkSpec(variant="student_mobile", depth=4).resolve()
        assert spec.tap_levels == (1, 2, 3, 4)

    def test_full_scale_defaults(self):
        assert preset("teacher_sk_unet").base_channels == 104
        assert preset("student_enet").base_channels == 16


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_output_shape_and_range(self, variant):
        net = tiny_net(variant)
        x = torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            pred, taps = net(x)
        assert pred.shape == (1, 1, 64, 64)
        assert float(pred.min()) > 0.0 and float(pred.max()) < 1.0

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_zero_input_is_finite(self, variant):
        net = tiny_net(variant)
        with torch.no_grad():
            pred, _ = net(torch.zeros(2, 1, 32, 32))
        assert torch.isfinite(pred).all()

    def test_deterministic_in_eval_mode(self):
        net = tiny_net("student_enet").eval()
        x = torch.rand(1, 1, 32, 32)
        with torch.no_grad():
            a, _ = net(x)
            b, _ = net(x)
        assert torch.equal(a, b)

    def test_tap_spatial_sizes_depth4(self):
        spec = NetworkSpec(variant="student_mobile", depth=4,
                           base_channels=4).resolve()
        net = build_network(spec)
        with torch.no_grad():
            _, taps = net(torch.rand(1, 1, 256, 256))
        sizes = [tuple(t.shape[-2:]) for t in taps.encoder]
        assert sizes == [(128, 128), (64, 64), (32, 32), (16, 16)]
        dec_sizes = [tuple(t.shape[-2:]) for t in taps.decoder]
        assert dec_sizes == sizes

    def test_tap_bundle_matches_levels(self):
        net = tiny_net("student_erfnet", tap_levels=(1, 3))
        with torch.no_grad():
            _, taps = net(torch.rand(1, 1, 64, 64))
        assert taps.levels == (1, 3)
        assert len(taps.encoder) == len(taps.decoder) == 2
        for e, d in zip(taps.encoder, taps.decoder):
            assert e.shape[-2:] == d.shape[-2:]

    def test_indivisible_input_names_dimension(self):
        net = tiny_net("student_enet")  # depth 3 needs multiples of 8
        with pytest.raises(ShapeError, match="width"):
            net(torch.rand(1, 1, 64, 60))
        with pytest.raises(ShapeError, match="height"):
            net(torch.rand(1, 1, 60, 64))

    def test_rejects_multichannel(self):
        net = tiny_net("student_enet")
        with pytest.raises(ShapeError):
            net(torch.rand(1, 3, 64, 64))

    def test_gradients_reach_all_parameters(self):
        net = tiny_net("student_mobile")
        pred, _ = net(torch.rand(2, 1, 32, 32))
        pred.mean().backward()
        missing = [n for n, p in net.named_parameters()
                   if p.requires_grad and p.grad is None]
        assert missing == []


class TestInit:
    def test_same_seed_same_weights(self):
        a = build_network(TINY["student_enet"], init_seed=7)
        b = build_network(TINY["student_enet"], init_seed=7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb), na

    def test_different_seed_different_weights(self):
        a = build_network(TINY["student_enet"], init_seed=1)
        b = build_network(TINY["student_enet"], init_seed=2)
        diff = any(not torch.equal(pa, pb)
                   for pa, pb in zip(a.parameters(), b.parameters()))
        assert diff

    def test_reinit_resets(self):
        net = build_network(TINY["student_enet"], init_seed=3)
        ref = [p.detach().clone() for p in net.parameters()]
        with torch.no_grad():
            for p in net.parameters():
                p.add_(1.0)
        init_parameters(net, seed=3)
        for p, r in zip(net.parameters(), ref):
            assert torch.equal(p, r)


class TestCapacityOrdering:
    def test_param_monotonicity_tiny(self):
        from vesseldistill.evaluate import count_params
        counts = {v: count_params(tiny_net(v)) for v in VARIANTS}
        assert counts["teacher_sk_unet"] > counts["student_mobile"]
        assert counts["student_mobile"] > counts["student_erfnet"]
        assert counts["student_erfnet"] > counts["student_enet"]

    def test_tap_channels_match_actual_taps(self):
        net = tiny_net("student_mobile")
        widths = net.tap_channels()
        with torch.no_grad():
            _, taps = net(torch.rand(1, 1, 64, 64))
        assert [t.shape[1] for t in taps.encoder] == widths
        assert [t.shape[1] for t in taps.decoder] == widths
