"""Noise-predictor network: blocks, init, forward contract, serialization."""

import math

import numpy as np
import pytest
import torch

from conftest import randomize_output_conv, small_denoiser_config, tiny_denoiser_config
from thoraxgen.denoiser import (AttentionBlock, Denoiser, DenoiserConfig,
                                PointwiseConv3d, ResBlock, SpatialPaddedConv3d,
                                UNet3D, init_parameters, load_state,
                                load_tensors, save_tensors, sinusoidal_embedding,
                                state_arrays)
from thoraxgen.errors import (ConfigurationError, DimensionError, FormatError,
                              NumericHealthError)


class TestTimeEmbedding:
    def test_t_zero_gives_sin_cos_pattern(self):
        emb = sinusoidal_embedding(torch.tensor([0.0]), 8)[0]
        assert torch.allclose(emb, torch.tensor([0.0, 1.0] * 4,
                                                dtype=torch.float64))

    def test_closed_form_dim8_t3(self):
        # Independent scalar oracle: f_i = 10000^(-i/3), i = 0..3,
        # interleaved [sin(3 f_0), cos(3 f_0), sin(3 f_1), ...].
        emb = sinusoidal_embedding(torch.tensor([3.0]), 8)[0].numpy()
        expected = []
        for i in range(4):
            f = 10000.0 ** (-i / 3.0)
            expected.extend([math.sin(3.0 * f), math.cos(3.0 * f)])
        assert np.max(np.abs(emb - np.array(expected))) <= 1e-12

    def test_neighbouring_steps_differ(self):
        a = sinusoidal_embedding(torch.tensor([5.0]), 8)
        b = sinusoidal_embedding(torch.tensor([6.0]), 8)
        assert (a - b).abs().max() > 0

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigurationError):
            sinusoidal_embedding(torch.tensor([1.0]), 7)


def _fill_pointwise(module, seed):
    """PointwiseConv3d weights start uninitialized; give them defined values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, PointwiseConv3d):
                sub.weight.copy_(torch.randn(sub.weight.shape, generator=gen))
                sub.bias.copy_(0.1 * torch.randn(sub.bias.shape, generator=gen))


class TestConvWrappers:
    @pytest.mark.parametrize("cin,cout,side,stride",
                             [(3, 16, 32, 1), (16, 16, 32, 2),
                              (32, 32, 16, 1), (64, 32, 16, 1), (64, 64, 8, 1)])
    def test_spatial_padded_conv_matches_plain_conv(self, cin, cout, side, stride):
        torch.manual_seed(0)
        fast = SpatialPaddedConv3d(cin, cout, 3, stride=stride, padding=1)
        ref = torch.nn.Conv3d(cin, cout, 3, stride=stride, padding=1)
        with torch.no_grad():
            ref.weight.copy_(fast.conv.weight)
            ref.bias.copy_(fast.conv.bias)
        x = torch.randn(1, cin, side, side, side)
        diff = (fast(x) - ref(x)).abs().max().item()
        assert diff <= 1e-5  # float32 accumulation order only

    def test_pointwise_conv_matches_1x1x1_conv(self):
        pw = PointwiseConv3d(6, 4)
        _fill_pointwise(pw, 0)
        ref = torch.nn.Conv3d(6, 4, 1)
        with torch.no_grad():
            ref.weight.copy_(pw.weight[:, :, None, None, None])
            ref.bias.copy_(pw.bias)
        x = torch.randn(2, 6, 5, 5, 5)
        assert (pw(x) - ref(x)).abs().max().item() <= 1e-6


class TestResBlock:
    def test_zero_conv_path_reduces_to_shortcut(self):
        block = ResBlock(4, 4, 8, groups=4)
        with torch.no_grad():
            block.conv2.conv.weight.zero_()
            block.conv2.conv.bias.zero_()
        x = torch.randn(1, 4, 4, 4, 4)
        t = torch.randn(1, 8)
        assert torch.equal(block(x, t), x)

    def test_channel_change_uses_projection_shortcut(self):
        block = ResBlock(4, 8, 8, groups=4)
        _fill_pointwise(block, 0)
        out = block(torch.randn(1, 4, 4, 4, 4), torch.randn(1, 8))
        assert out.shape == (1, 8, 4, 4, 4)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        block = ResBlock(4, 4, 8, groups=4).double()
        x = torch.randn(1, 4, 4, 4, 4, dtype=torch.float64)
        t = torch.randn(1, 8, dtype=torch.float64)
        target = torch.randn(1, 4, 4, 4, 4, dtype=torch.float64)

        def loss_value():
            return ((block(x, t) - target) ** 2).mean()

        loss = loss_value()
        block.zero_grad()
        loss.backward()

        rng = np.random.default_rng(0)
        params = [p for p in block.parameters() if p.grad is not None]
        checked = 0
        for p in params:
            flat = p.detach().reshape(-1)
            grad = p.grad.reshape(-1)
            for idx in rng.choice(len(flat), size=min(3, len(flat)),
                                  replace=False):
                h = 1e-6 * max(1.0, abs(float(flat[idx])))
                with torch.no_grad():
                    flat[idx] += h
                    up = float(loss_value())
                    flat[idx] -= 2 * h
                    down = float(loss_value())
                    flat[idx] += h
                fd = (up - down) / (2 * h)
                assert abs(fd - float(grad[idx])) <= 1e-3 * max(1.0, abs(fd))
                checked += 1
        assert checked >= 20


class TestAttention:
    def test_rows_sum_to_one(self):
        att = AttentionBlock(8, groups=4)
        _fill_pointwise(att, 1)
        w = att.attention_weights(torch.randn(1, 8, 2, 2, 2))
        assert torch.allclose(w.sum(dim=-1), torch.ones(1, 8), atol=1e-6)

    def test_single_position_degenerate_softmax(self):
        att = AttentionBlock(8, groups=4)
        _fill_pointwise(att, 2)
        x = torch.randn(1, 8, 1, 1, 1)
        w = att.attention_weights(x)
        assert torch.allclose(w, torch.ones(1, 1, 1))
        v = att.v(att.norm(x))
        assert torch.allclose(att(x), x + att.proj(v), atol=1e-6)

    def test_spatial_permutation_equivariance(self):
        torch.manual_seed(0)
        att = AttentionBlock(8, groups=4)
        _fill_pointwise(att, 3)
        x = torch.randn(1, 8, 2, 2, 2)
        out = att(x)
        # Reverse the flattened spatial order; attention + pointwise ops
        # must commute with any spatial permutation.
        perm = torch.arange(7, -1, -1)
        xp = x.reshape(1, 8, 8)[:, :, perm].reshape(1, 8, 2, 2, 2)
        outp = att(xp)
        expected = out.reshape(1, 8, 8)[:, :, perm].reshape(1, 8, 2, 2, 2)
        assert torch.allclose(outp, expected, atol=1e-4)

    def test_non_finite_logits_rejected(self):
        att = AttentionBlock(8, groups=4)
        _fill_pointwise(att, 4)
        x = torch.full((1, 8, 2, 2, 2), float("nan"))
        with pytest.raises(NumericHealthError):
            att.attention_weights(x)


class TestConfig:
    def test_resolution_must_divide(self):
        with pytest.raises(ConfigurationError):
            DenoiserConfig(resolution=30, channel_multipliers=(1, 2, 4))

    def test_minimum_channels(self):
        with pytest.raises(ConfigurationError):
            DenoiserConfig(in_channels=1)

    def test_groups_must_divide_width(self):
        with pytest.raises(ConfigurationError):
            DenoiserConfig(base_width=12, groups=8)

    def test_attention_levels_bounded(self):
        with pytest.raises(ConfigurationError):
            DenoiserConfig(attention_levels=(3,))

    def test_dict_round_trip(self):
        cfg = small_denoiser_config()
        assert DenoiserConfig.from_dict(cfg.to_dict()) == cfg


class TestUNet:
    @pytest.mark.parametrize("cfg", [
        tiny_denoiser_config(),
        small_denoiser_config(),
        DenoiserConfig(resolution=16, in_channels=2, base_width=8,
                       channel_multipliers=(1, 2, 2), attention_levels=(),
                       time_embed_dim=16, groups=4),
    ])
    def test_output_shape_across_config_grid(self, cfg):
        net = UNet3D(cfg)
        init_parameters(net, seed=0)
        r = cfg.resolution
        x = torch.randn(1, cfg.in_channels, r, r, r)
        out = net(x, torch.tensor([4.0]))
        assert out.shape == (1, 1, r, r, r)

    def test_parameter_count_goldens(self):
        assert sum(p.numel() for p in UNet3D(DenoiserConfig()).parameters()) \
            == 1301825
        cfg = DenoiserConfig(resolution=16, in_channels=2, base_width=8,
                             channel_multipliers=(1, 2), attention_levels=(1,),
                             time_embed_dim=32, groups=8)
        assert sum(p.numel() for p in UNet3D(cfg).parameters()) == 82697

    def test_init_is_deterministic_per_seed(self):
        cfg = tiny_denoiser_config()
        a, b = UNet3D(cfg), UNet3D(cfg)
        init_parameters(a, seed=5)
        init_parameters(b, seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        c = UNet3D(cfg)
        init_parameters(c, seed=6)
        assert any(not torch.equal(pa, pc)
                   for pa, pc in zip(a.parameters(), c.parameters()))

    def test_fresh_net_predicts_zero(self):
        model = Denoiser(tiny_denoiser_config(), seed=0)
        x = np.random.default_rng(0).standard_normal((2, 8, 8, 8))
        assert np.array_equal(model.predict(x, 3), np.zeros((8, 8, 8), np.float32))


class TestPredict:
    def test_shape_contract(self):
        model = Denoiser(DenoiserConfig(), seed=0)
        x = np.zeros((3, 32, 32, 32), np.float32)
        assert model.predict(x, 5).shape == (32, 32, 32)

    def test_determinism(self):
        model = Denoiser(tiny_denoiser_config(), seed=0)
        randomize_output_conv(model.net)
        x = np.random.default_rng(1).standard_normal((2, 8, 8, 8))
        assert np.array_equal(model.predict(x, 3), model.predict(x, 3))

    def test_time_conditioning_is_live(self):
        model = Denoiser(tiny_denoiser_config(), seed=0)
        randomize_output_conv(model.net)
        x = np.random.default_rng(1).standard_normal((2, 8, 8, 8))
        assert np.abs(model.predict(x, 3) - model.predict(x, 7)).max() > 0

    def test_wrong_channel_count_rejected(self):
        model = Denoiser(tiny_denoiser_config(), seed=0)
        with pytest.raises(DimensionError):
            model.predict(np.zeros((5, 8, 8, 8), np.float32), 3)
        with pytest.raises(DimensionError):
            model.predict(np.zeros((8, 8, 8), np.float32), 3)


class TestSerialization:
    def test_state_round_trip(self):
        cfg = tiny_denoiser_config()
        a = Denoiser(cfg, seed=1)
        randomize_output_conv(a.net)
        arrays = state_arrays(a.net)
        b = Denoiser.from_parameters(cfg, arrays)
        x = np.random.default_rng(0).standard_normal((2, 8, 8, 8))
        assert np.array_equal(a.predict(x, 2), b.predict(x, 2))

    def test_tensor_files_round_trip_bitwise(self, tmp_path):
        arrays = {"a": np.random.default_rng(0).standard_normal((3, 4))
                  .astype(np.float32),
                  "b": np.arange(5, dtype=np.float32)}
        entry = save_tensors(str(tmp_path), arrays)
        back = load_tensors(str(tmp_path), entry)
        for name in arrays:
            assert np.array_equal(back[name], arrays[name])

    def test_truncated_tensor_blob_rejected(self, tmp_path):
        arrays = {"a": np.zeros((4, 4), np.float32)}
        entry = save_tensors(str(tmp_path), arrays)
        blob = (tmp_path / "a.bin").read_bytes()
        (tmp_path / "a.bin").write_bytes(blob[:-4])
        with pytest.raises(FormatError):
            load_tensors(str(tmp_path), entry)

    def test_missing_parameter_rejected(self):
        model = Denoiser(tiny_denoiser_config(), seed=0)
        with pytest.raises(FormatError):
            load_state(model.net, {})

    def test_shape_mismatch_rejected(self):
        model = Denoiser(tiny_denoiser_config(), seed=0)
        arrays = state_arrays(model.net)
        first = next(iter(arrays))
        arrays[first] = np.zeros((1, 1), np.float32)
        with pytest.raises(DimensionError):
            load_state(model.net, arrays)
