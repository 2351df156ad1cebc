"""
Tests for vn_networks: encoder/decoder shapes, residual blocks and the conditioner networks.
"""
import numpy as np
import pytest

from vn_autodiff import Tensor, parameter, value_and_grad
from vn_config import DecoderConfig, EncoderConfig, load_preset
from vn_errors import ConfigError, ShapeError
from vn_model import VapnevModel
from vn_networks import (DeconvConditioner, Decoder, Encoder, ResidualBlock, check_stride_schedule, residual_block)
from vn_verify import gradient_check


def test_default_filter_schedule():
    cfg = EncoderConfig()
    assert cfg.filters() == [32, 32, 64, 64, 128, 128, 256, 256]
    assert cfg.strides() == [1, 2, 1, 2, 1, 2, 1, 2]
    assert cfg.downsampling() == 16


def test_default_encoder_on_cifar_shapes(rng):
    encoder = Encoder(EncoderConfig(), (32, 32, 3), 256, rng)
    assert encoder.feature_shape == (2, 2, 256)
    q = encoder(Tensor(rng.normal(size=(2, 32, 32, 3))))
    assert q.mu.shape == (2, 256)
    assert q.log_var.shape == (2, 256)


def test_encoder_separates_inputs(rng):
    encoder = Encoder(EncoderConfig(n_layers=2, base_filters=4), (4, 4, 1), 4, rng)
    q = encoder(Tensor(rng.normal(size=(2, 4, 4, 1))))
    assert not np.allclose(q.mu.data[0], q.mu.data[1])


def test_gradient_reaches_first_encoder_layer(double, rng):
    encoder = Encoder(EncoderConfig(n_layers=2, base_filters=4), (4, 4, 1), 4, rng)
    x = Tensor(rng.normal(size=(2, 4, 4, 1)))
    _, grads = value_and_grad(lambda: encoder(x).mu.sum(), encoder.parameters())
    assert np.any(grads['conv0.w'] != 0)


def test_encoder_rejects_indivisible_extents(rng):
    with pytest.raises(ShapeError):
        Encoder(EncoderConfig(n_layers=4, base_filters=4), (6, 6, 1), 4, rng)
    with pytest.raises(ConfigError):
        check_stride_schedule(EncoderConfig(), (32,))


def test_log_var_head_is_clamped(rng):
    encoder = Encoder(EncoderConfig(n_layers=2, base_filters=4), (4, 4, 1), 4, rng, logvar_clamp=15.0)
    encoder.logvar_head.b.data[...] = 100.0
    q = encoder(Tensor(rng.normal(size=(1, 4, 4, 1))))
    assert np.all(q.log_var.data == 15.0)


def test_decoder_heads_land_on_flow_output():
    model = VapnevModel(load_preset('toy').model, seed=0)
    z = Tensor(np.zeros((3, 4)))
    _, p = model.decoder(z)
    assert p.mu.shape[1:] == model.flow.output_shape == (2, 2, 4)
    assert p.log_var.shape == p.mu.shape


def test_decoder_is_deterministic_and_sensitive_to_z():
    model = VapnevModel(load_preset('toy').model, seed=0)
    z = np.zeros((1, 4))
    first = model.decode(Tensor(z)).mu.data
    second = model.decode(Tensor(z)).mu.data
    np.testing.assert_array_equal(first, second)
    z[0, 2] = 1.0
    assert not np.allclose(model.decode(Tensor(z)).mu.data, first)


def test_decoder_mirrors_to_full_resolution(rng):
    decoder = Decoder(DecoderConfig(n_layers=4, base_filters=4), (8, 8, 3), 6, (4, 4, 12), 1, rng)
    h, p = decoder(Tensor(rng.normal(size=(2, 6))))
    assert h.shape == (2, 8, 8, 4)
    assert p.mu.shape == (2, 4, 4, 12)


def test_decoder_rejects_bad_z(rng):
    decoder = Decoder(DecoderConfig(n_layers=2, base_filters=4), (4, 4, 1), 4, (2, 2, 4), 1, rng)
    with pytest.raises(ShapeError):
        decoder(Tensor(np.zeros((1, 5))))


def test_decoder_rejects_unreachable_y_shape(rng):
    with pytest.raises(ShapeError):
        Decoder(DecoderConfig(n_layers=2, base_filters=4), (4, 4, 1), 4, (4, 4, 1), 1, rng)


def test_residual_block_starts_as_identity(rng):
    block = ResidualBlock(3, rng)
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    out = residual_block(block, x)
    assert out.shape == x.shape
    np.testing.assert_array_equal(out.data, x.data)


def test_residual_block_gradients(double, rng):
    block = ResidualBlock(2, rng, dense=True)
    block.scale.data[...] = rng.normal(size=2)
    x = parameter(rng.normal(size=(3, 2)))
    params = dict(block.parameters(), x=x)
    errors = gradient_check(lambda: (block(x) * Tensor([[1.0, -2.0]])).sum(), params)
    assert max(errors.values()) < 1e-4


def test_residual_block_width_mismatch(rng):
    with pytest.raises(ShapeError):
        ResidualBlock(3, rng)(Tensor(np.zeros((1, 4, 4, 2))))


def test_deconv_conditioner_grows_from_2x2(rng):
    cond = DeconvConditioner(8, (32, 32, 6), 4, rng)
    assert len(cond.ups) == 4
    assert cond(Tensor(rng.normal(size=(1, 8)))).shape == (1, 32, 32, 6)


def test_deconv_conditioner_crops_small_targets(rng):
    cond = DeconvConditioner(3, (1, 1, 4), 2, rng)
    assert cond(Tensor(rng.normal(size=(2, 3)))).shape == (2, 1, 1, 4)
