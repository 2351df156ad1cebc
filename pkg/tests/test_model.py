"""
Tests for vn_model: ELBO assembly, KL annealing, bits/dim, generation, reconstruction and the 2D flow model.
"""
import math

import numpy as np
import pytest

from vn_autodiff import Tensor, exp, value_and_grad
from vn_config import load_preset
from vn_data import DISCRETE, LOGIT, POINTS, UNIT, ImageBatch, inverse_logit_transform, synthetic_images
from vn_distributions import LOG_2PI
from vn_errors import ConfigError, ContractError, DomainError, NumericsError
from vn_flows import unsqueeze
from vn_model import (ElboBreakdown, FlowDensityModel, VapnevModel, bits_per_dim, build_model, elbo, evaluate,
                      gaussian_mle_nll, generate, kl_anneal_weight, reconstruct)
from vn_verify import gradient_check, randomize_multipliers


def _toy_model(seed=0):
    return VapnevModel(load_preset('toy').model, seed=seed)


def _silence(model):
    """Identity flow and zero decoder heads: y = x and p(y|z) = N(0, I)."""
    for name, p in model.flow.named_parameters():
        if name.rsplit('.', 1)[-1] in ('alpha', 'beta1', 'beta2', 'bias'):
            p.data[...] = 0.0
    for head in (model.decoder.mu_head, model.decoder.logvar_head):
        head.w.data[...] = 0.0
        head.b.data[...] = 0.0
    return model


def _breakdown(recon, logdet=0.0, kl=0.0, correction=0.0):
    one = np.ones(1)
    return ElboBreakdown(recon_ll=recon * one, flow_logdet=logdet * one, kl=kl * one, correction=correction * one)


# =============================================================================
# KL annealing and bits/dim
# =============================================================================

@pytest.mark.parametrize('step,warmup,expected', [(0, 100, 0.0), (100, 100, 1.0), (50, 100, 0.5),
                                                  (250, 100, 1.0), (0, 0, 1.0), (7, 0, 1.0)])
def test_kl_anneal_weight(step, warmup, expected):
    assert kl_anneal_weight(step, warmup) == expected


def test_kl_anneal_weight_rejects_bad_arguments():
    with pytest.raises(ContractError):
        kl_anneal_weight(-1, 10)
    with pytest.raises(ConfigError):
        kl_anneal_weight(0, -5)


def test_bits_per_dim_unit_conversion():
    d = 12
    assert bits_per_dim(_breakdown(-d * math.log(2.0)), d) == pytest.approx(1.0)


def test_uniform_density_reads_eight_bits():
    # density 1 on the unit cube: elbo + correction = 0 nats
    assert bits_per_dim(_breakdown(0.0), 3072, n_bins=256) == pytest.approx(8.0)


def test_bits_per_dim_decreases_with_elbo():
    values = [bits_per_dim(_breakdown(r), 16) for r in (-40.0, -20.0, 0.0, 5.0)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_bits_per_dim_needs_positive_d():
    with pytest.raises(ContractError):
        bits_per_dim(_breakdown(0.0), 0)


def test_breakdown_identity_and_means():
    b = ElboBreakdown(recon_ll=np.array([-3.0, -5.0]), flow_logdet=np.array([1.0, 2.0]),
                      kl=np.array([0.5, 0.25]), correction=np.zeros(2))
    np.testing.assert_array_equal(b.elbo, b.recon_ll + b.flow_logdet - b.kl)
    assert b.means()['elbo'] == pytest.approx(-2.875)
    assert len(ElboBreakdown.concat([b, b])) == 4


# =============================================================================
# ELBO
# =============================================================================

def test_elbo_at_standard_normal_mode(double):
    model = _silence(_toy_model())
    out = elbo(model, np.zeros((2, 4, 4, 1)), None, np.random.default_rng(0))
    np.testing.assert_allclose(out.recon_ll, -0.5 * 16 * LOG_2PI)
    np.testing.assert_array_equal(out.flow_logdet, 0.0)
    assert np.all(out.kl >= 0)


def test_loss_combines_terms_with_kl_weight(double, rng):
    model = _toy_model()
    x = rng.normal(size=(3, 4, 4, 1))
    for weight in (0.0, 0.3, 1.0):
        out = model.elbo(x, None, np.random.default_rng(5), kl_weight=weight)
        expected = -np.mean(out.recon_ll + out.flow_logdet - weight * out.kl)
        assert out.loss.item() == pytest.approx(expected, rel=1e-12)
        assert out.kl_weight == weight


def test_kl_weight_leaves_reconstruction_gradients_alone(double, rng):
    model = _toy_model()
    x = rng.normal(size=(3, 4, 4, 1))
    decoder_params = model.decoder.parameters()

    def grads(weight):
        _, g = value_and_grad(lambda: model.elbo(x, None, np.random.default_rng(5), weight).loss, decoder_params)
        return g

    off, on = grads(0.0), grads(1.0)
    for name in decoder_params:
        np.testing.assert_allclose(off[name], on[name], rtol=1e-12, atol=1e-14)


def test_kl_weight_range():
    with pytest.raises(ContractError):
        _toy_model().elbo(np.zeros((1, 4, 4, 1)), None, np.random.default_rng(0), kl_weight=1.5)


def test_elbo_attributes_non_finite_input():
    x = np.zeros((1, 4, 4, 1))
    x[0, 1, 1, 0] = np.nan
    with pytest.raises(NumericsError) as info:
        _toy_model().elbo(x, None, np.random.default_rng(0))
    assert info.value.term == 'input'


def _overflowing_flow(x, z=None, return_layers=False):
    return exp(Tensor(np.array([1e4]))), None


def test_op_overflow_inside_the_flow_is_attributed(monkeypatch):
    model = _toy_model()
    monkeypatch.setattr(model.flow, 'forward', _overflowing_flow)
    with pytest.raises(NumericsError) as info:
        model.elbo(np.zeros((1, 4, 4, 1)), None, np.random.default_rng(0))
    assert info.value.term == 'flow'
    assert 'exp overflow' in str(info.value)


def test_elbo_rejects_raw_pixels():
    batch = ImageBatch(np.zeros((1, 4, 4, 1)), UNIT)
    with pytest.raises(DomainError):
        _toy_model().elbo(batch, None, np.random.default_rng(0))


def test_elbo_takes_prepared_batches(toy_images):
    model = _toy_model()
    rng = np.random.default_rng(2)
    logits, correction = model.prepare(toy_images.subset(slice(0, 4)), rng)
    assert logits.domain == LOGIT
    out = model.elbo(logits, correction, rng)
    assert len(out) == 4
    np.testing.assert_array_equal(out.correction, correction)


def test_full_model_gradient_on_a_few_groups(double):
    model = _toy_model(seed=3)
    rng = np.random.default_rng(8)
    randomize_multipliers(model, rng, spread=0.3)
    x = rng.normal(size=(2, 4, 4, 1))
    names = ['encoder.conv0.w', 'encoder.mu.b', 'encoder.logvar.w', 'flow.c0.scale.alpha', 'flow.c2.shift.f2.proj.w',
             'flow.c3.gate', 'decoder.mu.w', 'decoder.logvar.b']
    params = {name: model.parameters()[name] for name in names}
    errors = gradient_check(lambda: model.elbo(x, None, np.random.default_rng(1)).loss, params,
                            max_entries=4, rng=rng)
    assert max(errors.values()) < 1e-3, errors


# =============================================================================
# Generation and reconstruction
# =============================================================================

def test_degenerate_pipeline_samples_are_squashed_noise():
    model = _silence(_toy_model())
    images = generate(model, 5, np.random.default_rng(9))
    rng = np.random.default_rng(9)
    rng.standard_normal((5, 4))                 # z
    eps = rng.standard_normal((5, 2, 2, 4))     # y = 0 + 1 * eps
    expected = inverse_logit_transform(ImageBatch(unsqueeze(eps).data.astype(np.float64), LOGIT), 0.05)
    assert images.domain == UNIT
    assert images.pixels.shape == (5, 4, 4, 1)
    np.testing.assert_allclose(images.pixels, expected.pixels, atol=1e-5)


def test_generate_deterministic_y_is_reproducible():
    model = _toy_model()
    a = model.generate(4, np.random.default_rng(3), deterministic_y=True).pixels
    b = model.generate(4, np.random.default_rng(3), deterministic_y=True).pixels
    np.testing.assert_array_equal(a, b)


def test_sampled_and_mean_y_differ():
    model = _toy_model()
    a = model.generate(4, np.random.default_rng(3), deterministic_y=True).pixels
    b = model.generate(4, np.random.default_rng(3), deterministic_y=False).pixels
    assert not np.allclose(a, b)


def test_generate_needs_a_positive_count():
    with pytest.raises(ContractError):
        _toy_model().generate(0, np.random.default_rng(0))


def test_reconstruct_shape_and_reproducibility(toy_images):
    model = _toy_model()
    batch = toy_images.subset(slice(0, 6))
    a = reconstruct(model, batch, np.random.default_rng(4), deterministic_y=True)
    b = reconstruct(model, batch, np.random.default_rng(4), deterministic_y=True)
    assert a.domain == UNIT
    assert a.pixels.shape == batch.pixels.shape
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_reconstruct_rejects_logit_batches():
    with pytest.raises(DomainError):
        _toy_model().reconstruct(ImageBatch(np.zeros((1, 4, 4, 1)), LOGIT), np.random.default_rng(0))


# =============================================================================
# Evaluation
# =============================================================================

def test_evaluate_reports_bits_per_dim(toy_images):
    model = _toy_model()
    summary, breakdown = evaluate(model, toy_images, np.random.default_rng(0), batch_size=20)
    assert summary['n'] == len(toy_images) == len(breakdown)
    assert np.isfinite(summary['bits_per_dim'])
    assert summary['bits_per_dim'] == pytest.approx(bits_per_dim(breakdown, 16, n_bins=256))


def test_evaluate_needs_data(toy_images):
    with pytest.raises(ContractError):
        evaluate(_toy_model(), toy_images.subset(slice(0, 0)), np.random.default_rng(0))


def test_build_model_dispatches_on_kind():
    assert isinstance(build_model(load_preset('toy').model), VapnevModel)
    assert isinstance(build_model(load_preset('toy2d').model), FlowDensityModel)
    with pytest.raises(ConfigError):
        VapnevModel(load_preset('toy2d').model)


# =============================================================================
# 2D flow density and the Gaussian baseline
# =============================================================================

def test_flow_density_log_prob_is_change_of_variables(double, rng):
    model = FlowDensityModel(load_preset('toy2d').model, seed=1)
    randomize_multipliers(model, rng, spread=0.2)
    x = rng.normal(size=(5, 2))
    lp, y, logdet = model.log_prob(x)
    expected = -0.5 * np.sum(y.data ** 2, axis=1) - LOG_2PI + logdet.data
    np.testing.assert_allclose(lp.data, expected, rtol=1e-12)
    assert not model.flow.conditional


def test_flow_density_elbo_has_no_kl(double, rng):
    model = FlowDensityModel(load_preset('toy2d').model, seed=1)
    batch = ImageBatch(rng.normal(size=(8, 2)), POINTS)
    x, correction = model.prepare(batch)
    out = model.elbo(x, correction, rng)
    np.testing.assert_array_equal(out.kl, 0.0)
    assert out.loss.item() == pytest.approx(-np.mean(out.elbo), rel=1e-12)


def test_flow_density_sample_shape(rng):
    assert FlowDensityModel(load_preset('toy2d').model).sample(7, rng).shape == (7, 2)


def test_flow_density_needs_points(toy_images):
    with pytest.raises(DomainError):
        FlowDensityModel(load_preset('toy2d').model).prepare(toy_images)


def test_gaussian_mle_nll_of_standard_normal(rng):
    points = rng.standard_normal((200000, 2))
    assert gaussian_mle_nll(points) == pytest.approx(math.log(2 * math.pi) + 1.0, abs=0.02)


def test_gaussian_mle_nll_needs_points():
    with pytest.raises(ContractError):
        gaussian_mle_nll(np.zeros((1, 2)))


def test_discrete_batches_are_dequantized_before_reconstruction():
    images = synthetic_images(2, (4, 4, 1), np.random.default_rng(0))
    assert images.domain == DISCRETE
    out = _toy_model().reconstruct(images, np.random.default_rng(0))
    assert np.all((out.pixels >= 0) & (out.pixels <= 1))
