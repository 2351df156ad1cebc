"""
Tests for vn_flows: masks, coupling layers, the conditioner pair, squeeze and the multi-scale stack.
"""
import numpy as np
import pytest

from vn_autodiff import Tensor, matmul, precision
from vn_config import FlowConfig, load_preset
from vn_errors import ContractError, ShapeError
from vn_flows import (CHANNELWISE, CHECKERBOARD, ConditionerPair, CouplingLayer, FlowStack, Mask, apply_mask_split,
                      conditioner_eval, coupling_forward, coupling_inverse, flow_forward, flow_inverse,
                      merge_mask_split, squeeze, unsqueeze)
from vn_verify import dense_jacobian, logdet_oracle_case, randomize_multipliers, vector_flow

SMALL = FlowConfig(n_scales=1, checkerboard_per_scale=2, channelwise_per_scale=2, res_filters=4, res_blocks=1,
                   z_channels=2)


def _zero_multipliers(module):
    for name, p in module.named_parameters():
        if name.rsplit('.', 1)[-1] in ('alpha', 'beta1', 'beta2', 'bias'):
            p.data[...] = 0.0


# =============================================================================
# Masks
# =============================================================================

def test_checkerboard_splits_2x2_evenly():
    for parity in (0, 1):
        m = Mask(CHECKERBOARD, parity).realize((2, 2, 1))
        assert m.sum() == 2
    even, odd = Mask(CHECKERBOARD, 0).realize((4, 4, 3)), Mask(CHECKERBOARD, 1).realize((4, 4, 3))
    np.testing.assert_array_equal(even + odd, np.ones((4, 4, 3)))
    assert even[0, 0, 0] == 1 and even[0, 1, 0] == 0 and even[1, 1, 2] == 1


def test_channelwise_halves():
    m = Mask(CHANNELWISE, 0).realize((2, 2, 4))
    assert m[0, 0].tolist() == [1, 1, 0, 0]
    assert Mask(CHANNELWISE, 1).realize((2, 2, 4))[1, 1].tolist() == [0, 0, 1, 1]


def test_channelwise_needs_two_channels():
    with pytest.raises(ShapeError):
        Mask(CHANNELWISE, 0).realize((4, 4, 1))


def test_vector_masks():
    assert Mask(CHECKERBOARD, 0).realize((4,)).tolist() == [1, 0, 1, 0]
    assert Mask(CHANNELWISE, 1).realize((4,)).tolist() == [0, 0, 1, 1]


def test_split_merge_round_trip(double, rng):
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    kept, moving = apply_mask_split(x, Mask(CHECKERBOARD, 1).realize((4, 4, 3)))
    np.testing.assert_array_equal(merge_mask_split(kept, moving).data, x.data)


def test_all_ones_mask_moves_nothing(double, rng):
    x = Tensor(rng.normal(size=(2, 3)))
    kept, moving = apply_mask_split(x, np.ones(3))
    np.testing.assert_array_equal(moving.data, 0.0)
    np.testing.assert_array_equal(kept.data, x.data)


def test_non_binary_mask():
    with pytest.raises(ContractError):
        apply_mask_split(Tensor(np.ones((1, 2))), np.array([0.5, 1.0]))


def test_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        apply_mask_split(Tensor(np.ones((1, 3))), np.array([0.0, 1.0]))


# =============================================================================
# Coupling layer
# =============================================================================

def _hand_layer():
    # l(x1) = x1 and m(x1) = x1, written as a linear map of the kept part
    w = Tensor(np.array([[1.0, 1.0], [0.0, 0.0]]))
    net = lambda kept, z: matmul(kept, w)  # noqa: E731
    return CouplingLayer((2,), np.array([1.0, 0.0]), 0, None, None, conditional=False,
                         scale_net=net, shift_net=net, scale_activation='none')


def test_hand_coupling_forward(double):
    y, logdet = coupling_forward(Tensor([[1.0, 1.0]]), None, _hand_layer())
    np.testing.assert_allclose(y.data, [[1.0, np.e + 1.0]])
    assert logdet.data[0] == pytest.approx(1.0)


def test_hand_coupling_inverse(double):
    x = coupling_inverse(Tensor([[1.0, np.e + 1.0]]), None, _hand_layer())
    np.testing.assert_allclose(x.data, [[1.0, 1.0]], atol=1e-12)


def test_zero_multipliers_give_identity(double, rng):
    layer = CouplingLayer((4, 4, 2), Mask(CHECKERBOARD, 0), 3, SMALL, rng)
    randomize_multipliers(layer, rng)
    _zero_multipliers(layer)
    x = Tensor(rng.normal(size=(2, 4, 4, 2)))
    z = Tensor(rng.normal(size=(2, 3)))
    y, logdet = layer.forward(x, z)
    np.testing.assert_array_equal(y.data, x.data)
    np.testing.assert_array_equal(logdet.data, 0.0)
    np.testing.assert_array_equal(layer.inverse(y, z).data, x.data)


def test_kept_components_are_copied(double, rng):
    layer = CouplingLayer((4, 4, 2), Mask(CHECKERBOARD, 1), 3, SMALL, rng)
    layer.randomize(rng)
    mask = layer.mask_array.astype(bool)
    x = Tensor(rng.normal(size=(1, 4, 4, 2)))
    y, _ = layer.forward(x, Tensor(rng.normal(size=(1, 3))))
    np.testing.assert_array_equal(y.data[0][mask], x.data[0][mask])
    assert not np.allclose(y.data[0][~mask], x.data[0][~mask])


def test_conditional_layer_needs_z(rng):
    layer = CouplingLayer((4, 4, 2), Mask(CHECKERBOARD, 0), 3, SMALL, rng)
    with pytest.raises(ContractError):
        layer.forward(Tensor(np.zeros((1, 4, 4, 2))))


def test_coupling_logdet_matches_dense_jacobian(double, rng):
    layer = CouplingLayer((8,), Mask(CHECKERBOARD, 0), 3, SMALL, rng)
    layer.randomize(rng, scale=0.3)
    x = rng.normal(size=8)
    z = Tensor(rng.normal(size=(1, 3)))
    _, logdet = layer.forward(Tensor(x[None, :]), z)
    jac = dense_jacobian(lambda v: layer.forward(Tensor(v[None, :]), z)[0].data[0], x)
    _, oracle = np.linalg.slogdet(jac)
    assert abs(logdet.data[0] - oracle) / max(1.0, abs(oracle)) < 1e-5


def test_bad_scale_activation(rng):
    with pytest.raises(ContractError):
        CouplingLayer((4,), Mask(CHECKERBOARD, 0), 2, SMALL, rng, scale_activation='relu')


# =============================================================================
# Conditioner pair
# =============================================================================

def test_zero_conditioner_outputs_zero(double, rng):
    pair = ConditionerPair((4, 4, 2), 3, SMALL, rng)
    pair.randomize(rng)
    _zero_multipliers(pair)
    out = conditioner_eval(pair, Tensor(rng.normal(size=(2, 4, 4, 2))), Tensor(rng.normal(size=(2, 3))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_conditioner_ignores_z_without_z_multipliers(double, rng):
    pair = ConditionerPair((4, 4, 2), 3, SMALL, rng)
    pair.randomize(rng)
    pair.alpha.data[...] = 0.0
    pair.beta2.data[...] = 0.0
    x = Tensor(rng.normal(size=(1, 4, 4, 2)))
    a = pair(x, Tensor(rng.normal(size=(1, 3)))).data
    b = pair(x, Tensor(rng.normal(size=(1, 3)))).data
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_multipliers_broadcast_like_tiled_arrays(double, rng):
    pair = ConditionerPair((4, 4, 2), 3, SMALL, rng)
    pair.randomize(rng)
    x = Tensor(rng.normal(size=(2, 4, 4, 2)))
    z = Tensor(rng.normal(size=(2, 3)))
    l1, l2 = pair.f1(x).data, pair.f2(z).data

    def tiled(p):
        return np.tile(p.data, (2, 4, 4, 1))

    expected = tiled(pair.alpha) * l1 * l2 + tiled(pair.beta1) * l1 + tiled(pair.beta2) * l2 + tiled(pair.bias)
    np.testing.assert_allclose(pair(x, z).data, expected, rtol=1e-12, atol=1e-14)


def test_unconditional_pair_has_no_z_path(double, rng):
    pair = ConditionerPair((4,), 3, SMALL, rng, conditional=False)
    assert not hasattr(pair, 'f2')
    assert set(pair.parameters()) >= {'beta1', 'bias'}
    assert 'alpha' not in pair.parameters()
    assert pair(Tensor(rng.normal(size=(2, 4)))).shape == (2, 4)


def test_conditional_pair_needs_z(rng):
    pair = ConditionerPair((4,), 3, SMALL, rng)
    with pytest.raises(ContractError):
        pair(Tensor(np.zeros((1, 4))))


# =============================================================================
# Squeeze
# =============================================================================

def test_squeeze_preserves_values(rng):
    x = rng.normal(size=(1, 4, 4, 1))
    out = squeeze(x)
    assert out.shape == (1, 2, 2, 4)
    np.testing.assert_array_equal(np.sort(out.data.ravel()), np.sort(x.ravel().astype(np.float32)))


def test_squeeze_block_order():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert squeeze(x).data[0, 0, 0].tolist() == [1.0, 2.0, 3.0, 4.0]


def test_squeeze_round_trip(double, rng):
    x = rng.normal(size=(2, 6, 4, 3))
    np.testing.assert_array_equal(unsqueeze(squeeze(x)).data, x)


def test_squeeze_needs_even_extents():
    with pytest.raises(ShapeError):
        squeeze(np.zeros((1, 3, 4, 1)))
    with pytest.raises(ShapeError):
        unsqueeze(np.zeros((1, 2, 2, 3)))


# =============================================================================
# Stack
# =============================================================================

def test_stack_layout(rng):
    stack = FlowStack((8, 8, 3), 4, SMALL, rng)
    assert stack.output_shape == (4, 4, 12)
    assert stack.n_squeeze == 1
    assert [layer.mask.kind for layer in stack.layers] == [CHECKERBOARD] * 2 + [CHANNELWISE] * 2
    assert [layer.mask.parity for layer in stack.layers] == [0, 1, 0, 1]


def test_identity_stack(double, rng):
    stack = vector_flow(6, 3, rng)
    _zero_multipliers(stack)
    x = Tensor(rng.normal(size=(3, 6)))
    z = Tensor(rng.normal(size=(3, 3)))
    y, logdet = flow_forward(x, z, stack)
    np.testing.assert_array_equal(y.data, x.data)
    np.testing.assert_array_equal(logdet.data, 0.0)
    np.testing.assert_array_equal(flow_inverse(y, z, stack).data, x.data)


def test_identity_image_stack_only_squeezes(double, rng):
    stack = FlowStack((4, 4, 2), 3, SMALL, rng)
    _zero_multipliers(stack)
    x = Tensor(rng.normal(size=(1, 4, 4, 2)))
    y, logdet = stack(x, Tensor(rng.normal(size=(1, 3))))
    np.testing.assert_array_equal(y.data, squeeze(x).data)
    np.testing.assert_array_equal(logdet.data, 0.0)


def test_stack_logdet_is_sum_of_layer_logdets(double, rng):
    cfg = FlowConfig(n_scales=1, checkerboard_per_scale=2, channelwise_per_scale=0, res_filters=4, res_blocks=1)
    stack = FlowStack((6,), 3, cfg, rng)
    stack.randomize(rng, scale=0.3)
    x = Tensor(rng.normal(size=(2, 6)))
    z = Tensor(rng.normal(size=(2, 3)))
    y, total, per_layer = stack.forward(x, z, return_layers=True)
    first, second = stack.layers
    h, ld1 = first.forward(x, z)
    _, ld2 = second.forward(h, z)
    np.testing.assert_array_equal(per_layer[0].data, ld1.data)
    np.testing.assert_array_equal(per_layer[1].data, ld2.data)
    np.testing.assert_array_equal(total.data, ld1.data + ld2.data)


@pytest.mark.parametrize('d', [2, 4, 8, 16])
def test_stack_logdet_matches_dense_jacobian(double, d):
    for case in range(3):
        reported, oracle = logdet_oracle_case(d, np.random.default_rng([d, case]))
        assert abs(reported - oracle) / max(1.0, abs(oracle)) < 1e-5


def test_broken_logdet_hook_is_detected(double):
    reported, oracle = logdet_oracle_case(4, np.random.default_rng(0), break_logdet=True)
    assert abs(reported - oracle) > 0.1


def test_every_component_is_transformed(double, rng):
    stack = vector_flow(4, 3, rng)
    stack.randomize(rng, scale=0.3)
    z = Tensor(rng.normal(size=(1, 3)))
    jac = dense_jacobian(lambda v: stack(Tensor(v[None, :]), z)[0].data[0], rng.normal(size=4))
    for row in range(4):
        unit = np.zeros(4)
        unit[row] = 1.0
        assert not np.allclose(jac[row], unit, atol=1e-6)


@pytest.mark.parametrize('kind,tolerance', [('double', 1e-9), ('single', 1e-4)])
def test_desk_stack_round_trip(kind, tolerance):
    cfg = load_preset('desk').model
    with precision(kind):
        for case in range(5):
            rng = np.random.default_rng([7, case])
            stack = FlowStack(tuple(cfg.data_shape), cfg.latent.z_dim, cfg.flow, rng)
            randomize_multipliers(stack, rng)
            x = Tensor(rng.normal(0.0, 1.5, size=(2, 8, 8, 3)))
            z = Tensor(rng.normal(size=(2, cfg.latent.z_dim)))
            y, _ = stack(x, z)
            back = stack.inverse(y, z)
            assert np.max(np.abs(back.data.astype(np.float64) - x.data.astype(np.float64))) < tolerance


def test_changing_z_breaks_round_trip(double, rng):
    stack = FlowStack((4, 4, 2), 3, SMALL, rng)
    stack.randomize(rng, scale=0.3)
    x = Tensor(rng.normal(size=(1, 4, 4, 2)))
    y, _ = stack(x, Tensor(rng.normal(size=(1, 3))))
    back = stack.inverse(y, Tensor(rng.normal(size=(1, 3))))
    assert np.max(np.abs(back.data - x.data)) > 1e-3


def test_unconditioned_layers_ignore_z(double, rng):
    cfg = FlowConfig(n_scales=1, checkerboard_per_scale=2, channelwise_per_scale=0, res_filters=4, res_blocks=1,
                     unconditioned_layers=[1])
    stack = FlowStack((4,), 3, cfg, rng)
    assert [layer.conditional for layer in stack.layers] == [True, False]


def test_stack_shape_errors(rng):
    with pytest.raises(ShapeError):
        FlowStack((5, 4, 1), 3, SMALL, rng)
    stack = FlowStack((4, 4, 2), 3, SMALL, rng)
    with pytest.raises(ShapeError):
        stack(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((1, 3))))
    with pytest.raises(ShapeError):
        stack.inverse(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((1, 3))))
