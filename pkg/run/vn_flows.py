"""
Affine coupling layers (plain and z-conditional), masks, squeeze, and the multi-scale stack.

Forward maps data x to the Y space and returns the exact log|det J| per sample; inverse maps
back given the same z. Masks are realized as binary arrays: 1 marks the components a layer
keeps (and conditions on), 0 the components it transforms.
"""
from dataclasses import dataclass

import numpy as np

from vn_autodiff import Tensor
from vn_errors import ContractError, ShapeError
from vn_networks import Module, ResNetConditioner, DeconvConditioner, DenseConditioner


CHECKERBOARD = 'checkerboard'
CHANNELWISE = 'channelwise'


# ============================================================
# MASKS
# ============================================================
@dataclass(frozen=True)
class Mask:
    kind: str
    parity: int

    def realize(self, shape):
        """Binary array for one sample of `shape` ([H, W, C] images or [D] vectors)."""
        if self.kind not in (CHECKERBOARD, CHANNELWISE) or self.parity not in (0, 1):
            raise ContractError(f"bad mask spec {self}")
        shape = tuple(shape)
        if len(shape) == 1:
            idx = np.arange(shape[0])
            if self.kind == CHECKERBOARD:
                keep = (idx % 2) == self.parity
            else:
                keep = (idx < shape[0] // 2) if self.parity == 0 else (idx >= shape[0] // 2)
            return keep.astype(np.float64)
        h, w, c = shape
        if self.kind == CHECKERBOARD:
            rows, cols = np.indices((h, w))
            keep = ((rows + cols) % 2 == self.parity)[:, :, None]
            return np.broadcast_to(keep, shape).astype(np.float64)
        if c < 2:
            raise ShapeError("channelwise masking needs at least 2 channels")
        half = np.arange(c) < c // 2
        keep = half if self.parity == 0 else ~half
        return np.broadcast_to(keep[None, None, :], shape).astype(np.float64)


def _check_mask(mask, x):
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask must be binary")
    if mask.shape != tuple(x.shape) and mask.shape != tuple(x.shape[1:]):
        raise ShapeError(f"mask shape {mask.shape} does not match input {x.shape}")
    return Tensor(mask, dtype=x.dtype)


def apply_mask_split(x, mask):
    """(kept, transformed) = (x * m, x * (1 - m)); both keep x's shape with zeros elsewhere."""
    m = _check_mask(mask, x)
    return x * m, x * (1.0 - m)


def merge_mask_split(kept, transformed):
    return kept + transformed


# ============================================================
# CONDITIONERS
# ============================================================
class ConditionerPair(Module):
    """
    l_z(x) = alpha * l1(x) * l2(z) + beta1 * l1(x) + beta2 * l2(z) + b

    l1 is a residual network on the masked input, l2 a deconvolution network on z; the four
    multipliers are per-channel vectors broadcast over every spatial location. Without z
    conditioning only beta1 * l1(x) + b remains.
    """

    def __init__(self, shape, z_dim, cfg, rng, conditional=True):
        super().__init__()
        shape = tuple(shape)
        dense = len(shape) == 1
        channels = shape[-1]
        self.conditional = conditional
        self.f1 = self.add_child('f1', ResNetConditioner(channels, cfg.res_filters, cfg.res_blocks, rng, dense=dense))
        if conditional:
            if dense:
                f2 = DenseConditioner(z_dim, channels, cfg.res_filters, rng)
            else:
                f2 = DeconvConditioner(z_dim, shape, cfg.z_channels, rng)
            self.f2 = self.add_child('f2', f2)
            self.alpha = self.add_param('alpha', np.zeros(channels))
            self.beta2 = self.add_param('beta2', np.ones(channels))
        self.beta1 = self.add_param('beta1', np.ones(channels))
        self.bias = self.add_param('bias', np.zeros(channels))

    def forward(self, x_part, z=None):
        l1 = self.f1(x_part)
        if not self.conditional:
            return l1 * self.beta1 + self.bias
        if z is None:
            raise ContractError("conditional conditioner needs z")
        l2 = self.f2(z)
        if l1.shape != l2.shape:
            raise ShapeError(f"l1(x) {l1.shape} and l2(z) {l2.shape} differ in shape")
        return self.alpha * l1 * l2 + self.beta1 * l1 + self.beta2 * l2 + self.bias


def conditioner_eval(pair, x_part, z=None):
    return pair(x_part, z)


# ============================================================
# COUPLING LAYER
# ============================================================
class CouplingLayer(Module):
    """
    y = x_kept + x_moving * exp(s) + t, with s, t functions of x_kept (and z).

    By default s = gate * tanh(l_z(x_kept)) with a learnable per-channel gate; pass
    scale_activation='none' for the raw exp(l) form. scale_net / shift_net may be replaced by
    any callable (kept, z) -> Tensor shaped like the input.
    """

    def __init__(self, shape, mask, z_dim, cfg, rng, conditional=True,
                 scale_net=None, shift_net=None, scale_activation='tanh'):
        super().__init__()
        self.shape = tuple(shape)
        self.mask = mask
        self.mask_array = mask.realize(self.shape) if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float64)
        self.conditional = conditional
        self.scale_activation = scale_activation
        if scale_net is None:
            scale_net = self.add_child('scale', ConditionerPair(self.shape, z_dim, cfg, rng, conditional))
        if shift_net is None:
            shift_net = self.add_child('shift', ConditionerPair(self.shape, z_dim, cfg, rng, conditional))
        self.scale_net = scale_net
        self.shift_net = shift_net
        if scale_activation == 'tanh':
            self.gate = self.add_param('gate', np.ones(self.shape[-1]))
        elif scale_activation != 'none':
            raise ContractError(f"unknown scale activation '{scale_activation}'")

    def _scale_shift(self, kept, z):
        if self.conditional and z is None:
            raise ContractError("conditional coupling layer needs z")
        free = 1.0 - Tensor(self.mask_array, dtype=kept.dtype)
        raw = self.scale_net(kept, z if self.conditional else None)
        s = raw.tanh() * self.gate if self.scale_activation == 'tanh' else raw
        t = self.shift_net(kept, z if self.conditional else None)
        return s * free, t * free

    def forward(self, x, z=None):
        kept, moving = apply_mask_split(x, self.mask_array)
        s, t = self._scale_shift(kept, z)
        y = kept + moving * s.exp() + t
        return y, s.reshape(s.shape[0], -1).sum(axis=1)

    def inverse(self, y, z=None):
        kept, moving = apply_mask_split(y, self.mask_array)
        s, t = self._scale_shift(kept, z)
        return kept + (moving - t) * (-s).exp()


def coupling_forward(x, z, layer):
    return layer.forward(x, z)


def coupling_inverse(y, z, layer):
    return layer.inverse(y, z)


# ============================================================
# SQUEEZE
# ============================================================
def squeeze(x):
    """
    [N, H, W, C] -> [N, H/2, W/2, 4C]. Output channel (2*dy + dx) * C + c holds the sub-pixel
    (dy, dx) of input channel c, i.e. blocks ordered top-left, top-right, bottom-left, bottom-right.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even extents, got {h}x{w}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4 * c)


def unsqueeze(y):
    if not isinstance(y, Tensor):
        y = Tensor(y)
    n, h, w, c4 = y.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs a channel count divisible by 4, got {c4}")
    c = c4 // 4
    return y.reshape(n, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, c)


# ============================================================
# STACK
# ============================================================
SQUEEZE = 'squeeze'


class FlowStack(Module):
    """
    Per scale: checkerboard couplings (parities 0, 1, 0, ...), a squeeze, channelwise couplings.
    Vector inputs skip the squeeze. No variables are factored out between scales: everything
    reaches the Y space.
    """

    def __init__(self, data_shape, z_dim, cfg, rng):
        super().__init__()
        shape = tuple(int(d) for d in data_shape)
        self.data_shape = shape
        self.image = len(shape) == 3
        self.steps = []
        index = 0
        for scale in range(cfg.n_scales):
            if self.image and (shape[0] % 2 or shape[1] % 2):
                raise ShapeError(f"{data_shape} is not divisible by 2^{cfg.n_scales}")
            for k in range(cfg.checkerboard_per_scale):
                layer = CouplingLayer(shape, Mask(CHECKERBOARD, k % 2), z_dim, cfg, rng, cfg.layer_conditional(index))
                self.steps.append(self.add_child(f"c{index}", layer))
                index += 1
            if self.image:
                self.steps.append(SQUEEZE)
                shape = (shape[0] // 2, shape[1] // 2, shape[2] * 4)
            for k in range(cfg.channelwise_per_scale):
                layer = CouplingLayer(shape, Mask(CHANNELWISE, k % 2), z_dim, cfg, rng, cfg.layer_conditional(index))
                self.steps.append(self.add_child(f"c{index}", layer))
                index += 1
        self.output_shape = shape
        self.n_squeeze = cfg.n_scales if self.image else 0
        self.conditional = any(isinstance(s, CouplingLayer) and s.conditional for s in self.steps)
        self.logdet_offset = 0.0   # verification hook; stays 0 outside the broken-logdet negative control

    @property
    def layers(self):
        return [s for s in self.steps if isinstance(s, CouplingLayer)]

    def _check(self, x):
        if tuple(x.shape[1:]) != self.data_shape:
            raise ShapeError(f"flow expects inputs of shape [N, {', '.join(map(str, self.data_shape))}], got {x.shape}")

    def forward(self, x, z=None, return_layers=False):
        """Returns (y, total_logdet[N]); total is accumulated left to right in layer order."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check(x)
        per_layer = []
        total = None
        h = x
        for step in self.steps:
            if step == SQUEEZE:
                h = squeeze(h)
                continue
            h, ld = step.forward(h, z)
            per_layer.append(ld)
            total = ld if total is None else total + ld
        if total is None:
            total = Tensor(np.zeros(x.shape[0]), dtype=x.dtype)
        if self.logdet_offset:
            total = total + self.logdet_offset
        return (h, total, per_layer) if return_layers else (h, total)

    def inverse(self, y, z=None):
        if not isinstance(y, Tensor):
            y = Tensor(y)
        if tuple(y.shape[1:]) != self.output_shape:
            raise ShapeError(f"flow inverse expects [N, {', '.join(map(str, self.output_shape))}], got {y.shape}")
        h = y
        for step in reversed(self.steps):
            h = unsqueeze(h) if step == SQUEEZE else step.inverse(h, z)
        return h


def flow_forward(x, z, stack):
    return stack.forward(x, z)


def flow_inverse(y, z, stack):
    return stack.inverse(y, z)
