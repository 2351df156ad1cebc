"""
Encoder, decoder and the conditioner networks used inside coupling layers.

Everything is built from a small Module base holding named parameters, so a whole model can be
walked as {qualified name: Tensor} for the optimizer and the checkpoint writer.
"""
import math

import numpy as np

from vn_autodiff import Tensor, parameter, conv2d, deconv2d, matmul, default_dtype
from vn_distributions import GaussianParams
from vn_errors import ConfigError, ShapeError


LEAKY_SLOPE = 0.01


# ============================================================
# MODULE BASE
# ============================================================
class Module:

    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, array):
        t = parameter(np.asarray(array, dtype=default_dtype()), name=name)
        self._params[name] = t
        return t

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=''):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return dict(self.named_parameters())

    def num_parameters(self):
        return sum(p.size for _, p in self.named_parameters())

    def randomize(self, rng, scale=0.3):
        """Overwrite every parameter with N(0, scale^2) noise (oracle tests only)."""
        for _, p in self.named_parameters():
            p.data[...] = rng.normal(0.0, scale, size=p.shape)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng, shape, fan_in, gain=1.0):
    """Fan-in scaled uniform: U(-b, b), b = gain * sqrt(3 / fan_in) (unit variance for gain 1)."""
    bound = gain * math.sqrt(3.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def as_input(x, like):
    """Plain arrays become constants in the model's dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


# ============================================================
# LAYERS
# ============================================================
class Linear(Module):

    def __init__(self, n_in, n_out, rng, gain=1.0):
        super().__init__()
        self.w = self.add_param('w', uniform_init(rng, (n_in, n_out), n_in, gain))
        self.b = self.add_param('b', np.zeros(n_out))

    def forward(self, x):
        return matmul(x, self.w) + self.b


class Conv2d(Module):

    def __init__(self, c_in, c_out, kernel_size, rng, stride=1, gain=1.0):
        super().__init__()
        k = kernel_size
        self.stride = stride
        self.w = self.add_param('w', uniform_init(rng, (k, k, c_in, c_out), k * k * c_in, gain))
        self.b = self.add_param('b', np.zeros(c_out))

    def forward(self, x):
        return conv2d(x, self.w, self.stride, 'same') + self.b


class Deconv2d(Module):
    """Stride-s transposed convolution with 'same' geometry: H -> H * s."""

    def __init__(self, c_in, c_out, kernel_size, rng, stride=2, gain=1.0):
        super().__init__()
        k = kernel_size
        self.stride = stride
        fan_in = k * k * c_in // (stride * stride) or 1
        self.w = self.add_param('w', uniform_init(rng, (k, k, c_out, c_in), fan_in, gain))
        self.b = self.add_param('b', np.zeros(c_out))

    def forward(self, x):
        return deconv2d(x, self.w, self.stride, 'same') + self.b


class ResidualBlock(Module):
    """
    x + scale * F(x), F = conv -> leaky relu -> conv (or the dense equivalent).

    `scale` is per-channel and starts at zero, so a fresh block is the identity.
    """

    def __init__(self, width, rng, dense=False, kernel_size=3):
        super().__init__()
        if dense:
            self.inner = self.add_child('inner', Linear(width, width, rng, gain=math.sqrt(2.0)))
            self.outer = self.add_child('outer', Linear(width, width, rng))
        else:
            self.inner = self.add_child('inner', Conv2d(width, width, kernel_size, rng, gain=math.sqrt(2.0)))
            self.outer = self.add_child('outer', Conv2d(width, width, kernel_size, rng))
        self.width = width
        self.scale = self.add_param('scale', np.zeros(width))

    def forward(self, x):
        if x.shape[-1] != self.width:
            raise ShapeError(f"residual block of width {self.width} got {x.shape[-1]} channels")
        return x + self.outer(self.inner(x).leaky_relu(LEAKY_SLOPE)) * self.scale


def residual_block(block, x):
    return block(x)


# ============================================================
# ENCODER / DECODER
# ============================================================
def _check_divisible(data_shape, down, what):
    h, w = data_shape[0], data_shape[1]
    if h % down or w % down:
        raise ShapeError(f"{what}: {h}x{w} inputs are not divisible by the stride schedule's {down}x downsampling")


class Encoder(Module):
    """Strided conv stack -> flattened features -> separate linear heads for mu_z and log_var_z."""

    def __init__(self, cfg, data_shape, z_dim, rng, logvar_clamp=15.0):
        super().__init__()
        h, w, c = data_shape
        down = cfg.downsampling()
        _check_divisible(data_shape, down, 'encoder')
        self.data_shape = tuple(data_shape)
        self.slope = cfg.activation_slope
        self.clamp = logvar_clamp
        self.convs = []
        c_in = c
        for i, (f, s) in enumerate(zip(cfg.filters(), cfg.strides())):
            self.convs.append(self.add_child(f"conv{i}", Conv2d(c_in, f, cfg.kernel_size, rng, s, gain=math.sqrt(2.0))))
            c_in = f
        self.feature_shape = (h // down, w // down, c_in)
        n_feat = int(np.prod(self.feature_shape))
        self.mu_head = self.add_child('mu', Linear(n_feat, z_dim, rng))
        self.logvar_head = self.add_child('logvar', Linear(n_feat, z_dim, rng, gain=0.1))

    def forward(self, x):
        if tuple(x.shape[1:]) != self.data_shape:
            raise ShapeError(f"encoder expects [N, {', '.join(map(str, self.data_shape))}], got {x.shape}")
        h = x
        for conv in self.convs:
            h = conv(h).leaky_relu(self.slope)
        flat = h.reshape(h.shape[0], -1)
        log_var = self.logvar_head(flat).clip(-self.clamp, self.clamp)
        return GaussianParams(self.mu_head(flat), log_var)


class Decoder(Module):
    """
    Mirror of the encoder: z -> linear projection to the encoder's final feature shape ->
    stride-2 deconvolutions back to the data resolution. The Y-space mean and log-variance
    heads are linear convolutions with a 2^s x 2^s kernel and stride 2^s (s = number of
    squeezes in the flow), so their output lands directly on the flow's output shape.
    """

    def __init__(self, cfg, data_shape, z_dim, y_shape, n_squeeze, rng, logvar_clamp=15.0):
        super().__init__()
        h, w, _ = data_shape
        down = cfg.downsampling()
        _check_divisible(data_shape, down, 'decoder')
        filters = list(reversed(cfg.filters()))
        strides = list(reversed(cfg.strides()))
        self.z_dim = z_dim
        self.slope = cfg.activation_slope
        self.clamp = logvar_clamp
        self.start_shape = (h // down, w // down, filters[0])
        self.proj = self.add_child('proj', Linear(z_dim, int(np.prod(self.start_shape)), rng, gain=math.sqrt(2.0)))
        self.layers = []
        outs = filters[1:] + [cfg.base_filters]
        for i, (c_in, c_out, s) in enumerate(zip(filters, outs, strides)):
            if s == 2:
                layer = Deconv2d(c_in, c_out, cfg.kernel_size, rng, stride=2, gain=math.sqrt(2.0))
            else:
                layer = Conv2d(c_in, c_out, cfg.kernel_size, rng, stride=1, gain=math.sqrt(2.0))
            self.layers.append(self.add_child(f"layer{i}", layer))
        factor = 2 ** n_squeeze
        self.y_shape = tuple(y_shape)
        if (h // factor, w // factor) != self.y_shape[:2]:
            raise ShapeError(f"decoder heads cannot reach Y shape {self.y_shape} from {h}x{w} with {n_squeeze} squeezes")
        self.mu_head = self.add_child('mu', Conv2d(cfg.base_filters, self.y_shape[2], factor, rng, stride=factor))
        self.logvar_head = self.add_child('logvar', Conv2d(cfg.base_filters, self.y_shape[2], factor, rng, stride=factor, gain=0.1))

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ShapeError(f"decoder expects z of shape [N, {self.z_dim}], got {z.shape}")
        h = self.proj(z).reshape((z.shape[0],) + self.start_shape).leaky_relu(self.slope)
        for layer in self.layers:
            h = layer(h).leaky_relu(self.slope)
        mu = self.mu_head(h)
        log_var = self.logvar_head(h).clip(-self.clamp, self.clamp)
        if tuple(mu.shape[1:]) != self.y_shape:
            raise ShapeError(f"decoder heads produced {mu.shape[1:]}, flow output is {self.y_shape}")
        return h, GaussianParams(mu, log_var)


# ============================================================
# CONDITIONER NETWORKS
# ============================================================
class ResNetConditioner(Module):
    """
    f1: the x-side network of a coupling conditioner. Keeps the input's shape
    (image: 3x3 convs, vector: dense layers) with `n_blocks` residual blocks in between.
    """

    def __init__(self, channels, width, n_blocks, rng, dense=False, out_gain=0.1):
        super().__init__()
        layer = (lambda a, b, g: Linear(a, b, rng, gain=g)) if dense else (lambda a, b, g: Conv2d(a, b, 3, rng, gain=g))
        self.entry = self.add_child('entry', layer(channels, width, math.sqrt(2.0)))
        self.blocks = [self.add_child(f"block{i}", ResidualBlock(width, rng, dense=dense)) for i in range(n_blocks)]
        self.exit = self.add_child('exit', layer(width, channels, out_gain))

    def forward(self, x):
        h = self.entry(x)
        for block in self.blocks:
            h = block(h)
        return self.exit(h.leaky_relu(LEAKY_SLOPE))


class DeconvConditioner(Module):
    """
    f2: the z-side network. A linear projection of z to a 2x2xc map, stride-2 deconvolutions
    until the map covers the target extents, then a stride-1 conv to the target channel count
    and a crop when the target is not a power-of-two multiple of 2 (or is smaller than 2x2).
    """

    def __init__(self, z_dim, target_shape, z_channels, rng, out_gain=0.1):
        super().__init__()
        th, tw, tc = target_shape
        self.target_shape = tuple(target_shape)
        self.z_dim = z_dim
        self.zc = z_channels
        self.proj = self.add_child('proj', Linear(z_dim, 4 * z_channels, rng, gain=math.sqrt(2.0)))
        self.ups = []
        size = 2
        while size < max(th, tw):
            self.ups.append(self.add_child(f"up{len(self.ups)}", Deconv2d(z_channels, z_channels, 3, rng, stride=2, gain=math.sqrt(2.0))))
            size *= 2
        self.exit = self.add_child('exit', Conv2d(z_channels, tc, 3, rng, stride=1, gain=out_gain))

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ShapeError(f"conditioner expects z of shape [N, {self.z_dim}], got {z.shape}")
        h = self.proj(z).reshape(z.shape[0], 2, 2, self.zc).leaky_relu(LEAKY_SLOPE)
        for up in self.ups:
            h = up(h).leaky_relu(LEAKY_SLOPE)
        h = self.exit(h)
        th, tw, _ = self.target_shape
        if h.shape[1] != th or h.shape[2] != tw:
            h = h[:, :th, :tw, :]
        return h


class DenseConditioner(Module):
    """f2 for vector data: z -> hidden -> D."""

    def __init__(self, z_dim, n_out, width, rng, out_gain=0.1):
        super().__init__()
        self.z_dim = z_dim
        self.hidden = self.add_child('hidden', Linear(z_dim, width, rng, gain=math.sqrt(2.0)))
        self.exit = self.add_child('exit', Linear(width, n_out, rng, gain=out_gain))

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ShapeError(f"conditioner expects z of shape [N, {self.z_dim}], got {z.shape}")
        return self.exit(self.hidden(z).leaky_relu(LEAKY_SLOPE))


def check_stride_schedule(cfg, data_shape):
    if len(data_shape) != 3:
        raise ConfigError("image networks need data_shape [H, W, C]")
    _check_divisible(data_shape, cfg.downsampling(), 'network')
