"""
Dense NHWC tensors on top of numpy with a reverse-mode tape, plus the ADAM optimizer.

Usage:

    with Tape() as tape:
        loss = ((w * x).sum() - 3.0).square()
    grads = backward(loss, tape)   # {w: ndarray, ...}

Ops only record when a tape is active on the current thread and some input requires grad;
outside a tape everything runs in inference mode.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from vn_errors import ContractError, DomainError, NumericsError, ShapeError, ConfigError


_DTYPES = {'single': np.float32, 'double': np.float64}
_local = threading.local()


# ============================================================
# PRECISION
# ============================================================
def _resolve_dtype(kind):
    if kind in _DTYPES:
        return _DTYPES[kind]
    dt = np.dtype(kind)
    if dt not in (np.float32, np.float64):
        raise ConfigError(f"unsupported precision '{kind}' (use 'single' or 'double')")
    return dt.type


def default_dtype():
    return getattr(_local, 'dtype', np.float32)


def set_default_dtype(kind):
    _local.dtype = _resolve_dtype(kind)


@contextmanager
def precision(kind):
    """Temporarily switch the dtype used for new tensors ('single' for training, 'double' for oracles)."""
    previous = default_dtype()
    set_default_dtype(kind)
    try:
        yield
    finally:
        _local.dtype = previous


# ============================================================
# TAPE
# ============================================================
class _Record:
    __slots__ = ('inputs', 'output', 'backward')

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """
    Ordered record of differentiable ops. Records are appended as ops execute, so inputs
    always precede the ops consuming them. A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_local, 'tapes', None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    stack = getattr(_local, 'tapes', None)
    return stack[-1] if stack else None


# ============================================================
# TENSOR
# ============================================================
class Tensor:
    """N-dimensional array with an optional gradient slot. Image tensors are NHWC."""

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    # --- metadata ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        label = f" '{self.name}'" if self.name else ''
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype}{flag}>"

    def __len__(self):
        return self.shape[0]

    # --- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return crop(self, index)

    # --- method forms -----------------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def square(self):
        return square(self)

    def leaky_relu(self, slope=0.01):
        return leaky_relu(self, slope)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def parameter(data, name=None, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def _emit(data, inputs, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(tuple(inputs), out, backward_fn))
    return out


# ============================================================
# BROADCASTING
# ============================================================
def broadcast_shape(a_shape, b_shape):
    """
    Numpy-style broadcast shape. The usual case is a per-channel vector [C] against an NHWC
    tensor: trailing axes align, so the vector repeats over every N, H, W location.
    """
    try:
        return tuple(np.broadcast_shapes(tuple(a_shape), tuple(b_shape)))
    except ValueError:
        raise ShapeError(f"shapes {tuple(a_shape)} and {tuple(b_shape)} are not broadcastable") from None


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squash:
        grad = grad.sum(axis=squash, keepdims=True)
    return grad.reshape(shape)


# ============================================================
# ELEMENTWISE
# ============================================================
def add(a, b):
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = Tensor(a)
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    return _lift(a, b), b


def neg(a):
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a):
    with np.errstate(over='ignore'):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflow")
    return _emit(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a):
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def leaky_relu(a, slope=0.01):
    positive = a.data > 0
    out = np.where(positive, a.data, a.data * slope).astype(a.dtype, copy=False)
    return _emit(out, (a,), lambda g: (np.where(positive, g, g * slope).astype(g.dtype, copy=False),))


def clip(a, lo, hi):
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _emit(out, (a,), lambda g: (g * inside,))


# ============================================================
# REDUCTIONS AND LAYOUT
# ============================================================
def reduce_sum(a, axis=None, keepdims=False):
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _emit(out, (a,), back)


def reduce_mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inverse = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def crop(a, index):
    """Basic slicing (ints/slices only), e.g. x[:, :H, :W, :]."""
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)
    return _emit(np.ascontiguousarray(out), (a,), back)


# ============================================================
# LINEAR ALGEBRA
# ============================================================
def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims do not match: {a.shape} x {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ============================================================
# CONVOLUTION
# ============================================================
# 'same' padding: output extent ceil(H/stride); the total zero padding is split evenly,
# the odd pixel going to the bottom/right. 'valid': no padding.

def _axis_geometry(size, k, stride, padding):
    if padding == 'same':
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == 'valid':
        if k > size:
            raise ShapeError(f"kernel extent {k} larger than input extent {size}")
        return (size - k) // stride + 1, 0, 0
    raise ContractError(f"unknown padding '{padding}' (use 'same' or 'valid')")


def conv_geometry(hw, kernel_hw, stride, padding):
    """Returns ((Ho, Wo), (top, bottom, left, right)) for a cross-correlation."""
    if stride < 1:
        raise ContractError("stride must be >= 1")
    ho, pt, pb = _axis_geometry(hw[0], kernel_hw[0], stride, padding)
    wo, pl, pr = _axis_geometry(hw[1], kernel_hw[1], stride, padding)
    return (ho, wo), (pt, pb, pl, pr)


def _windows(x, kh, kw, stride, out_hw, pads):
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if any(pads) else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # [N, Ho, Wo, C, kh, kw]
    return win[:, ::stride, ::stride][:, :out_hw[0], :out_hw[1]]


def _correlate(x, k, stride, out_hw, pads):
    kh, kw = k.shape[:2]
    win = _windows(x, kh, kw, stride, out_hw, pads)
    return np.tensordot(win, k.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))


def _correlate_kernel_grad(x, g, kernel_shape, stride, pads):
    kh, kw = kernel_shape[:2]
    win = _windows(x, kh, kw, stride, g.shape[1:3], pads)
    gk = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))   # [C, kh, kw, F]
    return gk.transpose(1, 2, 0, 3)


def _scatter_transpose(g, k, stride, in_hw, pads):
    """Adjoint of _correlate w.r.t. its input: spread each output gradient back over its window."""
    n, ho, wo, _ = g.shape
    kh, kw, c, _ = k.shape
    pt, pb, pl, pr = pads
    h, w = in_hw
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=np.result_type(g, k))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += g @ k[i, j].T
    return dxp[:, pt:pt + h, pl:pl + w, :]


def conv2d(x, kernel, stride=1, padding='same'):
    """
    Cross-correlation of x [N,H,W,C] with kernel [kh,kw,C,F] -> [N,Ho,Wo,F].

    Raises ShapeError on rank/channel mismatch or a kernel larger than the padded input.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and [kh,kw,C,F] kernel, got {x.shape} and {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input C={x.shape[3]}, kernel C={kernel.shape[2]}")
    in_hw = x.shape[1:3]
    out_hw, pads = conv_geometry(in_hw, kernel.shape[:2], stride, padding)
    out = _correlate(x.data, kernel.data, stride, out_hw, pads)

    def back(g):
        gx = _scatter_transpose(g, kernel.data, stride, in_hw, pads) if x.requires_grad else None
        gk = _correlate_kernel_grad(x.data, g, kernel.shape, stride, pads) if kernel.requires_grad else None
        return gx, gk
    return _emit(out, (x, kernel), back)


def deconv2d(y, kernel, stride=1, padding='same', output_hw=None):
    """
    Transposed convolution: the adjoint of conv2d with the same kernel.

    y is [N,Ho,Wo,F], kernel is [kh,kw,C,F] (output channels C come third), and the result is
    [N,H,W,C] where (H, W) defaults to (Ho*stride, Wo*stride) for 'same' and
    ((Ho-1)*stride+kh, ...) for 'valid'.
    """
    if y.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"deconv2d expects NHWC input and [kh,kw,C,F] kernel, got {y.shape} and {kernel.shape}")
    if y.shape[3] != kernel.shape[3]:
        raise ShapeError(f"deconv2d channel mismatch: input F={y.shape[3]}, kernel F={kernel.shape[3]}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    kh, kw = kernel.shape[:2]
    ho, wo = y.shape[1:3]
    if output_hw is None:
        if padding == 'same':
            output_hw = (ho * stride, wo * stride)
        else:
            output_hw = ((ho - 1) * stride + kh, (wo - 1) * stride + kw)
    out_hw, pads = conv_geometry(output_hw, (kh, kw), stride, padding)
    if tuple(out_hw) != (ho, wo):
        raise ShapeError(f"deconv2d output extents {tuple(output_hw)} do not invert to input extents {(ho, wo)}")
    out = _scatter_transpose(y.data, kernel.data, stride, tuple(output_hw), pads)

    def back(g):
        gy = _correlate(g, kernel.data, stride, out_hw, pads) if y.requires_grad else None
        gk = _correlate_kernel_grad(g, y.data, kernel.shape, stride, pads) if kernel.requires_grad else None
        return gy, gk
    return _emit(out, (y, kernel), back)


# ============================================================
# BACKWARD
# ============================================================
def backward(loss, tape=None):
    """
    Reverse sweep over `tape` from a scalar loss.

    Returns {leaf Tensor: gradient ndarray} for every requires_grad leaf recorded on the tape;
    gradients from multiple uses of a tensor add up. Leaf `.grad` slots are set as well.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractError("backward() needs a tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not recorded on the tape")

    produced = {id(r.output) for r in tape.records}
    leaves = {}
    for record in tape.records:
        for t in record.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)

    pending = {id(loss): np.ones_like(loss.data)}
    for record in reversed(tape.records):
        g = pending.pop(id(record.output), None)
        if g is None:
            continue
        for t, gi in zip(record.inputs, record.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            pending[key] = pending[key] + gi if key in pending else gi

    grads = {}
    for key, leaf in leaves.items():
        g = pending.get(key)
        g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g
        grads[leaf] = g
    return grads


def value_and_grad(fn, params):
    """Run fn() under a fresh tape; return (loss Tensor, {name: grad}) for a named parameter map."""
    with Tape() as tape:
        loss = fn()
    grads = backward(loss, tape)
    return loss, {name: grads.get(p, np.zeros_like(p.data)) for name, p in params.items()}


# ============================================================
# ADAM
# ============================================================
ADAM_DEFAULTS = {'lr': 1e-3, 'beta1': 0.9, 'beta2': 0.999, 'eps': 1e-8}


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One bias-corrected ADAM update, applied in place to `params` ({name: Tensor}).

    `grads` maps the same names to ndarrays; a missing name counts as a zero gradient.
    Every gradient is checked before anything moves: a shape mismatch (ShapeError) or a non-finite
    value (NumericsError) refuses the whole step and leaves params and state untouched.
    """
    resolved = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError("non-finite gradient, ADAM step refused", term=f"grad:{name}")
        resolved[name] = g
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    step_size = lr / bc1
    for name, p in params.items():
        g = resolved[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (step_size * m / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return params, state


class Adam:
    """ADAM over a fixed named parameter map; defaults are the usual lr=1e-3, betas (0.9, 0.999), eps=1e-8."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, grads):
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def state_tensors(self):
        """Moments as a flat {name: ndarray} map ('adam.m/<param>', 'adam.v/<param>')."""
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"adam.m/{name}"] = self.state.m[name]
                out[f"adam.v/{name}"] = self.state.v[name]
        return out

    def load_state(self, tensors, t):
        self.state = AdamState(t=int(t))
        for name, p in self.params.items():
            m = tensors.get(f"adam.m/{name}")
            v = tensors.get(f"adam.v/{name}")
            if m is None or v is None:
                continue
            if m.shape != p.shape or v.shape != p.shape:
                raise ShapeError(f"ADAM moments for '{name}' do not match parameter shape {p.shape}")
            self.state.m[name] = np.array(m, dtype=p.dtype)
            self.state.v[name] = np.array(v, dtype=p.dtype)
