"""
Dataset ingestion and the pixel-space <-> logit-space transforms.

Domain tags follow the path an image takes through training:
    discrete-u8  --dequantize-->  unit-interval  --logit_transform-->  logit-space
and back through inverse_logit_transform for samples and reconstructions. Unbounded point sets
(the 2D toy densities) carry the real-points tag and are used as they are.
"""
import os
import queue
import struct
import threading
from dataclasses import dataclass

import numpy as np

from vn_errors import ConfigError, ContractError, DomainError, FormatError, IoError, ShapeError
from vn_helpers import atomic_write_bytes


DISCRETE = 'discrete-u8'
UNIT = 'unit-interval'
LOGIT = 'logit-space'
POINTS = 'real-points'
DOMAINS = (DISCRETE, UNIT, LOGIT, POINTS)

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
VFT_MAGIC = b'VFT1'


@dataclass
class ImageBatch:
    """NHWC pixels plus the domain tag saying what the values mean."""
    pixels: np.ndarray
    domain: str

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DomainError(f"unknown domain tag '{self.domain}'")

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def image_shape(self):
        return tuple(self.pixels.shape[1:])

    def subset(self, index):
        return ImageBatch(self.pixels[index], self.domain)


def _expect(batch, domain, op):
    if batch.domain != domain:
        raise DomainError(f"{op} expects a {domain} batch, got {batch.domain}")


# ============================================================
# CIFAR-10 BINARY
# ============================================================
def load_cifar_binary(path, downscale=1):
    """
    Read a CIFAR-10 binary batch: 3073-byte records (label byte + 1024 R, 1024 G, 1024 B).

    Returns (ImageBatch(discrete-u8) of shape [N, 32/downscale, 32/downscale, 3], labels uint8[N]).
    Raises FormatError when the file is empty or not a whole number of records.
    """
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as e:
        raise IoError(f"could not read '{path}': {e}") from e
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"'{path}' is {raw.size} bytes, not a multiple of {CIFAR_RECORD} (truncated?)")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].copy()
    pixels = records[:, 1:].reshape((-1,) + CIFAR_SHAPE).transpose(0, 2, 3, 1)
    batch = ImageBatch(np.ascontiguousarray(pixels), DISCRETE)
    if downscale > 1:
        batch = downscale_area(batch, downscale)
    return batch, labels


def write_cifar_binary(path, batch, labels):
    _expect(batch, DISCRETE, 'write_cifar_binary')
    if batch.image_shape != (32, 32, 3):
        raise ShapeError(f"CIFAR records hold 32x32x3 images, got {batch.image_shape}")
    planar = batch.pixels.astype(np.uint8).transpose(0, 3, 1, 2).reshape(len(batch), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8).reshape(-1, 1), planar], axis=1)
    atomic_write_bytes(path, records.tobytes())


def downscale_area(batch, factor):
    """Area-average downscale of discrete images, rounded back to u8."""
    _expect(batch, DISCRETE, 'downscale_area')
    n, h, w, c = batch.pixels.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} images cannot be downscaled by {factor}")
    blocks = batch.pixels.reshape(n, h // factor, factor, w // factor, factor, c).astype(np.float64)
    small = np.rint(blocks.mean(axis=(2, 4)))
    return ImageBatch(np.clip(small, 0, 255).astype(np.uint8), DISCRETE)


# ============================================================
# RAW TENSOR FIXTURES (VFT1)
# ============================================================
def write_raw_tensor(path, array):
    """magic 'VFT1', u32 N,H,W,C little-endian, then float32 values."""
    array = np.asarray(array, dtype='<f4')
    if array.ndim == 2:
        array = array.reshape(array.shape[0], 1, 1, array.shape[1])
    if array.ndim != 4:
        raise ShapeError(f"VFT1 stores 4-d [N,H,W,C] arrays, got shape {array.shape}")
    header = VFT_MAGIC + struct.pack('<4I', *array.shape)
    atomic_write_bytes(path, header + array.tobytes())


def read_raw_tensor(path):
    try:
        with open(path, 'rb') as f:
            payload = f.read()
    except OSError as e:
        raise IoError(f"could not read '{path}': {e}") from e
    if len(payload) < 20 or payload[:4] != VFT_MAGIC:
        raise FormatError(f"'{path}' is not a VFT1 tensor file")
    shape = struct.unpack('<4I', payload[4:20])
    expected = int(np.prod(shape)) * 4
    if len(payload) - 20 != expected:
        raise FormatError(f"'{path}': payload is {len(payload) - 20} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype='<f4', offset=20).reshape(shape).astype(np.float32)


def load_dataset(path, downscale=1):
    """
    Load either a VFT1 fixture or a CIFAR-10 binary batch, sniffing the magic bytes.

    VFT1 arrays whose values are all integers in 0..255 come back as discrete-u8 images;
    anything else in [0, 1] as unit-interval.
    """
    if not os.path.exists(path):
        raise IoError(f"dataset not found: {path}")
    with open(path, 'rb') as f:
        head = f.read(4)
    if head == VFT_MAGIC:
        arr = read_raw_tensor(path)
        if np.all(arr == np.rint(arr)) and arr.min() >= 0 and arr.max() <= 255 and arr.max() > 1:
            batch = ImageBatch(arr.astype(np.uint8), DISCRETE)
            return downscale_area(batch, downscale) if downscale > 1 else batch
        if arr.min() < 0 or arr.max() > 1:
            raise FormatError(f"'{path}': values are neither 0..255 integers nor in [0, 1]")
        return ImageBatch(arr.astype(np.float64), UNIT)
    batch, _ = load_cifar_binary(path, downscale)
    return batch


def split_holdout(batch, fraction, seed):
    """Deterministic train/held-out split. fraction=0 returns (batch, empty batch)."""
    n = len(batch)
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * fraction))
    if fraction > 0 and n_test == 0 and n > 1:
        n_test = 1
    return batch.subset(np.sort(order[n_test:])), batch.subset(np.sort(order[:n_test]))


# ============================================================
# DEQUANTIZATION AND LOGIT SPACE
# ============================================================
def dequantize(batch, rng):
    """
    (pixel + u) / 256 with fresh u ~ U[0, 1) per component.

    Values land in [pixel/256, (pixel+1)/256) and are nudged off exact 0 and 1 so the logit
    never sees a boundary.
    """
    _expect(batch, DISCRETE, 'dequantize')
    u = rng.random(batch.pixels.shape)
    x = (batch.pixels.astype(np.float64) + u) / 256.0
    eps = np.finfo(np.float64).eps
    return ImageBatch(np.clip(x, eps, 1.0 - eps), UNIT)


def logit_transform(batch, alpha=0.05):
    """
    x' = alpha + (1 - alpha) x,  y = log(x' / (1 - x')).

    Returns (logit-space batch, per-sample correction in nats), the correction being
    sum over components of log((1 - alpha) / (x' (1 - x'))): the log-Jacobian of the map, which
    turns a logit-space density into a unit-interval one.
    """
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha}")
    _expect(batch, UNIT, 'logit_transform')
    x = batch.pixels.astype(np.float64)
    if np.any(x < 0) or np.any(x > 1):
        raise DomainError("logit_transform expects values in [0, 1]")
    xp = alpha + (1.0 - alpha) * x
    if np.any(xp <= 0.0) or np.any(xp >= 1.0):
        raise DomainError(f"logit_transform with alpha={alpha} maps a value onto 0 or 1; its logit is infinite")
    y = np.log(xp) - np.log1p(-xp)
    per_component = np.log1p(-alpha) - np.log(xp) - np.log1p(-xp)
    correction = per_component.reshape(len(batch), -1).sum(axis=1)
    return ImageBatch(y, LOGIT), correction


def inverse_logit_transform(batch, alpha=0.05):
    """x = (sigmoid(y) - alpha) / (1 - alpha), clamped to [0, 1]."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha}")
    _expect(batch, LOGIT, 'inverse_logit_transform')
    s = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(batch.pixels, dtype=np.float64)))
    return ImageBatch(np.clip((s - alpha) / (1.0 - alpha), 0.0, 1.0), UNIT)


def hflip_augment(batch, rng, p=0.5):
    """Mirror each image across its vertical axis with probability p (one draw per image)."""
    if batch.pixels.ndim != 4:
        raise ShapeError("hflip_augment expects NHWC images")
    flips = rng.random(len(batch)) < p
    pixels = batch.pixels.copy()
    pixels[flips] = pixels[flips][:, :, ::-1, :]
    return ImageBatch(pixels, batch.domain)


# ============================================================
# PPM EXPORT
# ============================================================
def write_ppm_grid(images, cols, path):
    """
    Tile unit-interval images into one binary PPM (P6), row-major, `cols` tiles per row.

    Bytes are round(x * 255) clamped to [0, 255]; single-channel images are written as grey.
    Missing tiles in the last row stay black.
    """
    pixels = images.pixels if isinstance(images, ImageBatch) else np.asarray(images)
    if isinstance(images, ImageBatch):
        _expect(images, UNIT, 'write_ppm_grid')
    if pixels.ndim != 4 or pixels.shape[0] < 1:
        raise ContractError("write_ppm_grid needs at least one NHWC image")
    if cols < 1:
        raise ContractError("cols must be >= 1")
    n, h, w, c = pixels.shape
    if c == 1:
        pixels = np.repeat(pixels, 3, axis=3)
    elif c != 3:
        raise ShapeError(f"PPM export needs 1 or 3 channels, got {c}")
    cols = min(cols, n)
    rows = -(-n // cols)
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    values = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    for i in range(n):
        r, q = divmod(i, cols)
        canvas[r * h:(r + 1) * h, q * w:(q + 1) * w] = values[i]
    header = f"P6\n{cols * w} {rows * h}\n255\n".encode('ascii')
    atomic_write_bytes(path, header + canvas.tobytes())
    return path


def read_ppm(path):
    """Minimal P6 reader for the files write_ppm_grid produces (no header comments)."""
    with open(path, 'rb') as f:
        payload = f.read()
    parts = payload.split(b'\n', 3)
    if len(parts) < 4 or parts[0] != b'P6':
        raise FormatError(f"'{path}' is not a P6 file")
    try:
        w, h = (int(v) for v in parts[1].split())
    except ValueError as e:
        raise FormatError(f"'{path}' has a malformed P6 size line: {parts[1]!r}") from e
    if len(parts[3]) != w * h * 3:
        raise FormatError(f"'{path}' holds {len(parts[3])} pixel bytes, a {w}x{h} image needs {w * h * 3}")
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


# ============================================================
# MINIBATCHES
# ============================================================
def step_rng(seed, step):
    """Generator for one training step; batches never depend on how far a prefetcher ran ahead."""
    return np.random.default_rng([int(seed), int(step)])


class BatchSampler:
    """
    Seeded minibatch source for the trainer.

    draw(step) returns (unit-interval ImageBatch, rng) where rng is the step's generator,
    already advanced past the index draw, flips and dequantization noise; the caller keeps
    using it for the reparametrized sample. With prefetch > 0 a single background thread
    prepares upcoming batches and hands them over through a bounded queue.
    """

    def __init__(self, batch, batch_size, seed, hflip=True, prefetch=0):
        if len(batch) == 0:
            raise ContractError("cannot sample from an empty dataset")
        if batch.domain == LOGIT:
            raise DomainError("BatchSampler expects raw data, not logit-space batches")
        self.batch = batch
        self.batch_size = batch_size
        self.seed = seed
        self.hflip = hflip
        self.prefetch = prefetch

    def draw(self, step):
        rng = step_rng(self.seed, step)
        n = len(self.batch)
        idx = rng.choice(n, size=self.batch_size, replace=n < self.batch_size)
        images = self.batch.subset(idx)
        if self.hflip and images.pixels.ndim == 4:
            images = hflip_augment(images, rng)
        if images.domain == DISCRETE:
            images = dequantize(images, rng)
        return images, rng

    def iterate(self, start, stop):
        if self.prefetch <= 0:
            for step in range(start, stop):
                yield (step,) + self.draw(step)
            return
        handoff = queue.Queue(maxsize=self.prefetch)
        stop_flag = threading.Event()

        def producer():
            try:
                for step in range(start, stop):
                    if stop_flag.is_set():
                        return
                    handoff.put((step,) + self.draw(step))
            except BaseException as e:
                # handed to the consumer, which re-raises it on its own thread
                handoff.put(e)
                return
            handoff.put(None)

        worker = threading.Thread(target=producer, daemon=True)
        worker.start()
        try:
            while True:
                item = handoff.get()
                if item is None:
                    return
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop_flag.set()
            while worker.is_alive():
                try:
                    handoff.get_nowait()
                except queue.Empty:
                    worker.join(timeout=0.05)


def two_mode_dataset(n, rng):
    """Mixture of two tilted 2D Gaussians, equal weights; float64 [n, 2]."""
    centers = np.array([[-2.0, -1.0], [2.0, 1.0]])
    chol = np.array([[0.6, 0.0], [0.45, 0.35]])
    which = rng.integers(0, 2, size=n)
    noise = rng.standard_normal((n, 2)) @ chol.T
    return centers[which] + noise


def synthetic_images(n, shape, rng):
    """
    Smooth discrete-u8 test images: a random-phase plane wave per channel plus mild pixel
    noise. Neighbouring pixels are strongly correlated, so a density model can beat the
    uniform 8 bits/dim baseline on them.
    """
    h, w, c = shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing='ij')
    freq = rng.uniform(0.2, 0.9, size=(n, 1, 1, c))
    angle = rng.uniform(0.0, np.pi, size=(n, 1, 1, c))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n, 1, 1, c))
    proj = rows[None, :, :, None] * np.cos(angle) + cols[None, :, :, None] * np.sin(angle)
    wave = 127.5 + 100.0 * np.sin(freq * proj + phase)
    noisy = wave + rng.normal(0.0, 6.0, size=wave.shape)
    return ImageBatch(np.clip(np.rint(noisy), 0, 255).astype(np.uint8), DISCRETE)
