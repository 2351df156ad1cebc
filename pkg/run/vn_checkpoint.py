"""
VPNV checkpoint files: model config, named parameter tensors, optimizer moments and RNG state.

Byte layout (little-endian throughout):

    b'VPNV'
    u32 format version
    u32 length, config as canonical JSON (sorted keys, compact separators, UTF-8)
    u32 length, training state as canonical JSON (step, seed, adam_t, rng, ...)
    u32 tensor count
    per tensor: u16 name length, name (UTF-8), u8 dtype (0 = f32, 1 = f64), u8 ndim,
                ndim x u32 dims, u64 payload byte count
    payloads, concatenated in table order

Writing the same checkpoint twice gives identical bytes, so save -> load -> save is a no-op.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from vn_errors import FormatError, IoError, NumericsError
from vn_helpers import atomic_write_bytes, canonical_json


MAGIC = b'VPNV'
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype('<f4'): 0, np.dtype('<f8'): 1}
_CODE_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}


@dataclass(eq=False)
class ModelCheckpoint:
    config: dict
    tensors: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def step(self):
        return int(self.state.get('step', 0))

    @property
    def seed(self):
        return int(self.state.get('seed', 0))

    def parameters(self):
        """Model tensors only (optimizer moments filtered out)."""
        return {k: v for k, v in self.tensors.items() if not k.startswith('adam.')}

    def optimizer_tensors(self):
        return {k: v for k, v in self.tensors.items() if k.startswith('adam.')}

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        if (self.version, canonical_json(self.config), canonical_json(self.state)) != \
                (other.version, canonical_json(other.config), canonical_json(other.state)):
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(self.tensors.values(), other.tensors.values()))


# ============================================================
# ENCODE
# ============================================================
def _as_stored(name, array):
    array = np.asarray(array)
    if array.dtype == np.float32:
        stored = array.astype('<f4', copy=False)
    elif array.dtype == np.float64:
        stored = array.astype('<f8', copy=False)
    else:
        raise FormatError(f"tensor '{name}' has unsupported dtype {array.dtype}")
    if not np.all(np.isfinite(stored)):
        raise NumericsError("refusing to checkpoint non-finite values", term=name)
    return np.ascontiguousarray(stored)


def to_bytes(checkpoint):
    config = canonical_json(checkpoint.config).encode('utf-8')
    state = canonical_json(checkpoint.state).encode('utf-8')
    parts = [MAGIC, struct.pack('<I', checkpoint.version),
             struct.pack('<I', len(config)), config,
             struct.pack('<I', len(state)), state,
             struct.pack('<I', len(checkpoint.tensors))]
    payloads = []
    for name, array in checkpoint.tensors.items():
        stored = _as_stored(name, array)
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
        parts.append(struct.pack('<BB', _DTYPE_CODES[stored.dtype], stored.ndim))
        parts.append(struct.pack(f'<{stored.ndim}I', *stored.shape))
        parts.append(struct.pack('<Q', stored.nbytes))
        payloads.append(stored.tobytes())
    return b''.join(parts + payloads)


def save(checkpoint, path):
    """Atomic write; the previous file at `path` survives any failure. Raises IoError on I/O trouble."""
    atomic_write_bytes(path, to_bytes(checkpoint))
    return path


# ============================================================
# DECODE
# ============================================================
class _Reader:

    def __init__(self, payload, path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, n, what):
        end = self.offset + n
        if end > len(self.payload):
            raise FormatError(f"'{self.path}' is truncated (while reading {what})")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def json_blob(self, what):
        (n,) = self.unpack('<I', f"{what} length")
        raw = self.take(n, what)
        try:
            return json.loads(raw.decode('utf-8'))
        except (UnicodeDecodeError, ValueError) as e:
            raise FormatError(f"'{self.path}': {what} is not valid JSON: {e}") from e


def from_bytes(payload, path='<memory>'):
    r = _Reader(payload, path)
    if r.take(4, 'magic') != MAGIC:
        raise FormatError(f"'{path}' is not a VPNV checkpoint (bad magic)")
    (version,) = r.unpack('<I', 'version')
    if version != FORMAT_VERSION:
        raise FormatError(f"'{path}' has format version {version}, this build reads {FORMAT_VERSION}")
    config = r.json_blob('config')
    state = r.json_blob('state')
    (count,) = r.unpack('<I', 'tensor count')
    table = []
    for _ in range(count):
        (name_len,) = r.unpack('<H', 'tensor name length')
        raw_name = r.take(name_len, 'tensor name')
        try:
            name = raw_name.decode('utf-8', errors='strict')
        except UnicodeDecodeError as e:
            raise FormatError(f"'{path}': tensor name {raw_name!r} is not UTF-8") from e
        code, ndim = r.unpack('<BB', 'tensor dtype')
        if code not in _CODE_DTYPES:
            raise FormatError(f"'{path}': tensor '{name}' has unknown dtype code {code}")
        dims = r.unpack(f'<{ndim}I', 'tensor dims')
        (nbytes,) = r.unpack('<Q', 'tensor byte count')
        dtype = _CODE_DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dtype.itemsize:
            raise FormatError(f"'{path}': tensor '{name}' byte count disagrees with its shape {dims}")
        if any(name == seen for seen, *_ in table):
            raise FormatError(f"'{path}': duplicate tensor name '{name}'")
        table.append((name, dtype, dims, nbytes))
    tensors = {}
    for name, dtype, dims, nbytes in table:
        raw = r.take(nbytes, f"payload of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder('='))
    if r.offset != len(payload):
        raise FormatError(f"'{path}' has {len(payload) - r.offset} trailing bytes")
    return ModelCheckpoint(config=config, tensors=tensors, state=state, version=version)


def load(path, expected_shapes=None):
    """
    Read a checkpoint. `expected_shapes(config) -> {name: shape}` validates the parameter table
    against the stored config; any missing or mis-shaped parameter is a FormatError and nothing
    partial is returned.
    """
    try:
        with open(path, 'rb') as f:
            payload = f.read()
    except OSError as e:
        raise IoError(f"could not read checkpoint '{path}': {e}") from e
    checkpoint = from_bytes(payload, path)
    if expected_shapes is not None:
        expected = expected_shapes(checkpoint.config)
        params = checkpoint.parameters()
        for name, shape in expected.items():
            if name not in params:
                raise FormatError(f"'{path}': parameter '{name}' is missing")
            if tuple(params[name].shape) != tuple(shape):
                raise FormatError(f"'{path}': parameter '{name}' has shape {params[name].shape}, config implies {tuple(shape)}")
        extra = sorted(set(params) - set(expected))
        if extra:
            raise FormatError(f"'{path}': unexpected parameters {extra[:5]}")
    return checkpoint
