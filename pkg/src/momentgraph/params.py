"""Named parameter collections and the binary checkpoint format.

Checkpoint layout (all integers little-endian u32)::

    b"LGAN" | version | count | count x (name_len, name utf-8, rank, dims..., f64 values)
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict

import numpy as np

from .errors import ContractError, FormatError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LGAN"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered name -> trainable tensor map with a seeded initializer."""

    def __init__(self, rng_seed=0, dtype=np.float64):
        self.entries = OrderedDict()
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(self.rng_seed)

    def add(self, name, values):
        if name in self.entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=self.dtype), requires_grad=True)
        self.entries[name] = t
        return t

    def uniform(self, name, shape, fan_in):
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] from the store's RNG."""
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, self._rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self):
        return list(self.entries)

    def zero_grad(self):
        for t in self.entries.values():
            t.grad = None

    def state(self):
        """Copy of all values keyed by name."""
        return OrderedDict((k, t.values.copy()) for k, t in self.entries.items())

    def load_state(self, arrays, strict=True):
        missing = [k for k in self.entries if k not in arrays]
        extra = [k for k in arrays if k not in self.entries]
        if strict and (missing or extra):
            raise ContractError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, t in self.entries.items():
            if k not in arrays:
                continue
            arr = np.asarray(arrays[k])
            if arr.shape != t.shape:
                raise ContractError(f"{k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.values = arr.astype(self.dtype, copy=True)

    def clone(self):
        other = ParamStore(self.rng_seed, self.dtype)
        for k, t in self.entries.items():
            other.add(k, t.values.copy())
        return other

    def num_values(self):
        return sum(t.size for t in self.entries.values())


def write_arrays(path, arrays):
    """Write a name -> array mapping in checkpoint format."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_arrays(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_arrays(buf)


def parse_arrays(buf):
    pos = 0

    def need(n, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)

    need(12, "header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", offset=0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = 12
    arrays = OrderedDict()
    for _ in range(count):
        need(4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(nlen, "name")
        try:
            name = buf[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", offset=pos) from None
        pos += nlen
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        need(nbytes, f"values of {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims)
        pos += nbytes
        if name in arrays:
            raise FormatError(f"duplicate entry {name!r}", offset=pos)
        arrays[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise FormatError("trailing bytes after last entry", offset=pos)
    return arrays


def save_checkpoint(params, path):
    write_arrays(path, params.state())


def load_checkpoint(path, params=None):
    """Read a checkpoint; fill ``params`` in place when given."""
    arrays = read_arrays(path)
    if params is not None:
        params.load_state(arrays)
    return arrays
