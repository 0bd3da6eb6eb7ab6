"""Dense real/complex arithmetic, the seeded generator and the FCTT tensor format.

Real tensors are plain C-contiguous numpy arrays. Complex tensors keep their
real and imaginary planes as two separate real arrays.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64

MAGIC = b"FCTT"
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_real(x, dtype=None):
    return np.ascontiguousarray(x, dtype=dtype or DTYPE)


@dataclass(frozen=True)
class ComplexTensor:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise DimensionError(
                f"real plane {self.re.shape} and imaginary plane {self.im.shape} differ")

    @property
    def shape(self):
        return self.re.shape

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z)
        return cls(as_real(z.real), as_real(z.imag))

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    def to_complex(self):
        return self.re + 1j * self.im

    def conj(self):
        return ComplexTensor(self.re, -self.im)


def _check_inner(a_shape, b_shape):
    if len(a_shape) != 2 or len(b_shape) != 2 or a_shape[1] != b_shape[0]:
        raise DimensionError(f"cannot multiply {a_shape} by {b_shape}")


def matmul(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _check_inner(a.shape, b.shape)
    return a @ b


def complex_matmul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    _check_inner(a.shape, b.shape)
    re = a.re @ b.re - a.im @ b.im
    im = a.re @ b.im + a.im @ b.re
    return ComplexTensor(re, im)


def transpose(x):
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


def _binary_shapes(a, b):
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    if a.ndim and b.ndim and a.shape != b.shape:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")
    return a, b


def elementwise(op, a, b=None):
    """Apply ``op`` in {add, sub, mul, scale, abs, log, exp} per element.

    Binary operands must share a shape or one of them must be a scalar.
    ``log`` rejects nonpositive entries; callers that need a clamp handle it
    themselves.
    """
    if op in ("add", "sub", "mul", "scale"):
        if b is None:
            raise TypeError(f"{op} needs two operands")
        if op == "scale" and np.ndim(b) != 0:
            raise DimensionError("scale takes a scalar factor")
        a, b = _binary_shapes(a, b)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    a = np.asarray(a, dtype=DTYPE)
    if op == "abs":
        return np.abs(a)
    if op == "exp":
        return np.exp(a)
    if op == "log":
        if np.any(~(a > 0)):
            raise DomainError("log of a nonpositive entry")
        return np.log(a)
    raise ValueError(f"unknown elementwise op {op!r}")


class Rng:
    """Seeded counter-based generator (Philox-4x64).

    ``child(*keys)`` derives an independent stream from the root seed, which
    is how per-step data batches stay reproducible after a checkpoint reload.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def child(self, *keys):
        rng = Rng.__new__(Rng)
        rng.seed = self.seed
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        rng._gen = np.random.Generator(np.random.Philox(ss))
        return rng

    def normal(self, shape=None, std=1.0, mean=0.0):
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)


def save_tensor(path, x, dtype=None):
    x = np.asarray(x)
    dtype = np.dtype(dtype or x.dtype)
    if dtype == np.float64:
        tag = 0
    elif dtype == np.float32:
        tag = 1
    else:
        raise TypeError(f"FCTT stores f64 or f32, got {dtype}")
    header = MAGIC + struct.pack("<BB", tag, x.ndim)
    header += struct.pack(f"<{x.ndim}Q", *x.shape)
    payload = np.ascontiguousarray(x, dtype=_DTYPE_TAGS[tag]).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def load_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not an FCTT file")
    tag, rank = struct.unpack_from("<BB", blob, 4)
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}Q", blob, 6)
    offset = 6 + 8 * rank
    dt = _DTYPE_TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - offset != count * dt.itemsize:
        raise ValueError(f"{path}: payload size does not match header {dims}")
    data = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
    return data.reshape(dims).astype(dt.newbyteorder("="))
