"""Real-input DFT/IDFT stored as a half spectrum.

Conventions follow the textbook pair: the forward transform is unnormalized,
the inverse carries 1/N. A real signal of length N keeps the N//2 + 1 bins
k = 0..N//2; the rest are conjugate mirrors.

Power-of-two lengths go through an iterative radix-2 Cooley-Tukey FFT; the
real signal is packed into a complex sequence of half length and split
afterwards. Other lengths fall back to the O(N^2) sum.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numeric import ComplexTensor, as_real


class SpectrumError(ValueError):
    pass


# relative tolerance for the DC/Nyquist realness check
REALNESS_TOL = 1e-9


def is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n, minimum=2):
    p = minimum
    while p < n:
        p *= 2
    return p


def half_len(n):
    return n // 2 + 1


@dataclass(frozen=True)
class HalfSpectrum:
    bins: ComplexTensor
    original_len: int
    axis: int = -1

    def __post_init__(self):
        if self.original_len < 1:
            raise SpectrumError("original length must be positive")
        if self.bins.shape[self.axis] != half_len(self.original_len):
            raise SpectrumError(
                f"axis {self.axis} holds {self.bins.shape[self.axis]} bins, "
                f"expected {half_len(self.original_len)} for N={self.original_len}")
        check_realness(self.bins.re, self.bins.im, self.original_len, self.axis)

    def full(self):
        """Expand to all N bins using F(N-k) = conj(F(k))."""
        return ComplexTensor.from_complex(
            _expand_full(self.bins.to_complex(), self.original_len, self.axis))


def check_realness(re, im, n, axis=-1):
    im = np.moveaxis(im, axis, -1)
    scale = max(1.0, float(np.max(np.abs(re), initial=0.0)))
    edge = [0] + ([n // 2] if n % 2 == 0 else [])
    worst = float(np.max(np.abs(im[..., edge]), initial=0.0))
    if worst > REALNESS_TOL * scale:
        raise SpectrumError(
            f"DC/Nyquist bins must be real (max imaginary part {worst:.3g})")


def bin_weights(n):
    """Multiplicity of each stored bin in the full spectrum (1 for DC/Nyquist, else 2)."""
    w = np.full(half_len(n), 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


@lru_cache(maxsize=None)
def _bitrev(m):
    bits = m.bit_length() - 1
    idx = np.arange(m)
    rev = np.zeros(m, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m):
    """Per-stage twiddle rows exp(-2j*pi*j/(2h)) for h = 1, 2, ..., m/2."""
    tables = []
    h = 1
    while h < m:
        t = np.exp(-2j * np.pi * np.arange(h) / (2 * h))
        t.setflags(write=False)
        tables.append(t)
        h *= 2
    return tuple(tables)


@lru_cache(maxsize=None)
def _pack_twiddle(n):
    t = np.exp(-2j * np.pi * np.arange(n // 2 + 1) / n)
    t.setflags(write=False)
    return t


def fft_pow2(z):
    """Unnormalized complex FFT along the last axis; length must be a power of two."""
    m = z.shape[-1]
    if not is_pow2(m):
        raise SpectrumError(f"radix-2 FFT needs a power-of-two length, got {m}")
    lead = z.shape[:-1]
    z = np.asarray(z, dtype=np.complex128)[..., _bitrev(m)]
    h = 1
    for tw in _twiddles(m):
        z = z.reshape(*lead, m // (2 * h), 2, h)
        even = z[..., 0, :]
        odd = z[..., 1, :] * tw
        z = np.stack((even + odd, even - odd), axis=-2)
        h *= 2
    return z.reshape(*lead, m)


def ifft_pow2(z):
    m = z.shape[-1]
    return np.conj(fft_pow2(np.conj(z))) / m


def _naive_matrix(n):
    k = np.arange(half_len(n))[:, None]
    t = np.arange(n)[None, :]
    return np.exp(-2j * np.pi * ((k * t) % n) / n)


def rfft_naive(x):
    """Direct O(N^2) evaluation of the forward sum along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    return x @ _naive_matrix(n).T


def irfft_naive(bins, n):
    bins = np.asarray(bins, dtype=np.complex128)
    h = bins * bin_weights(n)
    h = h.copy()
    h[..., 0] = h[..., 0].real
    if n % 2 == 0:
        h[..., -1] = h[..., -1].real
    e = np.conj(_naive_matrix(n))  # exp(+j 2 pi k t / N), shape (bins, N)
    return (h @ e).real / n


def rfft(x):
    """Half spectrum of real ``x`` along the last axis, as a complex array."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise SpectrumError(f"transform length must be at least 2, got {n}")
    if not is_pow2(n):
        out = rfft_naive(x)
    else:
        m = n // 2
        z = fft_pow2(x[..., 0::2] + 1j * x[..., 1::2])
        zc = np.conj(z[..., (-np.arange(m + 1)) % m])
        zf = z[..., np.arange(m + 1) % m]
        even = 0.5 * (zf + zc)
        odd = -0.5j * (zf - zc)
        out = even + _pack_twiddle(n) * odd
    out[..., 0] = out[..., 0].real
    if n % 2 == 0:
        out[..., -1] = out[..., -1].real
    return out


def irfft(bins, n):
    """Inverse of ``rfft``. Imaginary parts of DC/Nyquist bins are ignored."""
    bins = np.asarray(bins, dtype=np.complex128)
    if bins.shape[-1] != half_len(n):
        raise SpectrumError(f"{bins.shape[-1]} bins do not match N={n}")
    if n < 2:
        raise SpectrumError(f"transform length must be at least 2, got {n}")
    if not is_pow2(n):
        return irfft_naive(bins, n)
    m = n // 2
    b = bins.copy()
    b[..., 0] = b[..., 0].real
    b[..., -1] = b[..., -1].real
    k = np.arange(m)
    xk = b[..., :m]
    xmk = np.conj(b[..., m - k])
    even = 0.5 * (xk + xmk)
    odd = 0.5 * (xk - xmk) * np.conj(_pack_twiddle(n)[:m])
    z = ifft_pow2(even + 1j * odd)
    out = np.empty(bins.shape[:-1] + (n,))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def rfft_axis(x, axis=-1):
    return np.moveaxis(rfft(np.moveaxis(x, axis, -1)), -1, axis)


def irfft_axis(bins, n, axis=-1):
    return np.moveaxis(irfft(np.moveaxis(bins, axis, -1), n), -1, axis)


def rfft_adjoint(grad_bins, n):
    """Adjoint of ``rfft`` w.r.t. the real inner product Re<X, G>.

    Interior bins appear twice in the full spectrum the inverse expands, so
    they are halved before going through it.
    """
    g = np.asarray(grad_bins, dtype=np.complex128)
    w = 1.0 / bin_weights(n)
    return n * irfft(g * w, n)


def irfft_adjoint(grad_x, n):
    """Adjoint of ``irfft``: interior bins carry twice the weight of DC/Nyquist."""
    return rfft(grad_x) * (bin_weights(n) / n)


def _expand_full(bins, n, axis=-1):
    b = np.moveaxis(bins, axis, -1)
    k = np.arange(n)
    mirror = np.where(k <= n // 2, k, n - k)
    full = b[..., mirror]
    full = np.where(k <= n // 2, full, np.conj(full))
    return np.moveaxis(full, -1, axis)


def full_dft(x, axis=-1):
    """Full-length spectrum of a real array (length-1 axes are returned as is)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if n == 1:
        return x.astype(np.complex128)
    return _expand_full(rfft_axis(x, axis), n, axis)


def dft(x, axis=-1, fast=True):
    x = as_real(x)
    n = x.shape[axis]
    if n < 2:
        raise SpectrumError(f"transform length must be at least 2, got {n}")
    xm = np.moveaxis(x, axis, -1)
    z = rfft(xm) if fast else rfft_naive(xm)
    if not fast:
        z[..., 0] = z[..., 0].real
        if n % 2 == 0:
            z[..., -1] = z[..., -1].real
    z = np.moveaxis(z, -1, axis)
    return HalfSpectrum(ComplexTensor.from_complex(z), n, axis)


def idft(s: HalfSpectrum):
    return as_real(irfft_axis(s.bins.to_complex(), s.original_len, s.axis))


def dft_adjoint(grad_bins: ComplexTensor, n, axis=-1):
    if grad_bins.shape[axis] != half_len(n):
        raise SpectrumError(
            f"gradient has {grad_bins.shape[axis]} bins along axis {axis}, N={n} needs {half_len(n)}")
    g = np.moveaxis(grad_bins.to_complex(), axis, -1)
    return as_real(np.moveaxis(rfft_adjoint(g, n), -1, axis))


def decompose(x):
    """Split ``x`` into the parts carried by the real and imaginary spectrum.

    2-D input is flattened row-major first. Returns (symmetric, antisymmetric)
    with symmetric + antisymmetric == x.
    """
    x = as_real(x)
    if x.ndim not in (1, 2):
        raise SpectrumError(f"decompose takes 1-D or 2-D input, got {x.ndim}-D")
    flat = x.reshape(-1)
    n = flat.size
    s = dft(flat)
    sym = idft(HalfSpectrum(ComplexTensor(s.bins.re, np.zeros_like(s.bins.im)), n))
    anti = idft(HalfSpectrum(ComplexTensor(np.zeros_like(s.bins.re), s.bins.im), n))
    return sym.reshape(x.shape), anti.reshape(x.shape)
