import cmath

import numpy as np
import pytest

from fct.numeric import ComplexTensor, Rng
from fct.spectral import (HalfSpectrum, SpectrumError, decompose, dft, dft_adjoint, half_len,
                          idft, next_pow2)

POW2 = [2 ** p for p in range(1, 11)]


def eq2_loop(x):
    """Direct evaluation of the forward sum for k = 0..N//2."""
    n = len(x)
    return np.array([sum(x[t] * cmath.exp(-2j * cmath.pi * k * t / n) for t in range(n))
                     for k in range(n // 2 + 1)])


def _bins(s):
    return s.bins.re + 1j * s.bins.im


def test_constant_signal_is_dc_only():
    s = dft([1, 1, 1, 1])
    assert np.allclose(_bins(s), [4, 0, 0], atol=1e-15)


def test_cosine_and_sine_examples():
    assert np.allclose(_bins(dft([1, 0, -1, 0])), [0, 2, 0], atol=1e-15)
    assert np.allclose(_bins(dft([0, 1, 0, -1])), [0, -2j, 0], atol=1e-15)


def test_half_spectrum_length():
    for n in (2, 3, 4, 5, 8, 9):
        assert dft(np.ones(n)).bins.shape == (half_len(n),) == (n // 2 + 1,)


def test_length_one_rejected():
    with pytest.raises(SpectrumError):
        dft([1.0])


@pytest.mark.parametrize("n", [3, 5, 6, 7, 12])
def test_non_pow2_matches_loop_oracle(n):
    x = Rng(n).normal(n)
    assert np.max(np.abs(_bins(dft(x)) - eq2_loop(x))) < 1e-10 * np.abs(x).sum()


@pytest.mark.parametrize("n", POW2)
def test_fast_path_matches_naive(n):
    x = Rng(n).normal(n)
    fast, slow = _bins(dft(x)), _bins(dft(x, fast=False))
    assert np.max(np.abs(fast - slow)) <= 1e-10 * np.max(np.abs(slow))


@pytest.mark.parametrize("n", [4, 8, 16, 32])
def test_fast_path_matches_loop_oracle(n):
    x = Rng(100 + n).normal(n)
    ref = eq2_loop(x)
    assert np.max(np.abs(_bins(dft(x)) - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_matches_numpy_reference():
    x = Rng(9).normal((3, 256))
    assert np.allclose(_bins(dft(x)), np.fft.rfft(x), rtol=0, atol=1e-11)


def test_inverse_examples():
    def hs(bins):
        b = np.array(bins, dtype=complex)
        return HalfSpectrum(ComplexTensor(b.real, b.imag), 4)

    assert np.allclose(idft(hs([4, 0, 0])), [1, 1, 1, 1], atol=1e-15)
    assert np.allclose(idft(hs([0, 2, 0])), [1, 0, -1, 0], atol=1e-15)
    assert np.array_equal(idft(hs([0, 0, 0])), np.zeros(4))


def test_realness_violation_rejected():
    with pytest.raises(SpectrumError):
        HalfSpectrum(ComplexTensor(np.zeros(3), np.array([1.0, 0, 0])), 4)
    with pytest.raises(SpectrumError):
        HalfSpectrum(ComplexTensor(np.zeros(3), np.array([0, 0, 1.0])), 4)
    # odd N has no Nyquist bin: last bin may be complex
    HalfSpectrum(ComplexTensor(np.zeros(3), np.array([0, 0, 1.0])), 5)


def test_bin_count_mismatch_rejected():
    with pytest.raises(SpectrumError):
        HalfSpectrum(ComplexTensor.zeros((4,)), 4)


@pytest.mark.parametrize("n", [2, 3, 7] + POW2)
def test_round_trip(n):
    x = Rng(n).normal(n)
    y = idft(dft(x))
    assert np.max(np.abs(y - x)) <= 1e-10 * np.max(np.abs(x))


def test_round_trip_along_axis():
    x = Rng(1).normal((4, 16, 3))
    s = dft(x, axis=1)
    assert s.bins.shape == (4, 9, 3)
    assert np.allclose(idft(s), x, atol=1e-13)


@pytest.mark.parametrize("n", [4, 8, 16, 64, 256])
def test_parseval(n):
    x = Rng(n).normal(n)
    full = dft(x).full().to_complex()
    lhs, rhs = np.sum(x * x), np.sum(np.abs(full) ** 2) / n
    assert abs(lhs - rhs) <= 1e-9 * lhs


def test_full_spectrum_conjugate_symmetry():
    n = 16
    full = dft(Rng(2).normal(n)).full().to_complex()
    for k in range(1, n):
        assert full[n - k] == pytest.approx(np.conj(full[k]), abs=1e-12)


def test_linearity():
    rng = Rng(3)
    x, y = rng.normal(64), rng.normal(64)
    a, b = 1.7, -0.3
    lhs = _bins(dft(a * x + b * y))
    rhs = a * _bins(dft(x)) + b * _bins(dft(y))
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_adjoint_dc_gives_ones():
    n = 8
    g = ComplexTensor(np.eye(half_len(n))[0], np.zeros(half_len(n)))
    assert np.allclose(dft_adjoint(g, n), np.ones(n), atol=1e-15)
    assert np.array_equal(dft_adjoint(ComplexTensor.zeros((5,)), n), np.zeros(n))


@pytest.mark.parametrize("n", [5, 8, 64])
def test_adjoint_inner_product(n):
    rng = Rng(n)
    x = rng.normal(n)
    g = ComplexTensor(rng.normal(half_len(n)), rng.normal(half_len(n)))
    s = dft(x)
    lhs = np.sum(s.bins.re * g.re + s.bins.im * g.im)
    rhs = np.dot(x, dft_adjoint(g, n))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_adjoint_matches_finite_difference_jacobian():
    n, h = 8, 1e-6
    rng = Rng(11)
    x = rng.normal(n)
    g = ComplexTensor(rng.normal(5), rng.normal(5))

    def f(v):
        s = dft(v)
        return np.sum(s.bins.re * g.re + s.bins.im * g.im)

    fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(n)])
    assert np.max(np.abs(fd - dft_adjoint(g, n))) < 1e-8


def test_adjoint_shape_mismatch():
    with pytest.raises(SpectrumError):
        dft_adjoint(ComplexTensor.zeros((4,)), 8)


def test_decompose_examples():
    sym, anti = decompose([2.0, 1.0, 0.0, 1.0])
    assert np.max(np.abs(anti)) < 1e-15
    sym, anti = decompose([0.0, 1.0, 0.0, -1.0])
    assert np.max(np.abs(sym)) < 1e-15


def test_decompose_sums_to_input_2d():
    x = Rng(4).normal((4, 8))
    sym, anti = decompose(x)
    assert sym.shape == x.shape
    assert np.max(np.abs(sym + anti - x)) < 1e-10
    # parts are the even and odd halves under index reversal mod N
    flat = x.reshape(-1)
    rev = np.roll(flat[::-1], 1)
    assert np.allclose(sym.reshape(-1), (flat + rev) / 2, atol=1e-12)


def test_next_pow2():
    assert [next_pow2(n) for n in (1, 2, 3, 5, 64, 65)] == [2, 2, 4, 8, 64, 128]
