"""Attention normalizers, naive self-attention and complex self-attention (CSA).

CSA runs attention separately on the real and imaginary planes of a half
spectrum and blends the two maps with a learnable per-position weight
``alpha`` before projecting back to the spatial field.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import spectral
from .numeric import ComplexTensor, DimensionError, complex_matmul

EPS_ABS = 1e-12
EPS_DEN = 1e-9

NORMALIZERS = ("logmax", "softmax", "identity")


class AttentionError(FloatingPointError):
    def __init__(self, stage, detail=""):
        self.stage = stage
        super().__init__(f"non-finite values at CSA stage {stage!r}{detail}")


# -- normalizers ------------------------------------------------------------

def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_grad(x, upstream, stable=False):
    """VJP of softmax over the last axis.

    The default evaluates the unshifted quotient form
    (e^xi * C1 * delta_ij - e^xi e^xj) / C1^2 with C1 = sum e^xj, so large
    logits overflow and surface as inf/NaN. ``stable=True`` uses the
    shift-invariant y * (g - <y, g>) instead.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if stable:
        y = softmax(x)
        return y * (g - (g * y).sum(axis=-1, keepdims=True))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        e = np.exp(x)
        c1 = e.sum(axis=-1, keepdims=True)
        return e * (g * c1 - (g * e).sum(axis=-1, keepdims=True)) / (c1 * c1)


def _floor_den(d):
    floored = np.abs(d) < EPS_DEN
    if floored.any():
        d = np.where(floored, np.where(d < 0, -EPS_DEN, EPS_DEN), d)
    return d, floored


def _log_abs(x):
    t = np.abs(x)
    np.maximum(t, EPS_ABS, out=t)
    return np.log(t, out=t)


def logmax(x, axis=-1):
    """log|x_i| / sum_j log|x_j| along ``axis``.

    |x| is clamped at EPS_ABS inside the log and a denominator smaller than
    EPS_DEN in magnitude is replaced by +-EPS_DEN (sign of zero taken as +).
    """
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    t = _log_abs(x)
    d, _ = _floor_den(t.sum(axis=-1, keepdims=True))
    t /= d
    return np.moveaxis(t, -1, axis)


def logmax_grad(x, upstream):
    """VJP of ``logmax`` over the last axis, epsilon policy included."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    t = _log_abs(x)
    d, floored = _floor_den(t.sum(axis=-1, keepdims=True))
    # with a floored denominator the sum is held constant
    inner = np.where(floored, 0.0, (g * t).sum(axis=-1, keepdims=True) / d)
    gt = (g - inner) / d
    a = np.abs(x)
    live = a > EPS_ABS
    return np.where(live, gt * np.sign(x) / np.where(live, a, 1.0), 0.0)


def logmax_jacobian(x):
    """Full Jacobian dy_i/dx_j of logmax for a 1-D input."""
    x = np.asarray(x, dtype=np.float64)
    return np.stack([logmax_grad(x, e) for e in np.eye(x.size)])


def softmax_jacobian(x, stable=False):
    x = np.asarray(x, dtype=np.float64)
    return np.stack([softmax_grad(x, e, stable=stable) for e in np.eye(x.size)])


def identity_norm(x, axis=-1):
    return np.asarray(x, dtype=np.float64)


def normalize(x, kind):
    """Tape op applying one of NORMALIZERS along the last axis."""
    xv = x.value
    if kind == "logmax":
        return ad._out(logmax(xv), ad._tape(x), [x], lambda g: (logmax_grad(xv, g),))
    if kind == "softmax":
        return ad._out(softmax(xv), ad._tape(x), [x], lambda g: (softmax_grad(xv, g),))
    if kind == "identity":
        return x
    raise ValueError(f"unknown normalizer {kind!r}; expected one of {NORMALIZERS}")


# -- naive self-attention ---------------------------------------------------

def naive_sa(x, wq, wk, wv, normalizer="softmax"):
    """Spatial-field attention norm(Q K^T) V on x of shape [..., L, C]."""
    x = np.asarray(x, dtype=np.float64)
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv)):
        if np.ndim(w) != 2 or np.shape(w)[0] != x.shape[-1]:
            raise DimensionError(f"{name} of shape {np.shape(w)} does not accept {x.shape[-1]} channels")
    if np.shape(wq)[1] != np.shape(wk)[1]:
        raise DimensionError(f"query width {np.shape(wq)[1]} != key width {np.shape(wk)[1]}")
    q, k, v = x @ wq, x @ wk, x @ wv
    logits = q @ np.swapaxes(k, -1, -2)
    norm = {"softmax": softmax, "logmax": logmax, "identity": identity_norm}[normalizer]
    return norm(logits) @ v


# -- complex self-attention -------------------------------------------------

def _finite(v, stage):
    if not np.all(np.isfinite(v.value)):
        raise AttentionError(stage)


def spectral_attention(qr, qi, kr, ki, vr, vi, alpha, normalizer="logmax",
                       capture=None, check=True):
    """Core of CSA on sequence-major planes of shape [..., L, D].

    attn_r = norm(Qr Kr^T), attn_i = norm(Qi Ki^T); the real output uses
    alpha*attn_r + (1-alpha)*attn_i against Vr, the imaginary output the
    mirrored blend against Vi. ``alpha`` (length L) scales key positions.
    """
    lr = ad.matmul(qr, ad.transpose(kr, _swap_last(kr)))
    li = ad.matmul(qi, ad.transpose(ki, _swap_last(ki)))
    attn_r = normalize(lr, normalizer)
    attn_i = normalize(li, normalizer)
    if check:
        _finite(attn_r, "attn_r")
        _finite(attn_i, "attn_i")
    if capture is not None:
        capture["logits_r"] = lr.value
        capture["logits_i"] = li.value
        capture["attn_r"] = attn_r.value
        capture["attn_i"] = attn_i.value
        capture["alpha"] = alpha.value
    mr, mi = ad.blend_pair(alpha, attn_r, attn_i)
    out_r = ad.matmul(mr, vr)
    out_i = ad.matmul(mi, vi)
    if check:
        _finite(out_r, "csa_r")
        _finite(out_i, "csa_i")
    return out_r, out_i


def _swap_last(v):
    axes = list(range(v.value.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


CSA_PARAMS = ("q", "k", "v", "o", "o_bias", "alpha")


def csa_tokens(x, p, kind="spatial", normalizer="logmax", capture=None, check=True):
    """CSA on token-major input x: Var[..., N, C] -> Var[..., N, C].

    ``p`` maps q, k, v, o ([C, C]), o_bias ([C]) and alpha to Vars.

    spatial: N must be a power of two. The half spectrum is taken along the
    token axis and q/k/v mix channels per bin, identically on both planes.
    channel: q/k/v mix channels in the spatial field, then the channel axis
    (zero-padded to a power of two) is transformed and attended over.
    """
    n, c = x.value.shape[-2], x.value.shape[-1]
    if kind == "spatial":
        if not spectral.is_pow2(n) or n < 2:
            raise spectral.SpectrumError(
                f"spatial CSA needs a power-of-two token count >= 2 (got {n}); pad before calling")
        xr, xi = ad.rfft(x, axis=-2)
        qr, qi = ad.matmul(xr, p["q"]), ad.matmul(xi, p["q"])
        kr, ki = ad.matmul(xr, p["k"]), ad.matmul(xi, p["k"])
        vr, vi = ad.matmul(xr, p["v"]), ad.matmul(xi, p["v"])
        orr, oi = spectral_attention(qr, qi, kr, ki, vr, vi, p["alpha"], normalizer, capture, check)
        y = ad.irfft(orr, oi, n, axis=-2)
    elif kind == "channel":
        size = spectral.next_pow2(c)
        perm = list(range(x.value.ndim))
        perm[-1], perm[-2] = perm[-2], perm[-1]

        def seq_major(w):
            return ad.pad(ad.transpose(ad.matmul(x, w), perm), -2, size)

        qr, qi = ad.rfft(seq_major(p["q"]), axis=-2)
        kr, ki = ad.rfft(seq_major(p["k"]), axis=-2)
        vr, vi = ad.rfft(seq_major(p["v"]), axis=-2)
        orr, oi = spectral_attention(qr, qi, kr, ki, vr, vi, p["alpha"], normalizer, capture, check)
        y = ad.transpose(ad.crop(ad.irfft(orr, oi, size, axis=-2), -2, c), perm)
    else:
        raise ValueError(f"unknown CSA kind {kind!r}")
    out = ad.affine(y, p["o"], p["o_bias"])
    if check:
        _finite(out, "output")
    return out


def alpha_len(kind, n, c):
    """Length of alpha for a CSA over n tokens of c channels."""
    if kind == "spatial":
        return spectral.half_len(n)
    return spectral.half_len(spectral.next_pow2(c))


def init_csa(rng, c, length, std=0.02):
    return {
        "q": rng.normal((c, c), std),
        "k": rng.normal((c, c), std),
        "v": rng.normal((c, c), std),
        "o": rng.normal((c, c), std),
        "o_bias": np.zeros(c),
        "alpha": np.full(length, 0.5),
    }


def csa(x, params, normalizer="logmax", kind="spatial", capture=None):
    """CSA on a [C, HW] (or [B, C, HW]) array; returns the same shape.

    ``params`` holds plain arrays (see ``init_csa``).
    """
    x = np.asarray(x, dtype=np.float64)
    tokens = ad.const(np.swapaxes(x, -1, -2))
    p = {k: ad.const(v) for k, v in params.items()}
    return np.swapaxes(csa_tokens(tokens, p, kind, normalizer, capture).value, -1, -2)


# -- associativity probe ----------------------------------------------------

@dataclass
class ProbeReport:
    n: int
    lhs_norm: float
    rhs_norm: float
    abs_discrepancy: float
    rel_discrepancy: float


def associativity_probe(x):
    """Compare DFT(X X^T X) with DFT(X) DFT(X^T) DFT(X).

    DFT of a matrix means the full-length transform of each row. Only the
    discrepancy is reported; the identity is not expected to hold.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"probe needs a square matrix, got {x.shape}")
    if x.shape[0] > 16:
        raise DimensionError("probe is limited to 16x16 inputs")

    def row_dft(m):
        return ComplexTensor.from_complex(spectral.full_dft(m, axis=-1))

    lhs = row_dft(x @ x.T @ x).to_complex()
    fx = row_dft(x)
    rhs = complex_matmul(complex_matmul(fx, row_dft(x.T)), fx).to_complex()
    ln, rn = float(np.linalg.norm(lhs)), float(np.linalg.norm(rhs))
    diff = float(np.linalg.norm(lhs - rhs))
    rel = 0.0 if diff == 0.0 else diff / max(ln, rn)
    return ProbeReport(x.shape[0], ln, rn, diff, rel)
