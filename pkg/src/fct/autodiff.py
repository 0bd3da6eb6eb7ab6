"""Reverse-mode differentiation on a linear tape, plus a finite-difference oracle.

Each primitive computes its forward value with numpy and, when any input
needs a gradient, appends a vector-Jacobian closure to the tape. ``backward``
replays the closures in reverse. Only first-order gradients are supported.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import spectral


class BackwardError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "tape", "requires_grad", "name")

    def __init__(self, value, tape=None, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, grad={self.requires_grad})"


def const(value):
    return Var(np.asarray(value, dtype=np.float64))


class Tape:
    """Ordered record of primitive applications.

    A tape can be replayed once. ``replayable=True`` lifts that limit for
    tests that check replay idempotence.
    """

    def __init__(self, replayable=False):
        self.nodes = []
        self.params = {}
        self.replayable = replayable
        self._consumed = False

    def leaf(self, value, requires_grad=True, name=None):
        return Var(np.asarray(value, dtype=np.float64), self, requires_grad, name)

    def param(self, store, name):
        if name in self.params:
            return self.params[name]
        v = Var(store[name], self, True, name)
        self.params[name] = v
        return v

    def record(self, inputs, outputs, vjp):
        self.nodes.append((inputs, outputs, vjp))

    def backward(self, loss, loss_grad=None, store=None):
        """Propagate from ``loss``; returns {id(var): grad} and fills ``store`` grads."""
        if self._consumed and not self.replayable:
            raise BackwardError("tape already replayed; double backward is not supported")
        self._consumed = True
        seed = np.ones_like(loss.value) if loss_grad is None else np.asarray(loss_grad, dtype=np.float64)
        grads = {id(loss): seed}
        for inputs, outputs, vjp in reversed(self.nodes):
            gouts = [grads.get(id(o)) for o in outputs]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros_like(o.value) if g is None else g for o, g in zip(outputs, gouts)]
            gins = vjp(*gouts)
            for inp, g in zip(inputs, gins):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        if store is not None:
            for name, v in self.params.items():
                g = grads.get(id(v))
                store.grad[name] = np.zeros_like(v.value) if g is None else np.array(g, dtype=np.float64)
        return grads


def _tape(*vs):
    for v in vs:
        if isinstance(v, Var) and v.requires_grad and v.tape is not None:
            return v.tape
    return None


def _out(value, tape, inputs, vjp):
    if tape is None:
        return Var(value)
    out = Var(value, tape, True)
    tape.record(inputs, [out], vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.reshape((-1,) + g.shape[lead:]).sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class ParamStore:
    """Named parameters with gradients and optimizer state; iteration is sorted by name."""

    def __init__(self):
        self.value = {}
        self.grad = {}
        self.state = {}

    def add(self, name, value):
        if name in self.value:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self.value[name] = value
        self.grad[name] = np.zeros_like(value)
        self.state[name] = {}
        return value

    def __getitem__(self, name):
        return self.value[name]

    def __contains__(self, name):
        return name in self.value

    def __len__(self):
        return len(self.value)

    def names(self):
        return sorted(self.value)

    def items(self):
        return [(n, self.value[n]) for n in self.names()]

    def num_scalars(self):
        return int(sum(v.size for v in self.value.values()))

    def zero_grad(self):
        for n in self.grad:
            self.grad[n] = np.zeros_like(self.value[n])

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grad.values())))


# -- primitives -------------------------------------------------------------

def add(a, b):
    tape = _tape(a, b)
    out = a.value + b.value
    sa, sb = a.value.shape, b.value.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _out(out, tape, [a, b], vjp)


def mul(a, b):
    tape = _tape(a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _out(av * bv, tape, [a, b], vjp)


def scale(a, c):
    return _out(a.value * c, _tape(a), [a], lambda g: (g * c,))


def matmul(a, b):
    """Batched matrix product; a 2-D right operand is shared across the batch."""
    tape = _tape(a, b)
    av, bv = a.value, b.value
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return _unbroadcast(ga, av.shape), gb

    return _out(out, tape, [a, b], vjp)


def affine(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def blend_pair(alpha, a, b):
    """(alpha*a + (1-alpha)*b, alpha*b + (1-alpha)*a), sharing alpha*(a-b)."""
    tape = _tape(alpha, a, b)
    al = alpha.value
    diff = a.value - b.value
    e = diff * al
    first = Var(b.value + e)
    second = Var(a.value - e)
    if tape is not None:
        first.tape = second.tape = tape
        first.requires_grad = second.requires_grad = True

        def vjp(g1, g2):
            gd = g1 - g2
            ga = g2 + gd * al
            gb = g1 - gd * al
            return _unbroadcast(gd * diff, al.shape), ga, gb

        tape.record([alpha, a, b], [first, second], vjp)
    return first, second


LN_EPS = 1e-5


def layernorm(x, gain, bias, eps=LN_EPS):
    tape = _tape(x, gain, bias)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def vjp(g):
        gg = _unbroadcast(g * xhat, gain.value.shape)
        gb = _unbroadcast(g, bias.value.shape)
        gx_hat = g * gain.value
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _out(out, tape, [x, gain, bias], vjp)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))

    def vjp(g):
        return (g * (cdf + xv * _INV_SQRT2PI * np.exp(-0.5 * xv * xv)),)

    return _out(xv * cdf, _tape(x), [x], vjp)


def reshape(x, shape):
    src = x.value.shape
    return _out(x.value.reshape(shape), _tape(x), [x], lambda g: (g.reshape(src),))


def transpose(x, axes):
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(x.value, axes))
    return _out(out, _tape(x), [x], lambda g: (np.transpose(g, inv),))


def pad(x, axis, size):
    """Zero-pad ``axis`` up to ``size`` entries."""
    n = x.value.shape[axis]
    if size == n:
        return x
    widths = [(0, 0)] * x.value.ndim
    widths[axis] = (0, size - n)
    out = np.pad(x.value, widths)

    def vjp(g):
        return (np.take(g, np.arange(n), axis=axis),)

    return _out(out, _tape(x), [x], vjp)


def crop(x, axis, size):
    n = x.value.shape[axis]
    if size == n:
        return x
    out = np.take(x.value, np.arange(size), axis=axis)
    widths = [(0, 0)] * x.value.ndim
    widths[axis % x.value.ndim] = (0, n - size)
    return _out(out, _tape(x), [x], lambda g: (np.pad(g, widths),))


def mean(x, axis):
    n = x.value.shape[axis]
    shape = x.value.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _out(x.value.mean(axis=axis), _tape(x), [x], vjp)


def total(x):
    shape = x.value.shape
    return _out(np.asarray(x.value.sum()), _tape(x), [x], lambda g: (np.full(shape, float(g)),))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch; ``labels`` are integer class ids."""
    z = logits.value
    labels = np.asarray(labels)
    zs = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    logp = zs - lse
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _out(np.asarray(loss), _tape(logits), [logits], vjp)


def rfft(x, axis=-1):
    """Half spectrum along ``axis`` as a (real, imaginary) pair of Vars."""
    n = x.value.shape[axis]
    z = spectral.rfft_axis(x.value, axis)
    tape = _tape(x)
    re, im = Var(np.ascontiguousarray(z.real)), Var(np.ascontiguousarray(z.imag))
    if tape is not None:
        re.tape = im.tape = tape
        re.requires_grad = im.requires_grad = True

        def vjp(gre, gim):
            g = np.moveaxis(gre + 1j * gim, axis, -1)
            return (np.moveaxis(spectral.rfft_adjoint(g, n), -1, axis),)

        tape.record([x], [re, im], vjp)
    return re, im


def irfft(re, im, n, axis=-1):
    tape = _tape(re, im)
    out = spectral.irfft_axis(re.value + 1j * im.value, n, axis)

    def vjp(g):
        gb = np.moveaxis(spectral.irfft_adjoint(np.moveaxis(g, axis, -1), n), -1, axis)
        return np.ascontiguousarray(gb.real), np.ascontiguousarray(gb.imag)

    return _out(out, tape, [re, im], vjp)


# -- finite differences -----------------------------------------------------

@dataclass
class FDReport:
    max_rel_err: float
    worst_coord: int
    numeric: np.ndarray
    analytic: np.ndarray = None
    nonfinite: list = field(default_factory=list)
    rel_tol: float = 1e-5

    @property
    def passed(self):
        return not self.nonfinite and self.max_rel_err <= self.rel_tol


def rel_errors(analytic, numeric, floor=1e-3):
    """Per-coordinate relative error.

    The denominator is max(|a|, |n|) but never below ``floor`` times the
    largest numeric magnitude, so coordinates that are tiny compared to the
    gradient as a whole are judged on absolute error at that scale.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.max(np.abs(numeric), initial=0.0)),
                float(np.max(np.abs(analytic), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor * scale, 1e-300))
    err = np.abs(analytic - numeric) / denom
    err[(analytic == 0) & (numeric == 0)] = 0.0
    return err


def finite_diff_check(f, x, grad=None, rel_tol=1e-5, coords=None, step=1e-6):
    """Central-difference gradient of scalar ``f`` at ``x``.

    Step per coordinate is ``step * max(1, |x_i|)``. ``grad`` may be an array
    or a callable returning one; when given, the report carries the largest
    relative error and where it occurs. ``coords`` restricts probing to a
    subset of flat indices. Non-finite probes are listed, not raised.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    numeric = np.zeros(len(idx))
    bad = []
    for j, i in enumerate(idx):
        h = step * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        hp = flat[i] - orig
        fp = float(f(x))
        flat[i] = orig - h
        hm = orig - flat[i]
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(int(i))
            numeric[j] = np.nan
            continue
        numeric[j] = (fp - fm) / (hp + hm)
    if grad is None:
        return FDReport(float("nan"), -1, numeric, None, bad, rel_tol)
    a = grad(x) if callable(grad) else grad
    a = np.asarray(a, dtype=np.float64).reshape(-1)[idx]
    ok = np.isfinite(numeric)
    err = np.zeros(len(idx))
    err[ok] = rel_errors(a[ok], numeric[ok])
    worst = int(np.argmax(err)) if len(err) else 0
    return FDReport(float(err[worst]) if len(err) else 0.0, int(idx[worst]) if len(idx) else -1,
                    numeric, a, bad, rel_tol)
