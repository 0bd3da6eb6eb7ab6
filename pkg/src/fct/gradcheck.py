"""Finite-difference suite over every differentiable primitive and the composed layers.

Each case is a function of one or more named inputs. The scalar under test
is <w, op(inputs)> with a fixed random weight w, so every output coordinate
contributes to the check. Inputs are flattened into one vector for probing.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from . import autodiff as ad
from .model import fct_block_forward, forward_classifier, init_params, patch_embed, preset, stage_transition
from .numeric import Rng

PRIMITIVE_TOL = 1e-6
COMPOSED_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class GradResult:
    op: str
    seed: int
    max_rel_err: float
    worst_coord: str
    rel_tol: float
    passed: bool


def _signed_fourier(rng, shape, lo=1.0, hi=3.0):
    """Entries with |x| in [e^lo, e^hi] and random sign, away from |x| = 1."""
    mag = np.exp(rng.uniform(shape, lo, hi))
    return mag * np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)


def check_case(fn, inputs, seed, rel_tol, max_coords=160):
    """Compare tape gradients of <w, fn(**inputs)> with central differences."""
    names = list(inputs)
    shapes = [np.shape(inputs[k]) for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    x0 = np.concatenate([np.ravel(inputs[k]) for k in names]).astype(np.float64)

    def unpack(vec):
        out, at = {}, 0
        for k, s, n in zip(names, shapes, sizes):
            out[k] = vec[at:at + n].reshape(s)
            at += n
        return out

    with np.errstate(all="ignore"):
        probe = fn(**{k: ad.const(v) for k, v in unpack(x0).items()}).value
    w = Rng(seed).child(7).normal(probe.shape)

    def f(vec):
        vals = unpack(vec)
        with np.errstate(all="ignore"):
            return float(np.sum(w * fn(**{k: ad.const(v) for k, v in vals.items()}).value))

    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in unpack(x0).items()}
    out = fn(**leaves)
    grads = tape.backward(out, loss_grad=w)
    analytic = np.concatenate([np.ravel(grads.get(id(leaves[k]), np.zeros(s))) for k, s in zip(names, shapes)])

    coords = None
    if x0.size > max_coords:
        coords = np.sort(Rng(seed).child(8).permutation(x0.size)[:max_coords])
    rep = ad.finite_diff_check(f, x0, analytic, rel_tol=rel_tol, coords=coords)
    at, label = rep.worst_coord, str(rep.worst_coord)
    for k, n in zip(names, sizes):
        if at < n:
            label = f"{k}[{at}]"
            break
        at -= n
    return rep, label


def _cases(seed):
    """(name, fn, inputs, tol) for one seed."""
    rng = Rng(seed).child(1)
    N = rng.normal
    out = []

    def add(name, fn, tol=PRIMITIVE_TOL, **inputs):
        out.append((name, fn, inputs, tol))

    add("add", lambda a, b: ad.add(a, b), a=N((3, 4)), b=N(4))
    add("mul", lambda a, b: ad.mul(a, b), a=N((3, 4)), b=N((3, 4)))
    add("scale", lambda a: ad.scale(a, -1.7), a=N((5,)))
    add("matmul", lambda a, b: ad.matmul(a, b), a=N((2, 3, 4)), b=N((4, 5)))
    add("matmul_batched", lambda a, b: ad.matmul(a, b), a=N((2, 3, 4)), b=N((2, 4, 2)))
    add("affine", lambda x, w, b: ad.affine(x, w, b), x=N((2, 3, 4)), w=N((4, 5)), b=N(5))
    add("blend_pair", lambda alpha, a, b: ad.add(*ad.blend_pair(alpha, a, ad.scale(b, 1.3))),
        alpha=N(4), a=N((2, 3, 4)), b=N((2, 3, 4)))
    add("layernorm", lambda x, g, b: ad.layernorm(x, g, b), x=N((3, 6)), g=N(6), b=N(6))
    add("gelu", lambda x: ad.gelu(x), x=N((4, 5)) * 2)
    add("reshape_transpose", lambda x: ad.transpose(ad.reshape(x, (3, 2, 4)), (2, 0, 1)), x=N((6, 4)))
    add("pad_crop", lambda x: ad.crop(ad.pad(x, 0, 6), 1, 2), x=N((5, 3)))
    add("mean", lambda x: ad.mean(x, 1), x=N((3, 4, 2)))
    add("cross_entropy", lambda x: ad.cross_entropy(x, np.array([0, 2, 1])), x=N((3, 4)))
    add("dft", lambda x: _pair_sum(ad.rfft(x, axis=-2)), x=N((2, 8, 3)))
    add("dft_odd", lambda x: _pair_sum(ad.rfft(x, axis=-1)), x=N((2, 7)))
    add("idft", lambda re, im: ad.irfft(re, im, 8, axis=-1), re=N((3, 5)), im=N((3, 5)))
    add("idft_odd", lambda re, im: ad.irfft(re, im, 7, axis=0), re=N((4, 2)), im=N((4, 2)))
    add("softmax", lambda x: attn.normalize(x, "softmax"), x=N((3, 5)) * 2)
    add("logmax", lambda x: attn.normalize(x, "logmax"), x=_signed_fourier(rng, (3, 5)))
    add("logmax_mixed", lambda x: attn.normalize(x, "logmax"),
        x=_signed_fourier(rng, (4, 6), -4.0, 4.0) * np.exp(np.where(rng.uniform((4, 6)) < 0.5, -2.0, 2.0)))
    add("patch_embed", lambda img, w, b: patch_embed(img, w, b), img=N((1, 8, 8, 3)), w=N((48, 4)), b=N(4))
    add("stage_transition", lambda x, w, b: stage_transition(x, w, b), x=N((1, 3, 3, 2)), w=N((8, 4)), b=N(4))

    for kind, n, c in (("spatial", 8, 4), ("channel", 6, 4)):
        L = attn.alpha_len(kind, n, c)

        def csa_fn(x, q, k, v, o, o_bias, alpha, kind=kind):
            p = dict(q=q, k=k, v=v, o=o, o_bias=o_bias, alpha=alpha)
            return attn.csa_tokens(x, p, kind, "logmax")

        add(f"csa_{kind}", csa_fn, COMPOSED_TOL, x=N((2, n, c)), q=N((c, c)), k=N((c, c)), v=N((c, c)),
            o=N((c, c)), o_bias=N(c), alpha=rng.uniform(L))

    for kind in ("spatial", "channel"):
        def block_fn(x, kind=kind, **p):
            csa = {k[4:]: p.pop(k) for k in list(p) if k.startswith("csa.")}
            p["csa"] = csa
            return fct_block_forward(x, p, kind, "logmax")

        c, L = 4, attn.alpha_len(kind, 16, 4)
        params = {"ln1.g": 1 + 0.1 * N(c), "ln1.b": 0.1 * N(c), "ln2.g": 1 + 0.1 * N(c), "ln2.b": 0.1 * N(c),
                  "mlp.w1": N((c, 8)), "mlp.b1": N(8), "mlp.w2": N((8, c)), "mlp.b2": N(c),
                  "csa.q": N((c, c)), "csa.k": N((c, c)), "csa.v": N((c, c)), "csa.o": N((c, c)),
                  "csa.o_bias": N(c), "csa.alpha": rng.uniform(L)}
        add(f"fct_block_{kind}", block_fn, COMPOSED_TOL, x=N((1, 4, 4, c)), **params)
    return out


def _pair_sum(pair):
    re, im = pair
    return ad.add(re, ad.scale(im, 0.5))


def classifier_case(seed, normalizer="logmax"):
    """End-to-end check of the micro classifier against all of its parameters.

    Weights are drawn at unit scale: at the small training init a 1e-6 step
    in the stem moves near-zero attention logits far outside the linear
    regime of logmax, so the central difference itself is inaccurate.
    """
    cfg = preset("micro", init_std=1.0)
    store = init_params(cfg, seed)
    rng = Rng(seed).child(2)
    for name in store.names():
        if name.endswith(("csa.q", "csa.k")):
            store.value[name][:] = rng.normal(store[name].shape)
    img = _screened_image(cfg, store, rng, normalizer)
    labels = np.array([0, 3])
    names = store.names()

    def fn(**vals):
        st = ad.ParamStore()
        for k in names:
            st.add(k, vals[k.replace(".", "__")].value)
        tape = vals[names[0].replace(".", "__")].tape
        if tape is None:
            return ad.cross_entropy(forward_classifier(img, cfg, st, None, normalizer), labels)
        # rebind tape params to the leaves so gradients land on them
        for k in names:
            tape.params[k] = vals[k.replace(".", "__")]
        return ad.cross_entropy(forward_classifier(img, cfg, st, tape, normalizer), labels)

    inputs = {k.replace(".", "__"): store[k] for k in names}
    return "classifier_micro", fn, inputs, MODEL_TOL


def min_live_logit(cfg, store, img, normalizer="logmax"):
    """Smallest nonzero |attention logit| anywhere in the network."""
    cap = {}
    with np.errstate(all="ignore"):
        forward_classifier(img, cfg, store, None, normalizer, capture=cap, check=False)
    out = np.inf
    for maps in cap.values():
        for key in ("logits_r", "logits_i"):
            a = np.abs(maps[key])
            a = a[a > 0]
            if a.size:
                out = min(out, float(a.min()))
    return out


def _screened_image(cfg, store, rng, normalizer, margin=1e-2, tries=32):
    """Draw inputs until no attention logit sits within ``margin`` of the
    |x| = 0 singularity of logmax, where a 1e-6 central difference is not
    in the linear regime. Structural zeros (exactly 0) are allowed."""
    for _ in range(tries):
        img = rng.normal((2, cfg.input_size, cfg.input_size, 3))
        if min_live_logit(cfg, store, img, normalizer) > margin:
            return img
    raise RuntimeError("no well-conditioned probe point found")


def run_suite(seeds=(0, 1, 2), include_model=True, log=None):
    results = []
    for seed in seeds:
        cases = _cases(seed)
        if include_model:
            cases.append(classifier_case(seed))
        for name, fn, inputs, tol in cases:
            rep, label = check_case(fn, inputs, seed, tol)
            r = GradResult(name, seed, rep.max_rel_err, label, tol, rep.passed)
            results.append(r)
            if log:
                log(r)
    return results


CSV_FIELDS = ["op", "seed", "max_rel_err", "worst_coord", "rel_tol", "status"]


def write_csv(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in results:
            w.writerow([r.op, r.seed, f"{r.max_rel_err:.6e}", r.worst_coord, r.rel_tol,
                        "pass" if r.passed else "fail"])
