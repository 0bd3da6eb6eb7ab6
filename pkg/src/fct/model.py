"""Hierarchical FCT classifier built from CSA blocks.

Layout: 4x4 patch stem -> four stages of FCT blocks with 2x2 patch merging
between stages (channels double) -> global average pool -> linear head.
Each block is LN -> CSA -> residual, then LN -> MLP(GELU) -> residual.
"""

import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import spectral
from .attention import alpha_len, csa_tokens
from .numeric import Rng, load_tensor, save_tensor

KINDS = ("spatial", "channel")
_SHORT = {"s": "spatial", "c": "channel"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FctConfig:
    c1: int = 96
    depths: tuple = (3, 3, 6, 3)
    block_kinds: tuple = ("spatial", "spatial", "channel", "channel")
    mlp_ratio: int = 4
    num_classes: int = 1000
    input_size: int = 224
    ape: bool = False
    spe: bool = True
    init_std: float = 0.02
    qk_std: float = None  # query/key projection init; None means init_std

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "block_kinds", tuple(_SHORT.get(k, k) for k in self.block_kinds))
        if len(self.depths) != 4 or len(self.block_kinds) != 4:
            raise ConfigError("an FCT has exactly 4 stages")
        if any(d < 0 for d in self.depths):
            raise ConfigError(f"negative stage depth in {self.depths}")
        if any(k not in KINDS for k in self.block_kinds):
            raise ConfigError(f"block kinds must be in {KINDS}, got {self.block_kinds}")
        if self.c1 < 1 or self.mlp_ratio < 1 or self.num_classes < 1:
            raise ConfigError("c1, mlp_ratio and num_classes must be positive")
        if self.input_size < 4 or self.input_size % 4:
            raise ConfigError(f"input size {self.input_size} must be a positive multiple of 4")

    @property
    def widths(self):
        return tuple(self.c1 * 2 ** i for i in range(4))

    def resolutions(self):
        """Feature-map side length per stage; odd sides are padded before merging."""
        h = self.input_size // 4
        out = [h]
        for _ in range(3):
            h = (h + 1) // 2
            out.append(h)
        return tuple(out)

    def to_json(self):
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["block_kinds"] = list(self.block_kinds)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


PRESETS = {
    "tiny": FctConfig(96, (3, 3, 6, 3)),
    "small": FctConfig(96, (3, 6, 12, 3)),
    "base": FctConfig(128, (3, 6, 12, 3)),
    "large": FctConfig(192, (3, 6, 12, 3)),
    # desk-scale variants used by the experiments
    "micro": FctConfig(8, (1, 1, 1, 1), num_classes=4, input_size=16),
    "toy": FctConfig(32, (1, 1, 2, 1), num_classes=4, input_size=32),
}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def load_config(spec):
    """Preset name or path to a JSON config file."""
    if spec in PRESETS:
        return PRESETS[spec]
    if not os.path.isfile(spec):
        raise ConfigError(f"{spec!r} is neither a preset {sorted(PRESETS)} nor a config file")
    with open(spec) as fh:
        return FctConfig.from_json(json.load(fh))


# -- parameters -------------------------------------------------------------

def block_tokens(kind, h, w):
    """Padded token count a spatial block attends over (unused for channel kind)."""
    return spectral.next_pow2(h * w) if kind == "spatial" else h * w


def param_shapes(config):
    """Ordered {name: shape} of every learnable tensor."""
    shapes = {}
    c1 = config.c1
    res = config.resolutions()
    shapes["stem.w"] = (48, c1)
    shapes["stem.b"] = (c1,)
    if config.ape:
        shapes["ape"] = (res[0], res[0], c1)
    for i, (depth, kind, c) in enumerate(zip(config.depths, config.block_kinds, config.widths)):
        if i > 0:
            shapes[f"s{i}.merge.w"] = (2 * c, c)
            shapes[f"s{i}.merge.b"] = (c,)
        n = block_tokens(kind, res[i], res[i])
        hidden = config.mlp_ratio * c
        for j in range(depth):
            pre = f"s{i}.b{j}."
            shapes[pre + "ln1.g"] = (c,)
            shapes[pre + "ln1.b"] = (c,)
            for k in ("q", "k", "v", "o"):
                shapes[pre + f"csa.{k}"] = (c, c)
            shapes[pre + "csa.o_bias"] = (c,)
            if config.spe:
                shapes[pre + "csa.alpha"] = (alpha_len(kind, n, c),)
            shapes[pre + "ln2.g"] = (c,)
            shapes[pre + "ln2.b"] = (c,)
            shapes[pre + "mlp.w1"] = (c, hidden)
            shapes[pre + "mlp.b1"] = (hidden,)
            shapes[pre + "mlp.w2"] = (hidden, c)
            shapes[pre + "mlp.b2"] = (c,)
    shapes["head.w"] = (config.widths[-1], config.num_classes)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def count_params(config):
    return int(sum(int(np.prod(s)) for s in param_shapes(config).values()))


def init_params(config, seed=0):
    rng = Rng(seed)
    store = ad.ParamStore()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g",):
            value = np.ones(shape)
        elif leaf == "alpha":
            value = np.full(shape, 0.5)
        elif leaf in ("b", "b1", "b2", "o_bias"):
            value = np.zeros(shape)
        elif name.endswith(("csa.q", "csa.k")) and config.qk_std is not None:
            value = rng.normal(shape, config.qk_std)
        else:
            value = rng.normal(shape, config.init_std)
        store.add(name, value)
    return store


# -- layers -----------------------------------------------------------------

def patch_embed(image, w, b, patch=4):
    """Non-overlapping ``patch`` x ``patch`` projection of Var[B, H, W, 3]."""
    bsz, h, wd, ch = image.value.shape
    if h % patch or wd % patch:
        raise ConfigError(f"image {h}x{wd} is not divisible by the patch size {patch}")
    x = ad.reshape(image, (bsz, h // patch, patch, wd // patch, patch, ch))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (bsz, h // patch, wd // patch, patch * patch * ch))
    return ad.affine(x, w, b)


def stage_transition(x, w, b):
    """2x2 neighbourhood concat (order (0,0),(0,1),(1,0),(1,1)) then affine 4C -> 2C.

    Odd sides are zero-padded to even first.
    """
    bsz, h, wd, c = x.value.shape
    if h % 2:
        x = ad.pad(x, 1, h + 1)
        h += 1
    if wd % 2:
        x = ad.pad(x, 2, wd + 1)
        wd += 1
    x = ad.reshape(x, (bsz, h // 2, 2, wd // 2, 2, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (bsz, h // 2, wd // 2, 4 * c))
    return ad.affine(x, w, b)


FIXED_ALPHA = 0.5


def block_params(tape, store, prefix, kind, n, c):
    """Vars for one block; without a learned alpha the blend is fixed at 0.5."""
    p = {k: tape.param(store, prefix + k) if tape else ad.Var(store[prefix + k])
         for k in ("ln1.g", "ln1.b", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")}
    csa = {}
    for k in ("q", "k", "v", "o", "o_bias", "alpha"):
        name = prefix + "csa." + k
        if name in store:
            csa[k] = tape.param(store, name) if tape else ad.Var(store[name])
    if "alpha" not in csa:
        csa["alpha"] = ad.const(np.full(alpha_len(kind, n, c), FIXED_ALPHA))
    p["csa"] = csa
    return p


def fct_block_forward(x, p, kind, normalizer="logmax", pad=True, capture=None, check=True):
    """One FCT block on Var[B, H, W, C].

    With ``pad`` the spatial token count (or channel count for the channel
    kind) is zero-padded to a power of two and cropped afterwards; without it
    a non-power-of-two size is an error.
    """
    bsz, h, w, c = x.value.shape
    n = h * w
    if not pad:
        size = n if kind == "spatial" else c
        if size < 2 or not spectral.is_pow2(size):
            raise spectral.SpectrumError(
                f"{kind} block needs a power-of-two {'H*W' if kind == 'spatial' else 'C'}, got {size}")
    t = ad.layernorm(x, p["ln1.g"], p["ln1.b"])
    t = ad.reshape(t, (bsz, n, c))
    if kind == "spatial":
        size = spectral.next_pow2(n)
        t = ad.crop(csa_tokens(ad.pad(t, 1, size), p["csa"], kind, normalizer, capture, check), 1, n)
    else:
        t = csa_tokens(t, p["csa"], kind, normalizer, capture, check)
    y1 = ad.add(x, ad.reshape(t, (bsz, h, w, c)))
    m = ad.layernorm(y1, p["ln2.g"], p["ln2.b"])
    m = ad.affine(ad.gelu(ad.affine(m, p["mlp.w1"], p["mlp.b1"])), p["mlp.w2"], p["mlp.b2"])
    return ad.add(y1, m)


def forward_classifier(image, config, store, tape=None, normalizer="logmax", capture=None, check=True):
    """Logits Var[B, num_classes] for images of shape [B, S, S, 3] (or [S, S, 3])."""
    img = np.asarray(image.value if isinstance(image, ad.Var) else image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.shape[1:] != (config.input_size, config.input_size, 3):
        raise ConfigError(f"image shape {img.shape[1:]} does not match config input "
                          f"{config.input_size}x{config.input_size}x3")
    x_in = image if isinstance(image, ad.Var) and image.value.ndim == 4 else ad.const(img)

    def P(name):
        return tape.param(store, name) if tape else ad.Var(store[name])

    x = patch_embed(x_in, P("stem.w"), P("stem.b"))
    if config.ape:
        x = ad.add(x, P("ape"))
    res = config.resolutions()
    for i, (depth, kind, c) in enumerate(zip(config.depths, config.block_kinds, config.widths)):
        if i > 0:
            x = stage_transition(x, P(f"s{i}.merge.w"), P(f"s{i}.merge.b"))
        n = block_tokens(kind, res[i], res[i])
        for j in range(depth):
            prefix = f"s{i}.b{j}."
            cap = None
            if capture is not None:
                cap = capture.setdefault(prefix[:-1], {})
            p = block_params(tape, store, prefix, kind, n, c)
            x = fct_block_forward(x, p, kind, normalizer, True, cap, check)
    pooled = ad.mean(ad.reshape(x, (x.value.shape[0], -1, x.value.shape[-1])), axis=1)
    return ad.affine(pooled, P("head.w"), P("head.b"))


# -- checkpoints ------------------------------------------------------------

def _fname(name):
    return name.replace("/", "_") + ".fctt"


def save_checkpoint(path, config, store, step=0, extra=None):
    """Directory of FCTT tensors plus manifest.json (config, step, name -> file)."""
    os.makedirs(path, exist_ok=True)
    params, state = {}, {}
    for name in store.names():
        params[name] = _fname(name)
        save_tensor(os.path.join(path, params[name]), store[name])
        for key, value in sorted(store.state[name].items()):
            if isinstance(value, np.ndarray):
                fn = _fname(f"opt.{key}.{name}")
                save_tensor(os.path.join(path, fn), value)
                state.setdefault(name, {})[key] = fn
            else:
                state.setdefault(name, {})[key] = value
    manifest = {"config": config.to_json(), "step": int(step), "params": params, "opt_state": state}
    if extra:
        manifest.update(extra)
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_checkpoint(path):
    """Returns (config, store, manifest)."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    config = FctConfig.from_json(manifest["config"])
    store = ad.ParamStore()
    expected = param_shapes(config)
    if sorted(expected) != sorted(manifest["params"]):
        raise ConfigError("checkpoint parameters do not match its config")
    for name in sorted(manifest["params"]):
        value = load_tensor(os.path.join(path, manifest["params"][name]))
        if value.shape != tuple(expected[name]):
            raise ConfigError(f"{name}: stored shape {value.shape} != expected {expected[name]}")
        store.add(name, value)
    for name, entries in manifest.get("opt_state", {}).items():
        for key, value in entries.items():
            if isinstance(value, str) and value.endswith(".fctt"):
                value = load_tensor(os.path.join(path, value))
            store.state[name][key] = value
    return config, store, manifest
