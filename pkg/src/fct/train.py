"""Desk-scale training: synthetic spectral dataset, AdamW, polynomial decay."""

import csv
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import NORMALIZERS, AttentionError
from .model import (ConfigError, FctConfig, forward_classifier, init_params,
                    load_checkpoint, save_checkpoint)
from .numeric import Rng
from .spectral import is_pow2

TRAIN_SPLIT, TEST_SPLIT = 0, 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpectralDataset:
    """Oriented sinusoids, one integer frequency vector per class, plus noise.

    Every image is standardized to zero mean and unit variance, then
    multiplied by ``scale``. Batches are keyed by (split, index) so any batch
    can be regenerated without replaying the stream.
    """

    num_classes: int = 4
    size: int = 32
    sigma: float = 0.1
    seed: int = 0
    scale: float = 1.0
    test_size: int = 512

    def __post_init__(self):
        if self.num_classes < 2:
            raise DatasetError("need at least 2 classes")
        if self.size < 16 or not is_pow2(self.size):
            raise DatasetError(f"image size must be a power of two >= 16, got {self.size}")
        if self.sigma < 0:
            raise DatasetError("noise level must be nonnegative")
        if len(set(map(tuple, self.frequencies()))) != self.num_classes:
            raise DatasetError("too many classes for this image size")

    def frequencies(self):
        """Integer (fx, fy) cycles per image for each class; radii are distinct."""
        k, half = self.num_classes, self.size // 2
        step = max(1, (half - 3) // k)
        out = []
        for c in range(k):
            r = 2 + c * step
            if r >= half:
                raise DatasetError(f"class {c} frequency {r} exceeds Nyquist for size {self.size}")
            th = np.pi * c / k
            out.append((int(round(r * np.cos(th))), int(round(r * np.sin(th)))))
        return np.array(out)

    def render(self, labels, rng):
        s = self.size
        labels = np.asarray(labels)
        f = self.frequencies()[labels].astype(np.float64)
        yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        phase = rng.uniform(len(labels), 0.0, 2 * np.pi)
        arg = 2 * np.pi * (f[:, 0, None, None] * xx + f[:, 1, None, None] * yy) / s + phase[:, None, None]
        shift = 2 * np.pi * np.arange(3) / 3
        img = np.cos(arg[..., None] + shift)
        img = img + self.sigma * rng.normal(img.shape)
        flat = img.reshape(len(labels), -1)
        mu = flat.mean(axis=1)[:, None, None, None]
        sd = flat.std(axis=1)[:, None, None, None]
        return (img - mu) / np.maximum(sd, 1e-12) * self.scale

    def batch(self, index, batch_size, split=TRAIN_SPLIT):
        rng = Rng(self.seed).child(split, index)
        labels = rng.integers(0, self.num_classes, batch_size)
        return self.render(labels, rng), labels

    def test_set(self, batch_size=128):
        """Held-out batches covering ``test_size`` samples."""
        done, i = 0, 0
        while done < self.test_size:
            b = min(batch_size, self.test_size - done)
            yield self.batch(i, b, TEST_SPLIT)
            done += b
            i += 1


def make_dataset(num_classes=4, size=32, sigma=0.1, seed=0, scale=1.0, test_size=512):
    return SyntheticSpectralDataset(num_classes, size, sigma, seed, scale, test_size)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def step(self, store, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name in store.names():
            p, g, st = store.value[name], store.grad[name], store.state[name]
            if "m" not in st:
                st["m"] = np.zeros_like(p)
                st["v"] = np.zeros_like(p)
                st["t"] = 0
            st["t"] += 1
            t = st["t"]
            p *= 1.0 - lr * self.weight_decay
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
            mhat = st["m"] / (1.0 - b1 ** t)
            vhat = st["v"] / (1.0 - b2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


def poly_lr(base, step, total, power=0.9):
    """base * (1 - step/total)^power for 0-based ``step``; reaches 0 at ``total``."""
    return base * max(0.0, 1.0 - step / total) ** power


# -- loop -------------------------------------------------------------------

@dataclass
class TrainRecord:
    step: int
    loss: float
    grad_norm: float
    nan_flag: int
    lr: float
    wall_ms: float


RECORD_FIELDS = list(TrainRecord.__dataclass_fields__)


@dataclass
class TrainResult:
    config: FctConfig
    store: ad.ParamStore
    records: list = field(default_factory=list)
    nan_step: int = None
    nan_reason: str = ""
    evals: list = field(default_factory=list)  # (steps done, held-out OA)

    @property
    def crashed(self):
        return self.nan_step is not None


def _prefetch(dataset, steps, batch_size, fixed, depth=4):
    """Yield batches for ``steps`` from a producer thread (bounded queue)."""
    q = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def produce():
        for s in steps:
            if stop.is_set():
                return
            q.put(dataset.batch(0 if fixed else s, batch_size))
        q.put(None)

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is None:
                return
            yield item
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(0.01)


def _check_compat(config, dataset):
    if config.input_size != dataset.size or config.num_classes != dataset.num_classes:
        raise ConfigError(
            f"config expects {config.input_size}px / {config.num_classes} classes, dataset has "
            f"{dataset.size}px / {dataset.num_classes} classes")


def train_loop(config, dataset, normalizer="logmax", steps=100, seed=0, lr=1e-3,
               batch_size=32, weight_decay=0.01, clip=None, fixed_batch=False,
               out=None, resume=None, stop_at=None, prefetch=True, log=None, eval_every=None):
    """Train ``config`` on ``dataset`` with cross-entropy and AdamW.

    The learning rate decays polynomially (power 0.9) over ``steps``. A
    non-finite loss or gradient (or a CSA stage producing one) sets nan_flag
    on that step's record and ends the run. ``clip`` caps the global grad
    norm when set. ``resume`` continues from a checkpoint directory;
    ``stop_at`` ends early (the schedule still assumes ``steps``).
    ``eval_every`` records held-out OA every that many steps in ``evals``.
    """
    if normalizer not in NORMALIZERS:
        raise ValueError(f"normalizer must be one of {NORMALIZERS}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_compat(config, dataset)
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    start = 0
    if resume is not None:
        config, store, manifest = load_checkpoint(resume)
        start = manifest["step"]
        steps = manifest.get("total_steps", steps)
    else:
        store = init_params(config, seed)
    result = TrainResult(config, store)
    end = steps if stop_at is None else min(stop_at, steps)
    order = range(start, end)
    batches = (_prefetch(dataset, order, batch_size, fixed_batch) if prefetch
               else (dataset.batch(0 if fixed_batch else s, batch_size) for s in order))
    writer = None
    if out is not None:
        os.makedirs(out, exist_ok=True)
        fh = open(os.path.join(out, "records.csv"), "a" if resume else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        if not resume:
            writer.writeheader()
    step = start
    try:
        for step, (images, labels) in zip(order, batches):
            t0 = time.perf_counter()
            cur_lr = poly_lr(lr, step, steps)
            nan_reason = ""
            loss_val = gnorm = float("nan")
            with np.errstate(all="ignore"):
                try:
                    tape = ad.Tape()
                    logits = forward_classifier(images, config, store, tape, normalizer)
                    loss = ad.cross_entropy(logits, labels)
                    loss_val = float(loss.value)
                    if np.isfinite(loss_val):
                        tape.backward(loss, store=store)
                        gnorm = store.grad_norm()
                except AttentionError as exc:
                    nan_reason = str(exc)
                if not nan_reason and not np.isfinite(loss_val):
                    nan_reason = "non-finite loss"
                elif not nan_reason and not np.isfinite(gnorm):
                    nan_reason = "non-finite gradient"
                if not nan_reason:
                    if clip is not None and gnorm > clip:
                        for n in store.grad:
                            store.grad[n] *= clip / gnorm
                    opt.step(store, cur_lr)
            rec = TrainRecord(step, loss_val, gnorm, int(bool(nan_reason)), cur_lr,
                              (time.perf_counter() - t0) * 1e3)
            result.records.append(rec)
            if writer:
                writer.writerow(asdict(rec))
            if log:
                log(rec)
            if nan_reason:
                result.nan_step, result.nan_reason = step, nan_reason
                break
            if eval_every and (step + 1) % eval_every == 0:
                result.evals.append((step + 1, evaluate((config, store), dataset, normalizer)))
    finally:
        if writer:
            fh.close()
    if out is not None:
        done = step + 1 if result.records and not result.crashed else step
        save_checkpoint(os.path.join(out, "checkpoint"), config, store, done,
                        {"total_steps": steps, "normalizer": normalizer, "seed": seed,
                         "lr": lr, "dataset": asdict(dataset)})
    return result


# -- evaluation -------------------------------------------------------------

def overall_accuracy(pred, labels):
    """Correctly classified samples over all samples."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape or pred.size == 0:
        raise ValueError("predictions and labels must be non-empty and aligned")
    return float(np.mean(pred == labels))


def predict(config, store, images, normalizer="logmax"):
    with np.errstate(all="ignore"):
        logits = forward_classifier(images, config, store, None, normalizer, check=False).value
    return np.argmax(logits, axis=-1)


def evaluate(checkpoint, dataset, normalizer=None):
    """Overall accuracy of a checkpoint (directory or (config, store) pair) on the held-out split."""
    if isinstance(checkpoint, (str, os.PathLike)):
        config, store, manifest = load_checkpoint(checkpoint)
        normalizer = normalizer or manifest.get("normalizer", "logmax")
    else:
        config, store = checkpoint
        normalizer = normalizer or "logmax"
    _check_compat(config, dataset)
    preds, labels = [], []
    for images, y in dataset.test_set():
        preds.append(predict(config, store, images, normalizer))
        labels.append(y)
    return overall_accuracy(np.concatenate(preds), np.concatenate(labels))
