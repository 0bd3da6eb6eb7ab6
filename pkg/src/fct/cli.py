"""Command line entry point: gradcheck, bench, train, eval, inspect, probe.

Every subcommand writes its outputs under --out, plus a run manifest
(manifest.json) that is written even when the command fails.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

import argparse
import csv
import json
import os
import sys
import time
import traceback
from dataclasses import asdict, replace

import numpy as np

from . import __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="fct", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"fct {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive; writes gradcheck.csv")
    g.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    g.add_argument("--num-seeds", type=_positive, default=3, help="seeds seed..seed+n-1 (default 3)")
    g.add_argument("--no-model", action="store_true", help="skip the end-to-end classifier case")
    g.add_argument("--out", default="runs/gradcheck", help="output directory")

    b = sub.add_parser("bench", help="SA vs CSA forward timing and analytic FLOPs; writes bench.csv")
    b.add_argument("--mechanisms", default="sa,csa", help="comma-separated subset of sa,csa")
    b.add_argument("--sizes", type=_int_list, default=[256, 1024, 4096], help="token counts")
    b.add_argument("--trials", type=_positive, default=30)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--channels", type=_positive, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--table2", metavar="PRESET", help="also write table2.csv for a named preset")
    b.add_argument("--out", default="runs/bench",
                   help="output directory, or a .csv path (the manifest is written next to it)")

    t = sub.add_parser("train", help="train on the synthetic spectral dataset")
    t.add_argument("--config", default="toy", help="preset name (tiny, small, base, large, micro, toy) or JSON file")
    t.add_argument("--normalizer", choices=["logmax", "softmax", "identity"], default="logmax")
    t.add_argument("--qk-std", type=_nonneg_float, default=None, help="override the query/key init scale")
    t.add_argument("--steps", type=_positive, default=3000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=_nonneg_float, default=1e-3)
    t.add_argument("--batch-size", type=_positive, default=32)
    t.add_argument("--weight-decay", type=_nonneg_float, default=0.01)
    t.add_argument("--clip", type=float, default=None, help="max global grad norm (off by default)")
    t.add_argument("--sigma", type=_nonneg_float, default=0.1, help="dataset noise level")
    t.add_argument("--scale", type=float, default=1.0, help="multiply input images by this factor")
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint directory")
    t.add_argument("--stop-at", type=int, default=None, help="stop after this step (schedule unchanged)")
    t.add_argument("--eval-every", type=_positive, default=None, help="report held-out OA every N steps")
    t.add_argument("--out", default="runs/train", help="output directory")

    e = sub.add_parser("eval", help="held-out overall accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True, help="checkpoint directory")
    e.add_argument("--seed", type=int, default=None, help="dataset seed (default: the training dataset's)")
    e.add_argument("--test-size", type=_positive, default=512)
    e.add_argument("--out", default="runs/eval", help="output directory")

    i = sub.add_parser("inspect", help="dump attention maps and alpha values to FCTT files")
    i.add_argument("--ckpt", help="checkpoint directory (default: fresh init of --config)")
    i.add_argument("--config", default="micro")
    i.add_argument("--normalizer", choices=["logmax", "softmax", "identity"], default=None)
    i.add_argument("--seed", type=int, default=0, help="init and sample seed")
    i.add_argument("--out", default="runs/inspect", help="output directory")

    r = sub.add_parser("probe", help="report DFT(X X^T X) against DFT(X) DFT(X^T) DFT(X)")
    r.add_argument("--sizes", type=_int_list, default=[4, 8])
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="runs/probe", help="output directory")
    return p


# -- manifest ---------------------------------------------------------------

def _out_dir(args):
    if args.command == "bench" and args.out.endswith(".csv"):
        return os.path.dirname(os.path.abspath(args.out))
    return args.out


def _manifest_path(args):
    if args.command == "bench" and args.out.endswith(".csv"):
        return args.out[:-4] + ".manifest.json"
    return os.path.join(args.out, MANIFEST)


def write_manifest(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
    os.replace(tmp, path)


# -- subcommands ------------------------------------------------------------

def _thread_limit(default):
    raw = os.environ.get("FCT_THREADS")
    return int(raw) if raw else default


def cmd_gradcheck(args, outputs):
    from .gradcheck import run_suite, write_csv

    seeds = tuple(range(args.seed, args.seed + args.num_seeds))
    results = run_suite(seeds, include_model=not args.no_model,
                        log=lambda r: print(f"{'pass' if r.passed else 'FAIL'}  {r.op:<20} seed={r.seed} "
                                            f"max_rel_err={r.max_rel_err:.2e} at {r.worst_coord}"))
    path = os.path.join(args.out, "gradcheck.csv")
    write_csv(path, results)
    outputs.append(path)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args, outputs):
    from . import bench

    mechs = [m for m in args.mechanisms.split(",") if m]
    for m in mechs:
        if m not in bench.MECHANISMS:
            raise UsageError(f"unknown mechanism {m!r}; expected a subset of {','.join(bench.MECHANISMS)}")
    if not args.sizes or any(n < 2 for n in args.sizes):
        raise UsageError("sizes must be integers >= 2")
    threads = _thread_limit(1)
    if threads != 1:
        raise UsageError(f"bench runs single-threaded; FCT_THREADS={threads}")
    print(bench.CONVENTIONS)
    records = bench.run_bench(mechs, args.sizes, args.trials, args.warmup, args.channels, args.seed, threads)
    path = args.out if args.out.endswith(".csv") else os.path.join(args.out, "bench.csv")
    bench.write_bench(path, records)
    outputs.append(path)
    for r in records:
        note = f" skipped: {r.skipped}" if r.skipped else ""
        print(f"{r.mechanism:>4} n={r.n:<6} analytic={r.analytic_flops:.3e} median={r.measured_ns / 1e6:.3f} ms{note}")
    n0 = bench.crossover(records)
    print(f"crossover n0: {n0 if n0 is not None else 'none in tested range'}")
    if args.table2:
        rows = bench.table2_report(args.table2)
        t2 = os.path.join(os.path.dirname(path), "table2.csv")
        bench.write_table2(t2, rows)
        outputs.append(t2)
        for row in rows:
            print(f"{row.config}@{row.resolution}: params {row.params_m:.1f}M (paper {row.paper_params_m}M), "
                  f"{row.gmac_layers:.2f} GMAC (paper {row.paper_gflops}G)")
    return EXIT_OK


def cmd_train(args, outputs):
    from threadpoolctl import threadpool_limits

    from .model import ConfigError, load_config
    from .train import DatasetError, make_dataset, train_loop

    try:
        cfg = load_config(args.config)
        if args.qk_std is not None:
            cfg = replace(cfg, qk_std=args.qk_std)
        ds = make_dataset(cfg.num_classes, cfg.input_size, args.sigma, args.data_seed, args.scale)
    except (ConfigError, DatasetError, OSError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    every = max(1, args.steps // 20)

    def log(rec):
        if rec.step % every == 0 or rec.nan_flag:
            print(f"step {rec.step:>5} loss {rec.loss:.4f} grad_norm {rec.grad_norm:.3e} lr {rec.lr:.2e}"
                  + (" NaN" if rec.nan_flag else ""))

    with threadpool_limits(limits=_thread_limit(os.cpu_count() or 1)):
        res = train_loop(cfg, ds, args.normalizer, args.steps, args.seed, args.lr, args.batch_size,
                         args.weight_decay, args.clip, out=args.out, resume=args.resume,
                         stop_at=args.stop_at, log=log, eval_every=args.eval_every)
    for step, oa in res.evals:
        print(f"step {step:>5} held-out OA {oa:.4f}")
    outputs += [os.path.join(args.out, "records.csv"), os.path.join(args.out, "checkpoint")]
    if res.crashed:
        print(f"halted at step {res.nan_step}: {res.nan_reason}")
    return EXIT_OK


def cmd_eval(args, outputs):
    from .model import load_checkpoint
    from .train import SyntheticSpectralDataset, evaluate

    try:
        cfg, store, manifest = load_checkpoint(args.ckpt)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    spec = dict(manifest.get("dataset") or {"num_classes": cfg.num_classes, "size": cfg.input_size})
    if args.seed is not None:
        spec["seed"] = args.seed
    spec["test_size"] = args.test_size
    ds = SyntheticSpectralDataset(**spec)
    oa = evaluate((cfg, store), ds, manifest.get("normalizer", "logmax"))
    print(f"OA {oa:.4f} on {ds.test_size} held-out samples")
    path = os.path.join(args.out, "eval.json")
    write_manifest(path, {"oa": oa, "checkpoint": os.path.abspath(args.ckpt), "dataset": asdict(ds)})
    outputs.append(path)
    return EXIT_OK


def cmd_inspect(args, outputs):
    from .model import forward_classifier, init_params, load_checkpoint, load_config
    from .numeric import save_tensor
    from .train import SyntheticSpectralDataset

    normalizer = args.normalizer
    if args.ckpt:
        cfg, store, manifest = load_checkpoint(args.ckpt)
        normalizer = normalizer or manifest.get("normalizer", "logmax")
    else:
        cfg = load_config(args.config)
        store = init_params(cfg, args.seed)
    normalizer = normalizer or "logmax"
    ds = SyntheticSpectralDataset(cfg.num_classes, cfg.input_size, seed=args.seed)
    img, label = ds.batch(0, 1, split=1)
    cap = {}
    with np.errstate(all="ignore"):
        logits = forward_classifier(img, cfg, store, None, normalizer, capture=cap, check=False).value
    for block, maps in sorted(cap.items()):
        for key, value in sorted(maps.items()):
            path = os.path.join(args.out, f"{block}.{key}.fctt")
            save_tensor(path, np.asarray(value))
            outputs.append(path)
    print(f"dumped {len(outputs)} tensors from {len(cap)} blocks; label {int(label[0])}, "
          f"prediction {int(np.argmax(logits[0]))}")
    return EXIT_OK


def cmd_probe(args, outputs):
    from .attention import associativity_probe
    from .numeric import Rng

    if any(n < 1 or n > 16 for n in args.sizes):
        raise UsageError("probe sizes must be in 1..16")
    path = os.path.join(args.out, "probe.csv")
    os.makedirs(args.out, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "seed", "lhs_norm", "rhs_norm", "abs_discrepancy", "rel_discrepancy"])
        for n in args.sizes:
            rep = associativity_probe(Rng(args.seed).child(n).normal((n, n)))
            w.writerow([n, args.seed, f"{rep.lhs_norm:.12e}", f"{rep.rhs_norm:.12e}",
                        f"{rep.abs_discrepancy:.12e}", f"{rep.rel_discrepancy:.12e}"])
            print(f"n={n}: relative discrepancy {rep.rel_discrepancy:.4f}")
    outputs.append(path)
    return EXIT_OK


COMMANDS = {"gradcheck": cmd_gradcheck, "bench": cmd_bench, "train": cmd_train,
            "eval": cmd_eval, "inspect": cmd_inspect, "probe": cmd_probe}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    os.makedirs(_out_dir(args), exist_ok=True)
    outputs = []
    manifest = {"subcommand": args.command, "flags": vars(args), "argv": argv,
                "seed": getattr(args, "seed", None), "version": __version__,
                "start": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "outputs": outputs}
    code, error = EXIT_FAIL, None
    try:
        code = COMMANDS[args.command](args, outputs)
    except UsageError as exc:
        error, code = str(exc), EXIT_USAGE
        print(f"fct {args.command}: {exc}", file=sys.stderr)
    except Exception as exc:
        error = f"{type(exc).__name__}: {exc}"
        traceback.print_exc()
    finally:
        manifest.update(end=time.strftime("%Y-%m-%dT%H:%M:%S%z"), exit_code=code, error=error)
        write_manifest(_manifest_path(args), manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
