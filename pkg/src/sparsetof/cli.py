"""Command-line front end: gen-data, preprocess, train, eval, sweep-lambda, report."""
from __future__ import annotations

import argparse
import datetime
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, checkpoint, dtb
from .config import ConfigError, build_dataclass, read_kv
from .data import RUN_MANIFEST, DataError, load_dataset, mean_sparsity, generate_dataset
from .losses import MetricsReport, metrics
from .model import DepthCompletionNet, bits_to_mb, count_sizes
from .normals import normals_array
from .preproc import D_MAX, EmptySparseInput, preprocess, sparsity_level
from .train import NumericFailure, TrainConfig, make_examples, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def append_run_manifest(directory: Path, record: dict) -> None:
    """Append one run record; earlier records are never rewritten."""
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["[run]"] + [f"{k}={v}" for k, v in record.items()]
    with open(directory / RUN_MANIFEST, "a") as fh:
        fh.write("\n".join(lines) + "\n\n")


# -- gen-data -------------------------------------------------------------------
def cmd_gen_data(args, record: dict) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    if args.dots <= 0:
        raise UsageError("--dots must be positive")
    if args.width < 32 or args.height < 32:
        raise UsageError("--width and --height must be >= 32")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")
    info = generate_dataset(out, args.scenes, args.width, args.height, args.dots, args.seed, args.jitter, args.val_fraction)
    target_k = 100.0 * args.dots / (args.width * args.height)
    print(f"wrote {info['scenes']} scenes to {out} ({info['val']} held out)")
    print(f"lattice pitch: {info['pitch']:.4f} px")
    print(f"mean K: {info['mean_k']:.4f}% (target {target_k:.4f}%)")
    record.update(outputs=str(out), mean_k=repr(info["mean_k"]))
    return EXIT_OK


# -- preprocess -----------------------------------------------------------------
def cmd_preprocess(args, record: dict) -> int:
    sparse = dtb.load(args.sparse)
    color = dtb.load(args.color)
    t0 = time.perf_counter()
    try:
        inp = preprocess(sparse, color)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    record["prep_time_ms"] = repr((time.perf_counter() - t0) * 1e3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtb.save(out / "inputs.dtb", inp.stacked())
    dtb.save(out / "d_nni.dtb", inp.d_nni)
    dtb.save(out / "edt.dtb", inp.edt)
    print(f"K = {sparsity_level(sparse):.4f}%  ({sparse.shape[1]}x{sparse.shape[0]})")
    record["outputs"] = str(out)
    return EXIT_OK


# -- train ----------------------------------------------------------------------
TRAIN_FLAG_KEYS = ("regime", "epochs", "seed", "lr", "lambda_n")


def load_train_config(path: Optional[str], overrides: dict) -> TrainConfig:
    values = read_kv(path) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return build_dataclass(TrainConfig, values)
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _overrides(args) -> dict:
    out = {k: (str(getattr(args, k)) if getattr(args, k) is not None else None) for k in TRAIN_FLAG_KEYS}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args, record: dict) -> int:
    cfg = load_train_config(args.config, _overrides(args))
    init = None
    if cfg.regime in ("UP", "MP"):
        if not args.init:
            raise UsageError(f"regime {cfg.regime} requires --init pointing at a float checkpoint")
        init = checkpoint.load(args.init)
        if init.is_quantized:
            raise UsageError(f"--init {args.init} is already quantized; {cfg.regime} starts from a float checkpoint")
    elif args.init:
        init = checkpoint.load(args.init)
    ds = load_dataset(args.data)
    out = Path(args.out)
    try:
        res = train(cfg, ds.split("train"), ds.split("test"), init=init, out_dir=out, log=print if args.verbose else None)
    except ValueError as exc:
        if isinstance(exc, EmptySparseInput):
            raise
        raise UsageError(str(exc)) from exc
    last = res.history[-1]
    print(f"trained {len(res.history)} epochs ({cfg.regime}); final val RMSE {last['val_rmse_mm']:.3f} mm, MNS {last['val_mns']:.5f}")
    if res.net.is_quantized:
        print(count_sizes(res.net, (ds.height, ds.width)).table())
    record.update(outputs=str(out), seed=cfg.seed, lp_reduction=cfg.lp_reduction, init=args.init or "-")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------
COLUMNS = ("model", "W bits", "W MB", "A bits", "A MB", "RMSE", "MAE", "MRE", "MNS", "d1", "d2", "d3")


def evaluate(net: Optional[DepthCompletionNet], ds, split: str = "test", record: Optional[dict] = None):
    """Metrics on full frames; ``net=None`` evaluates the NNI baseline."""
    samples = ds.split(split)
    if not samples:
        raise DataError(f"split {split!r} of {ds.root} is empty")
    if net is not None:
        m = net.config.multiple
        if ds.height % m or ds.width % m:
            raise DataError(
                f"frames are {ds.width}x{ds.height} but the checkpoint (n_s={net.config.n_s}) needs "
                f"multiples of {m}; regenerate data with --width/--height divisible by {m}"
            )
    t0 = time.perf_counter()
    ex, _ = make_examples(samples)
    prep_ms = (time.perf_counter() - t0) * 1e3 / len(samples)
    if record is not None:
        record["prep_time_ms_per_frame"] = repr(prep_ms)
    if net is None:
        pred = ex.x[:, 0]
    else:
        from .model import predict

        pred = np.concatenate([predict(net, ex.x[i:i + 4]) for i in range(0, len(ex), 4)])
    pred_mm = pred.astype(np.float64) * (D_MAX * 1000.0)
    gt_mm = ex.gt[:, 0].astype(np.float64) * (D_MAX * 1000.0)
    return metrics(pred_mm, gt_mm, ex.mask[:, 0], normals_pred=normals_array(pred), normals_gt=ex.ngt)


def _row(name: str, rep: MetricsReport, w_bits, a_bits) -> dict:
    return {
        "model": name,
        "W bits": w_bits,
        "W MB": bits_to_mb(w_bits) if w_bits is not None else None,
        "A bits": a_bits,
        "A MB": bits_to_mb(a_bits) if a_bits is not None else None,
        "RMSE": rep.rmse,
        "MAE": rep.mae,
        "MRE": rep.mre,
        "MNS": rep.mns,
        "d1": rep.delta1,
        "d2": rep.delta2,
        "d3": rep.delta3,
    }


def format_table(rows: Sequence[dict]) -> str:
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(r[c]) for c in COLUMNS] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(COLUMNS, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def format_kv(rows: Sequence[dict]) -> str:
    lines = []
    for i, r in enumerate(rows):
        for c in COLUMNS:
            v = r[c]
            key = c.replace(" ", "_")
            lines.append(f"row{i}.{key}={v!r}" if isinstance(v, float) else f"row{i}.{key}={v if v is not None else '-'}")
    return "\n".join(lines) + "\n"


def cmd_eval(args, record: dict) -> int:
    ds = load_dataset(args.data)
    rows = []
    if not args.no_baseline:
        rows.append(_row("NNI", evaluate(None, ds, args.split, record), None, None))
    for path in args.ckpt:
        net = checkpoint.load(path)
        rep = evaluate(net, ds, args.split, record)
        sizes = count_sizes(net, (ds.height, ds.width))
        rows.append(_row(str(path), rep, sizes.weight_bits, sizes.activation_bits))
    table = format_table(rows)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + "\n")
        Path(str(out) + ".kv").write_text(format_kv(rows))
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    print(table)
    record.update(outputs=f"{out},{out}.kv", split=args.split)
    return EXIT_OK


# -- sweep-lambda ---------------------------------------------------------------
def trend_check(lambdas: Sequence[float], rmse: Sequence[float], mns: Sequence[float]) -> tuple[bool, bool]:
    """As lambda decreases: RMSE non-increasing then increasing; MNS non-increasing."""
    order = np.argsort(-np.asarray(lambdas, dtype=np.float64), kind="stable")
    r = np.asarray(rmse, dtype=np.float64)[order]
    m = np.asarray(mns, dtype=np.float64)[order]
    k = int(np.argmin(r))
    valley = bool(np.all(np.diff(r[: k + 1]) <= 0) and np.all(np.diff(r[k:]) >= 0))
    return valley, bool(np.all(np.diff(m) <= 0))


def cmd_sweep(args, record: dict) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated numbers: {exc}") from exc
    if not values:
        raise UsageError("--values is empty")
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in values:
        overrides = _overrides(args)
        overrides["lambda_n"] = repr(lam)
        overrides["regime"] = "float"
        cfg = load_train_config(args.config, overrides)
        res = train(cfg, ds.split("train"), ds.split("test"), out_dir=out / f"lambda_{lam:g}")
        rep = evaluate(res.net, ds, "test")
        rows.append((lam, rep.rmse, rep.mns))
        print(f"lambda_n={lam:g}  RMSE={rep.rmse:.4f} mm  MNS={rep.mns:.6f}")
    lines = ["lambda_n,rmse_mm,mns"] + [f"{l!r},{r!r},{m!r}" for l, r, m in rows]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    if args.check_trend:
        valley, mono = trend_check(*zip(*rows))
        summary = f"trend rmse valley: {'PASS' if valley else 'FAIL'}\ntrend mns monotone: {'PASS' if mono else 'FAIL'}"
        (out / "trend.txt").write_text(summary + "\n")
        print(summary)
    record["outputs"] = str(out)
    return EXIT_OK


# -- report ---------------------------------------------------------------------
def cmd_report(args, record: dict) -> int:
    net = checkpoint.load(args.ckpt)
    rep = count_sizes(net, (args.height, args.width))
    text = rep.table() + f"\nMParams: {rep.mparams:.6f}\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
        record["outputs"] = args.out
    return EXIT_OK


# -- parser ---------------------------------------------------------------------
def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--regime", choices=("float", "UP", "MP"), help="override the config regime")
    p.add_argument("--epochs", type=int, help="override the total epoch count")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--lr", type=float, help="override the initial learning rate")
    p.add_argument("--lambda-n", dest="lambda_n", type=float, help="override the normals-loss weight")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsetof", description="Sparse ToF depth completion toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, required=True, help="number of scenes")
    p.add_argument("--width", type=int, required=True, help="frame width in pixels")
    p.add_argument("--height", type=int, required=True, help="frame height in pixels")
    p.add_argument("--dots", type=float, required=True, help="target dot count per frame")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--jitter", type=float, default=0.5, help="dot jitter amplitude in pixels")
    p.add_argument("--val-fraction", type=float, default=0.1, help="fraction of scenes held out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="build the (D_NNI, E, C) input tensor for one frame")
    p.add_argument("--sparse", required=True, help="sparse depth DTB (H x W, meters, <= 0 invalid)")
    p.add_argument("--color", required=True, help="color DTB (3 x H x W, 0-255)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="float, UP or MP training")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--init", help="float checkpoint to start from (required for UP/MP)")
    p.add_argument("--verbose", action="store_true", help="print per-epoch progress")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full-frame evaluation table")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", nargs="+", required=True, help="checkpoint directories")
    p.add_argument("--out", required=True, help="table file; a .kv twin is written next to it")
    p.add_argument("--split", default="test", choices=("test", "train", "all"), help="dataset split")
    p.add_argument("--no-baseline", action="store_true", help="omit the NNI baseline row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="normals-loss weight sweep")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--values", required=True, help="comma-separated lambda_n values")
    p.add_argument("--out", required=True, help="sweep directory")
    p.add_argument("--check-trend", action="store_true", help="report the RMSE/MNS trend check")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="per-layer bit-width and size report")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--width", type=int, default=640, help="frame width for activation sizes")
    p.add_argument("--height", type=int, default=480, help="frame height for activation sizes")
    p.add_argument("--out", help="optional output file")
    p.set_defaults(func=cmd_report)
    return parser


def _manifest_dir(args) -> Optional[Path]:
    out = getattr(args, "out", None)
    if out is None:
        return None
    p = Path(out)
    return p.parent if args.command in ("eval", "report") else p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    record = {
        "command": " ".join(list(argv) if argv is not None else sys.argv[1:]),
        "config": getattr(args, "config", None) or "-",
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": getattr(args, "data", None) or getattr(args, "ckpt", None) or "-",
        "started": _now(),
    }
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        code = args.func(args, record)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (DataError, dtb.DTBError, EmptySparseInput, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    record["wall_s"] = repr(time.perf_counter() - t0)
    record["exit"] = code
    mdir = _manifest_dir(args)
    if mdir is not None and code != EXIT_USAGE:
        try:
            append_run_manifest(mdir, record)
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
