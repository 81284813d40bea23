"""Command-line entry point: ``egnn-mimo {gen-data,train,eval,sweep,bench,inspect}``.

Exit codes: 0 success, 2 flag error, 3 data or format error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .detectors.classical import DEFAULT_MAP_BUDGET
from .detectors.gnn import EgnnParams
from .mimo_model import (
    _DS_HEADER,
    SNR_CONVENTION,
    FormatError,
    MimoConfig,
    Scheme,
    build_alphabet,
    default_snr_range,
    generate_split,
    load_dataset,
    save_dataset,
)
from .nn_core import checkpoint_from_bytes, save_checkpoint
from .training import (
    CLASSICAL_DETECTORS,
    TrainConfig,
    TrainingDiverged,
    benchmark_epoch_time,
    detector_name,
    evaluate,
    snr_sweep,
    timing_configs,
    train,
)

EXIT_OK, EXIT_FLAGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLIT_FILES = {"train": "train.egds", "val": "val.egds", "test": "test.egds"}
SWEEP_COLUMNS = ("snr_db", "detector", "ser", "ci95_halfwidth", "n_symbols", "errors")
BENCH_COLUMNS = ("name", "variant", "ed_count", "train_s_per_epoch", "test_s_per_epoch")

log = logging.getLogger("egnn_mimo")


class FlagError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise FlagError(f"{self.prog}: {message}")


def parse_snr_list(text):
    """``"a,b,c"`` or inclusive ``"start:stop:step"`` (dB)."""
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, stop, step = parts
            if step <= 0 or stop < start:
                raise FlagError(f"SNR range {text!r} needs step > 0 and start <= stop")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            values = [start + k * step for k in range(count)]
        else:
            values = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise FlagError(f"cannot parse SNR list {text!r}; use 'a,b,c' or 'start:stop:step'") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise FlagError(f"SNR list {text!r} must contain finite values")
    return [round(v, 12) for v in values]


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _pos_float(text):
    v = float(text)
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def _scheme(text):
    try:
        return Scheme.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _check_ed(ed, n_nodes=None):
    if ed % 2:
        raise FlagError(f"--ed {ed} is odd; edges are dropped in symmetric pairs, so the count must be even")
    if n_nodes is not None and ed >= n_nodes * (n_nodes - 1):
        raise FlagError(f"--ed {ed} must be below the {n_nodes * (n_nodes - 1)} directed edges of a {n_nodes}-node graph")


def _header(cmd, seed, out):
    print(f"# egnn-mimo {__version__} {cmd} seed={seed} substreams=data,init,shuffle,eval", file=out)
    print(f"# {SNR_CONVENTION}", file=out)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_split(data_dir, split):
    path = Path(data_dir) / SPLIT_FILES[split]
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file {path}")
    return load_dataset(path, split)


def _cell(v):
    # repr of a Python float round-trips exactly
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _emit_csv(fh, columns, rows, lineterminator="\r\n"):
    writer = csv.DictWriter(fh, fieldnames=columns, lineterminator=lineterminator)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(v) for k, v in row.items()})


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        _emit_csv(fh, columns, rows)


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args, out):
    lo, hi = default_snr_range(args.scheme)
    lo = lo if args.snr_min is None else args.snr_min
    hi = hi if args.snr_max is None else args.snr_max
    try:
        config = MimoConfig(args.nt, args.nr, args.scheme, (lo, hi), args.seed, args.complex_structured)
    except ValueError as exc:
        raise FlagError(str(exc)) from None
    _header("gen-data", args.seed, out)
    print(f"# Nt={args.nt} Nr={args.nr} scheme={args.scheme.name.lower()} snr_db=[{lo}, {hi}]", file=out)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    for split, count in (("train", args.train), ("val", args.val), ("test", args.test)):
        path = dest / SPLIT_FILES[split]
        digest = save_dataset(generate_split(config, count, split), path)
        print(f"{path}\t{count}\t{digest}", file=out)
    return EXIT_OK


def _train_config(args, eval_points=()):
    return TrainConfig(
        variant=args.variant,
        ed_count=args.ed,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        steps=args.steps,
        node_dim=args.node_dim,
        gru_hidden=args.gru_hidden,
        readout_hidden=args.readout_hidden,
        gru_self_input=not args.gru_message_only,
        seed=args.seed,
        eval_snr_points=tuple(eval_points),
        eval_samples=args.eval_samples if eval_points else 0,
    )


def _final_path(ckpt):
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.stem + "-final" + (ckpt.suffix or ".ck"))


def cmd_train(args, out):
    _check_ed(args.ed)
    eval_points = parse_snr_list(args.eval_snr) if args.eval_snr else ()
    config = _train_config(args, eval_points)
    train_ds, val_ds = _load_split(args.data, "train"), _load_split(args.data, "val")
    _check_ed(args.ed, 2 * train_ds.config.Nt)
    _header("train", args.seed, out)
    print(f"# config {json.dumps(asdict(config))}", file=out)

    def progress(epoch, report):
        print(
            f"epoch {epoch}/{config.epochs} loss={report.loss[-1]:.6f} val_ser={report.val_ser[-1]:.6f} "
            f"train_s={report.train_s[-1]:.2f}",
            file=out,
            flush=True,
        )

    best, report = train(train_ds, val_ds, config, on_epoch=progress)
    save_checkpoint(best.to_checkpoint(), args.ckpt)
    save_checkpoint(report.final_params.to_checkpoint(), _final_path(args.ckpt))
    report_path = Path(args.report)
    report.write_csv(report_path)
    echo = json.loads(report.config_echo())
    echo["seed"] = args.seed
    echo["data"] = str(args.data)
    report_path.with_suffix(".json").write_text(json.dumps(echo, indent=2) + "\n")
    print(f"best_epoch={report.best_epoch} initial_val_ser={report.initial_val_ser!r}", file=out)
    for snr, value in report.test_ser.items():
        print(f"test_ser snr_db={snr} ser={value!r}", file=out)
    print(f"checkpoint {args.ckpt} {_sha256(args.ckpt)}", file=out)
    print(f"report {report_path}", file=out)
    return EXIT_OK


def _load_params(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return EgnnParams.from_checkpoint(checkpoint_from_bytes(path.read_bytes()))


def _detector_from_args(args, n_nodes, K):
    if (args.ckpt is None) == (args.detector is None):
        raise FlagError("give exactly one of --ckpt or --detector")
    _check_ed(args.ed, n_nodes)
    if args.detector is not None:
        if args.ed:
            raise FlagError("--ed applies to GNN checkpoints only")
        if args.detector == "map" and K**n_nodes > args.map_budget:
            raise FlagError(
                f"MAP enumeration needs {K}^{n_nodes} = {K**n_nodes} hypotheses, over the budget of "
                f"{args.map_budget}; pass --map-budget {K**n_nodes} or shrink the system"
            )
        return args.detector
    params = _load_params(args.ckpt)
    if params.arch.K != K:
        raise FlagError(f"checkpoint was trained for K={params.arch.K} symbols per dimension, data uses K={K}")
    return params


def _classical_kwargs(args, detector):
    if detector == "map":
        return {"map_budget": args.map_budget}
    if detector == "bp":
        return {"bp_iters": args.bp_iters, "bp_damping": args.bp_damping}
    return {}


def cmd_eval(args, out):
    path = Path(args.data)
    if path.is_dir():
        path = path / SPLIT_FILES["test"]
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file {path}")
    ds = load_dataset(path)
    detector = _detector_from_args(args, 2 * ds.config.Nt, ds.alphabet.K)
    _header("eval", ds.config.seed, out)
    res = evaluate(detector, ds, args.ed, **_classical_kwargs(args, detector))
    print("detector,ser,ci95_halfwidth,n_symbols,errors,wall_s", file=out)
    print(
        f"{detector_name(detector, args.ed)},{_cell(res.ser)},{_cell(res.ci95_halfwidth)},{res.n_symbols},{res.errors},{res.wall_time:.4f}",
        file=out,
    )
    return EXIT_OK


def cmd_sweep(args, out):
    snrs = parse_snr_list(args.snr)
    alphabet = build_alphabet(args.scheme)
    try:
        config = MimoConfig(args.nt, args.nr, args.scheme, None, args.seed)
    except ValueError as exc:
        raise FlagError(str(exc)) from None
    detector = _detector_from_args(args, 2 * args.nt, alphabet.K)
    _header("sweep", args.seed, out)
    points = snr_sweep(detector, config, snrs, args.samples, args.seed, args.ed, **_classical_kwargs(args, detector))
    rows = [asdict(p) for p in points]
    if args.out:
        _write_csv(args.out, SWEEP_COLUMNS, rows)
    _emit_csv(out, SWEEP_COLUMNS, rows, "\n")
    return EXIT_OK


def cmd_bench(args, out):
    _check_ed(args.ed)
    train_ds, test_ds = _load_split(args.data, "train"), _load_split(args.data, "test")
    if args.max_samples:
        train_ds, test_ds = train_ds[: args.max_samples], test_ds[: args.max_samples]
    if len(train_ds) == 0 or len(test_ds) == 0:
        raise ValueError("bench needs non-empty train and test files")
    _check_ed(args.ed, 2 * train_ds.config.Nt)
    _header("bench", args.seed, out)
    print(f"# single-threaded, warmup={args.warmup}, median of {args.repeats} epochs, {len(train_ds)} train samples", file=out)
    configs = timing_configs(args.seed, args.ed, batch_size=args.batch, steps=args.steps)
    rows = benchmark_epoch_time(configs, train_ds, test_ds, repeats=args.repeats, warmup=args.warmup)
    table = [{k: getattr(r, k) for k in BENCH_COLUMNS} for r in rows]
    if args.out:
        _write_csv(args.out, BENCH_COLUMNS, table)
    _emit_csv(out, BENCH_COLUMNS, table, "\n")
    return EXIT_OK


def cmd_inspect(args, out):
    if (args.data is None) == (args.ckpt is None):
        raise FlagError("give exactly one of --data or --ckpt")
    path = Path(args.data or args.ckpt)
    if not path.is_file():
        raise FileNotFoundError(f"missing file {path}")
    raw = path.read_bytes()
    print(f"file {path}", file=out)
    print(f"size {len(raw)}", file=out)
    print(f"sha256 {hashlib.sha256(raw).hexdigest()}", file=out)
    if args.data:
        ds = load_dataset(path)
        magic, version, *_ = _DS_HEADER.unpack_from(raw)
        c = ds.config
        print(f"magic {magic!r}\nversion {version}", file=out)
        print(f"Nt {c.Nt}\nNr {c.Nr}\nscheme {Scheme(c.scheme).name.lower()}\nK {ds.alphabet.K}", file=out)
        print(f"count {len(ds)}\nseed {c.seed}", file=out)
        if len(ds):
            print(f"sigma2_min {_cell(ds.sigma2.min())}\nsigma2_max {_cell(ds.sigma2.max())}", file=out)
    else:
        entries = checkpoint_from_bytes(raw)
        print(f"entries {len(entries)}", file=out)
        total = 0
        for name, arr in entries.items():
            print(f"  {name}\t{arr.size}", file=out)
            if not name.startswith("arch."):
                total += arr.size
        print(f"parameters {total}", file=out)
        try:
            arch = EgnnParams.from_checkpoint(entries).arch
            print(f"architecture {json.dumps(asdict(arch))}", file=out)
            for name, shape in arch.layout():
                print(f"  {name}\t{tuple(shape)}", file=out)
        except (KeyError, ValueError):
            print("architecture unknown (not a GNN detector checkpoint)", file=out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_gnn_flags(p):
    p.add_argument("--variant", choices=("naive", "egnn"), default="egnn")
    p.add_argument("--ed", type=_nonneg_int, default=0, help="directed edges to drop (even)")
    p.add_argument("--steps", type=_pos_int, default=6, help="message-passing rounds T")
    p.add_argument("--node-dim", type=_pos_int, default=32)
    p.add_argument("--gru-hidden", type=_pos_int, default=128)
    p.add_argument("--readout-hidden", type=_pos_int, default=64)
    p.add_argument(
        "--gru-message-only",
        action="store_true",
        help="feed the GRU the aggregated message alone, without the node's own state",
    )


def _add_detector_flags(p):
    p.add_argument("--ckpt", help="GNN checkpoint")
    p.add_argument("--detector", choices=CLASSICAL_DETECTORS)
    p.add_argument("--ed", type=_nonneg_int, default=0, help="edges dropped at inference (GNN only)")
    p.add_argument("--map-budget", type=_pos_int, default=DEFAULT_MAP_BUDGET)
    p.add_argument("--bp-iters", type=_pos_int, default=20)
    p.add_argument("--bp-damping", type=float, default=0.3)


def build_parser():
    parser = _Parser(prog="egnn-mimo", description="GNN-based MIMO symbol detection experiments")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate train/val/test dataset files")
    p.add_argument("--scheme", type=_scheme, default=Scheme.QPSK)
    p.add_argument("--nt", type=_pos_int, default=16)
    p.add_argument("--nr", type=_pos_int, default=32)
    p.add_argument("--snr-min", type=float)
    p.add_argument("--snr-max", type=float)
    p.add_argument("--train", type=_nonneg_int, default=49152)
    p.add_argument("--val", type=_nonneg_int, default=16384)
    p.add_argument("--test", type=_nonneg_int, default=16384)
    p.add_argument("--complex-structured", action="store_true", help="channel with complex block structure")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a GNN detector")
    p.add_argument("--data", required=True, help="directory holding train.egds and val.egds")
    _add_gnn_flags(p)
    p.add_argument("--epochs", type=_nonneg_int, default=100)
    p.add_argument("--batch", type=_pos_int, default=64)
    p.add_argument("--lr", type=_pos_float, default=3e-4)
    p.add_argument("--eval-snr", help="SNR list for a final test sweep")
    p.add_argument("--eval-samples", type=_pos_int, default=16384)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True, help="per-epoch CSV; a .json config echo is written beside it")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="SER of a detector on a dataset file")
    p.add_argument("--data", required=True, help="dataset file, or a directory holding test.egds")
    _add_detector_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="SER versus SNR curve")
    _add_detector_flags(p)
    p.add_argument("--scheme", type=_scheme, default=Scheme.QPSK)
    p.add_argument("--nt", type=_pos_int, default=16)
    p.add_argument("--nr", type=_pos_int, default=32)
    p.add_argument("--snr", required=True, help="'a,b,c' or 'start:stop:step' in dB")
    p.add_argument("--samples", type=_pos_int, default=20000)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="per-epoch train/test timing of the three GNN configurations")
    p.add_argument("--data", required=True, help="directory holding train.egds and test.egds")
    p.add_argument("--ed", type=_nonneg_int, default=200)
    p.add_argument("--steps", type=_pos_int, default=6)
    p.add_argument("--batch", type=_pos_int, default=64)
    p.add_argument("--repeats", type=_pos_int, default=5)
    p.add_argument("--warmup", type=_nonneg_int, default=1)
    p.add_argument("--max-samples", type=_nonneg_int, default=0, help="truncate both splits (0 keeps all)")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="summarize a dataset or checkpoint file")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args, out)
    except FlagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: {exc}; aborting", file=sys.stderr)
        return EXIT_NUMERIC
    except np.linalg.LinAlgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
