"""Training loop, SER evaluation, SNR sweeps and per-epoch timing benchmarks."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .detectors.base import symbol_errors, wilson_halfwidth
from .detectors.classical import DEFAULT_MAP_BUDGET, bp_detect, map_detect_bruteforce, mmse_estimate
from .detectors.gnn import EgnnParams, GnnArchitecture, gnn_logits, loss_and_grad
from .graph import build_graph, build_potentials, edge_drop
from .mimo_model import generate_split, substream
from .nn_core import AdamState, adam_step

log = logging.getLogger(__name__)

CLASSICAL_DETECTORS = ("mmse", "map", "bp")
REPORT_COLUMNS = ("epoch", "loss", "val_ser", "train_s", "eval_s")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "egnn"
    ed_count: int = 0
    epochs: int = 100
    batch_size: int = 64
    lr: float = 3e-4
    steps: int = 6
    node_dim: int = 32
    gru_hidden: int = 128
    readout_hidden: int = 64
    seed: int = 0
    gru_self_input: bool = True
    eval_snr_points: tuple = ()
    eval_samples: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if self.ed_count < 0 or self.ed_count % 2:
            raise ValueError(f"ed_count must be a non-negative even number, got {self.ed_count}")

    def architecture(self, K):
        return GnnArchitecture(
            self.variant, self.node_dim, self.gru_hidden, self.readout_hidden, self.steps, K, self.gru_self_input
        )


@dataclass
class TrainReport:
    config: TrainConfig
    loss: list = field(default_factory=list)
    val_ser: list = field(default_factory=list)
    train_s: list = field(default_factory=list)
    eval_s: list = field(default_factory=list)
    best_epoch: int = 0
    initial_val_ser: float | None = None
    test_ser: dict = field(default_factory=dict)
    final_params: EgnnParams | None = None

    @property
    def epochs(self):
        return len(self.loss)

    def rows(self):
        return [
            {"epoch": e + 1, "loss": l, "val_ser": s, "train_s": t, "eval_s": v}
            for e, (l, s, t, v) in enumerate(zip(self.loss, self.val_ser, self.train_s, self.eval_s))
        ]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})

    def config_echo(self):
        return json.dumps(
            {
                "config": asdict(self.config),
                "best_epoch": self.best_epoch,
                "initial_val_ser": self.initial_val_ser,
                "test_ser": {str(k): v for k, v in self.test_ser.items()},
            },
            indent=2,
        )


def read_report_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {"epoch": int(r["epoch"]), **{k: float(r[k]) for k in REPORT_COLUMNS[1:]}}
        for r in rows
    ]


def batch_graph(dataset, idx, variant, ed_count):
    graph = build_graph(dataset.H[idx], dataset.y[idx], dataset.sigma2[idx], variant)
    return edge_drop(graph, ed_count) if ed_count else graph


def _check_ed(ed_count, n):
    if ed_count >= n * (n - 1):
        raise ValueError(f"ed_count {ed_count} must be below the {n * (n - 1)} directed edges of a {n}-node graph")


def gnn_predict(params, dataset, ed_count=0, batch_size=256):
    """Hard decisions ``(M, 2Nt)`` of a GNN detector on every sample."""
    out = np.empty(dataset.labels.shape, dtype=np.int64)
    for lo in range(0, len(dataset), batch_size):
        idx = np.arange(lo, min(len(dataset), lo + batch_size))
        graph = batch_graph(dataset, idx, params.arch.variant, ed_count)
        out[idx] = np.argmax(gnn_logits(params, graph), axis=-1)
    return out


def classical_predict(name, dataset, bp_iters=20, bp_damping=0.3, map_budget=DEFAULT_MAP_BUDGET):
    alphabet = dataset.alphabet
    if name == "mmse":
        x_hat = mmse_estimate(dataset.H, dataset.y, dataset.sigma2, alphabet.energy)
        return alphabet.nearest(x_hat)
    if name not in CLASSICAL_DETECTORS:
        raise ValueError(f"unknown detector {name!r}")
    out = np.empty(dataset.labels.shape, dtype=np.int64)
    for k in range(len(dataset)):
        sample = dataset[k]
        if name == "map":
            out[k] = map_detect_bruteforce(sample, alphabet, map_budget).hard_labels
        else:
            pot = build_potentials(sample.H, sample.y, sample.sigma2, alphabet)
            graph = build_graph(sample.H, sample.y, sample.sigma2, "egnn")
            out[k] = bp_detect(pot, graph, bp_iters, bp_damping).hard_labels
    return out


@dataclass(frozen=True)
class EvalResult:
    ser: float
    errors: int
    n_symbols: int
    wall_time: float

    @property
    def ci95_halfwidth(self):
        return wilson_halfwidth(self.errors, self.n_symbols)


def evaluate(detector, dataset, ed_count=0, **kwargs):
    """SER of ``detector`` (EgnnParams or a classical detector name) on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset: the error rate is undefined")
    start = time.perf_counter()
    if isinstance(detector, EgnnParams):
        pred = gnn_predict(detector, dataset, ed_count)
    else:
        pred = classical_predict(detector, dataset, **kwargs)
    elapsed = time.perf_counter() - start
    errors, total = symbol_errors(pred, dataset.labels)
    return EvalResult(errors / total, errors, total, elapsed)


def train(train_ds, val_ds, config, on_epoch=None):
    """Adam training of a GNN detector; returns the best-validation parameters and the report.

    The report's ``final_params`` holds the last-epoch parameters.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training needs non-empty train and validation sets")
    mc = train_ds.config
    if (mc.Nt, mc.Nr, mc.scheme) != (val_ds.config.Nt, val_ds.config.Nr, val_ds.config.scheme):
        raise ValueError("train and validation sets disagree on Nt, Nr or scheme")
    n = 2 * mc.Nt
    _check_ed(config.ed_count, n)
    arch = config.architecture(mc.alphabet.K)
    params = EgnnParams.initialize(arch, _init_seed(config.seed))
    report = TrainReport(config)
    report.initial_val_ser = evaluate(params, val_ds, config.ed_count).ser
    best, best_ser = params.copy(), np.inf
    state = AdamState.for_params(params.vector, lr=config.lr)
    shuffle = substream(config.seed, "shuffle")
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle.permutation(len(train_ds))
        total_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            graph = batch_graph(train_ds, idx, arch.variant, config.ed_count)
            loss, grads = loss_and_grad(params, graph, train_ds.labels[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grads.flat)):
                raise TrainingDiverged(epoch)
            adam_step(state, params.vector, grads)
            total_loss += loss * len(idx)
        train_s = time.perf_counter() - start
        val = evaluate(params, val_ds, config.ed_count)
        report.loss.append(total_loss / len(order))
        report.val_ser.append(val.ser)
        report.train_s.append(train_s)
        report.eval_s.append(val.wall_time)
        if val.ser < best_ser:
            best, best_ser, report.best_epoch = params.copy(), val.ser, epoch
        log.info("epoch %d loss %.5f val_ser %.5f (%.2fs)", epoch, report.loss[-1], val.ser, train_s)
        if on_epoch is not None:
            on_epoch(epoch, report)
    report.final_params = params
    if config.eval_snr_points and config.eval_samples:
        for point in snr_sweep(best, mc, config.eval_snr_points, config.eval_samples, config.seed, config.ed_count):
            report.test_ser[point.snr_db] = point.ser
    return best, report


def _init_seed(seed):
    return int(substream(seed, "init").integers(2**63))


@dataclass(frozen=True)
class SweepPoint:
    snr_db: float
    detector: str
    ser: float
    ci95_halfwidth: float
    n_symbols: int
    errors: int


def detector_name(detector, ed_count=0):
    if isinstance(detector, EgnnParams):
        name = detector.arch.variant
        return f"{name}(ED={ed_count})" if name == "egnn" else "naive-gnn"
    return detector


def snr_sweep(detector, mimo_config, snr_points, n_samples, seed=None, ed_count=0, **kwargs):
    """SER with a Wilson 95% half-width at each fixed SNR point.

    Every point reuses the same channels and symbols (keyed by ``seed``) and
    only rescales the noise, which keeps the curve free of channel-draw jitter.
    """
    snr_points = list(snr_points)
    if not snr_points:
        raise ValueError("at least one SNR point is required")
    cfg = replace(mimo_config, seed=mimo_config.seed if seed is None else seed)
    out = []
    for snr in snr_points:
        ds = generate_split(cfg, n_samples, "test", snr_range=(float(snr), float(snr)))
        res = evaluate(detector, ds, ed_count, **kwargs)
        out.append(
            SweepPoint(
                float(snr), detector_name(detector, ed_count), float(res.ser), float(res.ci95_halfwidth), res.n_symbols, res.errors
            )
        )
    return out


@dataclass(frozen=True)
class TimingRow:
    name: str
    variant: str
    ed_count: int
    train_s_per_epoch: float
    test_s_per_epoch: float
    train_samples: list
    test_samples: list


def benchmark_epoch_time(configs, train_ds, test_ds, repeats=5, warmup=1):
    """Median per-epoch train and test wall time for each named TrainConfig.

    Runs single-threaded; the first ``warmup`` epochs are excluded.
    """
    rows = []
    K = train_ds.alphabet.K
    n = 2 * train_ds.config.Nt
    with threadpool_limits(limits=1):
        for name, config in configs:
            _check_ed(config.ed_count, n)
            params = EgnnParams.initialize(config.architecture(K), _init_seed(config.seed))
            state = AdamState.for_params(params.vector, lr=config.lr)
            shuffle = substream(config.seed, "shuffle")
            train_t, test_t = [], []
            for rep in range(warmup + repeats):
                start = time.perf_counter()
                order = shuffle.permutation(len(train_ds))
                for lo in range(0, len(order), config.batch_size):
                    idx = order[lo : lo + config.batch_size]
                    graph = batch_graph(train_ds, idx, config.variant, config.ed_count)
                    _, grads = loss_and_grad(params, graph, train_ds.labels[idx])
                    adam_step(state, params.vector, grads)
                t_train = time.perf_counter() - start
                t_test = evaluate(params, test_ds, config.ed_count).wall_time
                if rep >= warmup:
                    train_t.append(t_train)
                    test_t.append(t_test)
            rows.append(
                TimingRow(name, config.variant, config.ed_count, float(np.median(train_t)), float(np.median(test_t)), train_t, test_t)
            )
    return rows


def timing_configs(seed=0, ed=200, **overrides):
    """The three benchmark rows: naive GNN, EGNN without drop, EGNN with ``ed`` edges dropped."""
    base = TrainConfig(seed=seed, **overrides)
    return [
        ("naive-gnn", replace(base, variant="naive", ed_count=0)),
        ("egnn(ED=0)", replace(base, variant="egnn", ed_count=0)),
        (f"egnn(ED={ed})", replace(base, variant="egnn", ed_count=ed)),
    ]

