"""Synthetic real-valued MIMO link: alphabets, Rayleigh channels, AWGN and datasets.

The real-valued model is ``y = H x + n`` with ``H`` of shape ``(2Nr, 2Nt)``.
SNR is the total received signal-to-noise power ratio
``E{||Hx||^2} / E{||n||^2}``.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SNR_CONVENTION = "SNR = E{||Hx||^2}/E{||n||^2} (total received power ratio)"

# Named RNG substreams; every random draw in the package hangs off one seed.
STREAMS = {"data": 0, "init": 1, "shuffle": 2, "eval": 3}
SPLITS = {"train": 0, "val": 1, "test": 2}


class FormatError(ValueError):
    """Malformed binary file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Scheme(enum.IntEnum):
    QPSK = 0
    QAM16 = 1

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).upper().replace("-", "")
        aliases = {"QPSK": cls.QPSK, "4QAM": cls.QPSK, "QAM16": cls.QAM16, "16QAM": cls.QAM16}
        if key not in aliases:
            raise ValueError(f"unknown modulation scheme {value!r}; expected qpsk or qam16")
        return aliases[key]


@dataclass(frozen=True)
class Alphabet:
    """Real per-dimension constellation, sorted ascending; label == index."""

    scheme: Scheme
    symbols: np.ndarray

    @property
    def K(self):
        return len(self.symbols)

    @property
    def energy(self):
        return float(np.mean(self.symbols**2))

    def nearest(self, values):
        """Index of the closest symbol, ties to the lower index."""
        values = np.asarray(values, dtype=np.float64)
        return np.argmin(np.abs(values[..., None] - self.symbols), axis=-1)


def build_alphabet(scheme):
    """Normalized real alphabet with mean square 1/2 so that E{x^T x} = Nt."""
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.QPSK:
        levels = np.array([-1.0, 1.0])
        scale = np.sqrt(2.0)
    else:
        levels = np.array([-3.0, -1.0, 1.0, 3.0])
        scale = np.sqrt(10.0)
    return Alphabet(scheme, levels / scale)


@dataclass(frozen=True)
class MimoConfig:
    Nt: int
    Nr: int
    scheme: Scheme = Scheme.QPSK
    snr_db_range: tuple | None = (0.0, 14.0)
    seed: int = 0
    complex_structured: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if self.Nt < 1:
            raise ValueError(f"Nt must be >= 1, got {self.Nt}")
        if self.Nr < self.Nt:
            raise ValueError(f"Nr must be >= Nt, got Nr={self.Nr}, Nt={self.Nt}")
        if self.snr_db_range is not None:
            lo, hi = (float(v) for v in self.snr_db_range)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"empty or non-finite SNR range {self.snr_db_range}")
            object.__setattr__(self, "snr_db_range", (lo, hi))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    @property
    def n_nodes(self):
        return 2 * self.Nt

    @property
    def alphabet(self):
        return build_alphabet(self.scheme)


def default_snr_range(scheme):
    return (0.0, 14.0) if Scheme.parse(scheme) is Scheme.QPSK else (4.0, 18.0)


def substream(seed, name, *key):
    """Independent generator for a named purpose, optionally keyed further."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *key))
    return np.random.Generator(np.random.PCG64(ss))


def sample_channel(Nt, Nr, rng, complex_structured=False):
    """Rayleigh channel in real form, shape ``(2Nr, 2Nt)``.

    Default draws every real entry i.i.d. N(0, 1/Nr). With
    ``complex_structured`` a complex matrix with per-component variance
    1/(2Nr) is drawn and augmented as [[Re, -Im], [Im, Re]].
    """
    if Nt < 1 or Nr < 1:
        raise ValueError("Nt and Nr must be positive")
    if not complex_structured:
        return rng.normal(0.0, np.sqrt(1.0 / Nr), size=(2 * Nr, 2 * Nt))
    std = np.sqrt(1.0 / (2 * Nr))
    re = rng.normal(0.0, std, size=(Nr, Nt))
    im = rng.normal(0.0, std, size=(Nr, Nt))
    return np.block([[re, -im], [im, re]])


def sample_symbols(alphabet, Nt, rng):
    labels = rng.integers(0, alphabet.K, size=2 * Nt)
    return labels.astype(np.int64), alphabet.symbols[labels]


def noise_variance_for_snr(snr_db, Nt, Nr, complex_structured=False):
    """Per-real-dimension noise variance giving the requested SNR.

    Unit-energy-per-complex-symbol inputs and the channel normalization of
    :func:`sample_channel` give ``E{||Hx||^2} = 2Nt`` (``Nt`` when
    ``complex_structured``).
    """
    snr_db = np.asarray(snr_db, dtype=np.float64)
    if not np.all(np.isfinite(snr_db)):
        raise ValueError("snr_db must be finite")
    gain = 0.5 if complex_structured else 1.0
    out = gain * Nt / (Nr * 10.0 ** (snr_db / 10.0))
    return float(out) if out.ndim == 0 else out


def transmit(H, x, sigma2, rng):
    H = np.asarray(H, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if H.ndim != 2 or x.shape != (H.shape[1],):
        raise ValueError(f"shape mismatch: H {H.shape} vs x {x.shape}")
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    noise = rng.normal(0.0, 1.0, size=H.shape[0]) * np.sqrt(sigma2)
    return H @ x + noise


@dataclass(frozen=True)
class ChannelSample:
    H: np.ndarray
    labels: np.ndarray
    y: np.ndarray
    sigma2: float

    @property
    def n_nodes(self):
        return self.H.shape[1]


@dataclass
class Dataset:
    """Detection instances stored as stacked arrays.

    ``H`` is ``(M, 2Nr, 2Nt)``, ``y`` is ``(M, 2Nr)``, ``labels`` is
    ``(M, 2Nt)`` and ``sigma2`` is ``(M,)``.
    """

    config: MimoConfig
    H: np.ndarray
    y: np.ndarray
    labels: np.ndarray
    sigma2: np.ndarray
    split: str = "train"

    def __post_init__(self):
        m = len(self.sigma2)
        n, r = 2 * self.config.Nt, 2 * self.config.Nr
        if self.H.shape != (m, r, n) or self.y.shape != (m, r) or self.labels.shape != (m, n):
            raise ValueError("dataset arrays disagree with the configured dimensions")

    def __len__(self):
        return len(self.sigma2)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return ChannelSample(self.H[idx], self.labels[idx], self.y[idx], float(self.sigma2[idx]))
        return Dataset(self.config, self.H[idx], self.y[idx], self.labels[idx], self.sigma2[idx], self.split)

    @property
    def samples(self):
        return [self[i] for i in range(len(self))]

    @property
    def alphabet(self):
        return self.config.alphabet

    @classmethod
    def from_samples(cls, config, samples, split="train"):
        n, r = 2 * config.Nt, 2 * config.Nr
        if not samples:
            return cls.empty(config, split)
        return cls(
            config,
            np.stack([s.H for s in samples]).astype(np.float64).reshape(-1, r, n),
            np.stack([s.y for s in samples]).astype(np.float64),
            np.stack([s.labels for s in samples]).astype(np.int64),
            np.array([s.sigma2 for s in samples], dtype=np.float64),
            split,
        )

    @classmethod
    def empty(cls, config, split="train"):
        n, r = 2 * config.Nt, 2 * config.Nr
        return cls(config, np.zeros((0, r, n)), np.zeros((0, r)), np.zeros((0, n), np.int64), np.zeros(0), split)

    def equals(self, other):
        return (
            self.config.Nt == other.config.Nt
            and self.config.Nr == other.config.Nr
            and self.config.scheme == other.config.scheme
            and self.config.seed == other.config.seed
            and np.array_equal(self.H, other.H)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.sigma2, other.sigma2)
        )


def _draw_sample(config, alphabet, rng, snr_range):
    H = sample_channel(config.Nt, config.Nr, rng, config.complex_structured)
    labels, x = sample_symbols(alphabet, config.Nt, rng)
    lo, hi = snr_range
    snr_db = lo if lo == hi else rng.uniform(lo, hi)
    sigma2 = noise_variance_for_snr(snr_db, config.Nt, config.Nr, config.complex_structured)
    return H, labels, transmit(H, x, sigma2, rng), sigma2


def generate_split(config, count, split, snr_range=None):
    """``count`` samples; sample ``k`` uses its own stream keyed by (seed, split, k)."""
    if count < 0:
        raise ValueError("sample counts must be non-negative")
    snr_range = config.snr_db_range if snr_range is None else snr_range
    if snr_range is None:
        raise ValueError("an SNR range is required to generate data")
    if np.isscalar(snr_range):
        snr_range = (float(snr_range), float(snr_range))
    alphabet = config.alphabet
    ds = Dataset.empty(config, split)
    if count == 0:
        return ds
    H = np.empty((count, 2 * config.Nr, 2 * config.Nt))
    y = np.empty((count, 2 * config.Nr))
    labels = np.empty((count, 2 * config.Nt), dtype=np.int64)
    sigma2 = np.empty(count)
    key = SPLITS[split]
    for k in range(count):
        rng = substream(config.seed, "data", key, k)
        H[k], labels[k], y[k], sigma2[k] = _draw_sample(config, alphabet, rng, snr_range)
    return Dataset(config, H, y, labels, sigma2, split)


def generate_dataset(config, n_train, n_val, n_test):
    return tuple(
        generate_split(config, count, split)
        for count, split in ((n_train, "train"), (n_val, "val"), (n_test, "test"))
    )


# -- binary dataset format ---------------------------------------------------

DATASET_MAGIC = b"EGNN-DS\0"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<8sIIIIIQQ")


def dataset_to_bytes(ds):
    cfg = ds.config
    K = cfg.alphabet.K
    parts = [_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, cfg.Nt, cfg.Nr, int(cfg.scheme), K, len(ds), cfg.seed)]
    if len(ds):
        n, r = 2 * cfg.Nt, 2 * cfg.Nr
        rec = np.dtype([("sigma2", "<f8"), ("H", "<f8", (r * n,)), ("y", "<f8", (r,)), ("labels", "u1", (n,))])
        body = np.empty(len(ds), dtype=rec)
        body["sigma2"] = ds.sigma2
        body["H"] = ds.H.reshape(len(ds), -1)
        body["y"] = ds.y
        body["labels"] = ds.labels
        parts.append(body.tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf, split="train"):
    if len(buf) < _DS_HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_DS_HEADER.size} bytes", len(buf))
    magic, version, Nt, Nr, scheme, K, count, seed = _DS_HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 8)
    try:
        config = MimoConfig(Nt, Nr, Scheme(scheme), None, seed)
    except ValueError as exc:
        raise FormatError(f"invalid header fields: {exc}", 12) from None
    if K != config.alphabet.K:
        raise FormatError(f"K={K} inconsistent with scheme {config.scheme.name}", 24)
    n, r = 2 * Nt, 2 * Nr
    rec_size = 8 + 8 * r * n + 8 * r + n
    expected = _DS_HEADER.size + count * rec_size
    if len(buf) < expected:
        full = (len(buf) - _DS_HEADER.size) // rec_size
        raise FormatError(f"truncated body: {full} of {count} complete samples", _DS_HEADER.size + full * rec_size)
    if len(buf) > expected:
        raise FormatError("trailing bytes after last sample", expected)
    if count == 0:
        return Dataset.empty(config, split)
    rec = np.dtype([("sigma2", "<f8"), ("H", "<f8", (r * n,)), ("y", "<f8", (r,)), ("labels", "u1", (n,))])
    body = np.frombuffer(buf, dtype=rec, count=count, offset=_DS_HEADER.size)
    labels = body["labels"].astype(np.int64)
    if labels.size and labels.max() >= K:
        bad = int(np.argmax((labels >= K).any(axis=1)))
        raise FormatError("label out of alphabet range", _DS_HEADER.size + bad * rec_size + rec_size - n)
    return Dataset(
        config,
        body["H"].reshape(count, r, n).astype(np.float64),
        body["y"].astype(np.float64),
        labels,
        body["sigma2"].astype(np.float64),
        split,
    )


def _split_from_path(path):
    stem = Path(path).stem
    return stem if stem in SPLITS else "train"


def save_dataset(ds, path):
    data = dataset_to_bytes(ds)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path, split=None):
    return dataset_from_bytes(Path(path).read_bytes(), split or _split_from_path(path))
