"""Input checks shared by the estimator classes."""
from __future__ import annotations

import numpy as np

from .mimo_model import Dataset, MimoConfig, Scheme


def check_samples(X, labels=None, scheme="qpsk", require_labels=False):
    """Coerce estimator input into a :class:`Dataset`.

    ``X`` is either a Dataset (its own labels are used when ``labels`` is
    None) or a tuple ``(H, y, sigma2)`` of arrays shaped ``(M, 2Nr, 2Nt)``,
    ``(M, 2Nr)`` and ``(M,)``. A single instance without the leading axis is
    accepted too.
    """
    if isinstance(X, Dataset):
        ds = X
        if labels is not None:
            lab = _check_labels(labels, ds.labels.shape, ds.alphabet.K)
            ds = Dataset(ds.config, ds.H, ds.y, lab, ds.sigma2, ds.split)
        return _check_finite(ds)
    if not isinstance(X, (tuple, list)) or len(X) != 3:
        raise TypeError("X must be a Dataset or a tuple (H, y, sigma2)")
    H = np.asarray(X[0], dtype=np.float64)
    y = np.asarray(X[1], dtype=np.float64)
    sigma2 = np.asarray(X[2], dtype=np.float64)
    if H.ndim == 2:
        H, y, sigma2 = H[None], y[None], sigma2.reshape(1)
    sigma2 = np.broadcast_to(sigma2, (H.shape[0],)).copy() if sigma2.ndim == 0 else sigma2
    if H.ndim != 3:
        raise ValueError(f"H must have shape (M, 2Nr, 2Nt), got {H.shape}")
    m, r, n = H.shape
    if r % 2 or n % 2:
        raise ValueError(f"channel dimensions must be even in the real-valued model, got {H.shape[1:]}")
    if y.shape != (m, r):
        raise ValueError(f"y must have shape {(m, r)}, got {y.shape}")
    if sigma2.shape != (m,):
        raise ValueError(f"sigma2 must have shape {(m,)}, got {sigma2.shape}")
    if np.any(sigma2 <= 0):
        raise ValueError("noise variances must be positive")
    config = MimoConfig(n // 2, r // 2, Scheme.parse(scheme), None)
    K = config.alphabet.K
    if labels is None:
        if require_labels:
            raise ValueError("labels are required for fitting")
        lab = np.zeros((m, n), dtype=np.int64)
    else:
        lab = _check_labels(labels, (m, n), K)
    return _check_finite(Dataset(config, H, y, lab, sigma2, "train"))


def _check_labels(labels, shape, K):
    lab = np.asarray(labels)
    if lab.shape != shape:
        raise ValueError(f"labels must have shape {shape}, got {np.shape(labels)}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise ValueError("labels must be integer symbol indices")
    lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    return lab


def _check_finite(ds):
    for name in ("H", "y", "sigma2"):
        if not np.all(np.isfinite(getattr(ds, name))):
            raise ValueError(f"{name} contains NaN or infinite values")
    return ds


def check_even_drop(ed, n_nodes=None):
    if isinstance(ed, bool) or not isinstance(ed, (int, np.integer)):
        raise TypeError(f"ed must be an integer, got {type(ed).__name__}")
    if ed < 0 or ed % 2:
        raise ValueError(f"ed must be a non-negative even number (edges are dropped in symmetric pairs), got {ed}")
    if n_nodes is not None and ed >= n_nodes * (n_nodes - 1):
        raise ValueError(f"ed={ed} must be below the {n_nodes * (n_nodes - 1)} directed edges of the graph")
