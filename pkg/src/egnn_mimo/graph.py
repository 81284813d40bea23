"""Detection graph over the 2Nt real symbols: node features, edge weights, MRF potentials, edge drop."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

VARIANTS = ("egnn", "naive")


@dataclass(frozen=True)
class DetectionGraph:
    """Fully connected graph on ``n`` nodes with an activity mask.

    ``edge_attr[j, i]`` is the scalar attached to the message j -> i:
    ``-h_j^T h_i`` for the ``egnn`` variant and ``+h_j^T h_i`` for ``naive``.
    Arrays may carry a leading batch axis; every operation here accepts both.
    """

    raw_node_features: np.ndarray
    edge_attr: np.ndarray
    active_mask: np.ndarray
    sigma2: np.ndarray | float
    variant: str = "egnn"

    @property
    def n(self):
        return self.edge_attr.shape[-1]

    @property
    def batched(self):
        return self.edge_attr.ndim == 3

    @property
    def n_active(self):
        return int(self.active_mask.sum())

    def __getitem__(self, b):
        if not self.batched:
            raise TypeError("indexing is only defined on batched graphs")
        return DetectionGraph(
            self.raw_node_features[b], self.edge_attr[b], self.active_mask[b], float(self.sigma2[b]), self.variant
        )


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def build_graph(H, y, sigma2, variant="egnn"):
    """Graph for one sample (``H`` 2-D) or a stack of samples (``H`` 3-D)."""
    _check_variant(variant)
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if H.ndim not in (2, 3) or y.shape != H.shape[:-1] or sigma2.shape != H.shape[:-2]:
        raise ValueError(f"shape mismatch: H {H.shape}, y {y.shape}, sigma2 {sigma2.shape}")
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    n = H.shape[-1]
    gram = np.swapaxes(H, -1, -2) @ H
    yh = np.einsum("...r,...rn->...n", y, H)
    diag = np.diagonal(gram, axis1=-2, axis2=-1)
    raw = np.stack([yh, -diag, np.broadcast_to(sigma2[..., None], yh.shape)], axis=-1)
    eye = np.eye(n, dtype=bool)
    sign = -1.0 if variant == "egnn" else 1.0
    edge_attr = np.where(eye, 0.0, sign * gram)
    # Exact symmetry: copy the upper triangle onto the lower.
    iu = np.triu_indices(n, 1)
    edge_attr[..., iu[1], iu[0]] = edge_attr[..., iu[0], iu[1]]
    mask = np.broadcast_to(~eye, edge_attr.shape).copy()
    return DetectionGraph(raw, edge_attr, mask, sigma2 if sigma2.ndim else float(sigma2), variant)


def drop_mask(edge_attr, k):
    """Activity mask with the ``k`` directed edges of smallest ``|eps|`` removed.

    Pairs are ranked by ``(|eps|, min(i, j), max(i, j))``; each dropped pair
    removes both directions.
    """
    edge_attr = np.asarray(edge_attr)
    n = edge_attr.shape[-1]
    total = n * (n - 1)
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)):
        raise TypeError("edge drop count must be an integer")
    if k % 2:
        raise ValueError(f"edge drop count must be even (pairs are dropped symmetrically), got {k}")
    if not 0 <= k <= total:
        raise ValueError(f"edge drop count {k} outside [0, {total}] for {n} nodes")
    mask = np.broadcast_to(~np.eye(n, dtype=bool), edge_attr.shape).copy()
    if k == 0:
        return mask
    iu, ju = np.triu_indices(n, 1)
    weights = np.abs(edge_attr[..., iu, ju])
    # triu order is lexicographic in (min, max), so a stable sort breaks ties correctly
    order = np.argsort(weights, axis=-1, kind="stable")[..., : k // 2]
    drop_i, drop_j = iu[order], ju[order]
    if edge_attr.ndim == 2:
        mask[drop_i, drop_j] = False
        mask[drop_j, drop_i] = False
    else:
        b = np.arange(edge_attr.shape[0])[:, None]
        mask[b, drop_i, drop_j] = False
        mask[b, drop_j, drop_i] = False
    return mask


def edge_drop(graph, k):
    """Copy of ``graph`` with the ``k`` least-correlated directed edges deactivated.

    The ranking is per sample; the drop set only ever shrinks the active set
    already present in ``graph``.
    """
    mask = drop_mask(graph.edge_attr, k)
    if k == 0:
        return replace(graph, active_mask=graph.active_mask.copy())
    return replace(graph, active_mask=graph.active_mask & mask)


def active_neighbors(graph, i):
    if graph.batched:
        raise TypeError("active_neighbors needs an unbatched graph")
    if not 0 <= i < graph.n:
        raise IndexError(f"node {i} out of range for {graph.n} nodes")
    return [int(j) for j in np.flatnonzero(graph.active_mask[i])]


@dataclass(frozen=True)
class MrfPotentials:
    """Log-domain pairwise MRF for the posterior p(x | y) under a uniform prior.

    ``phi_i[i, a]`` is log phi_i(s_a); ``phi_ij[i, j, a, b]`` is
    log phi_ij(x_i = s_a, x_j = s_b). Only entries on active edges are used.
    """

    phi_i: np.ndarray
    phi_ij: np.ndarray
    symbols: np.ndarray
    sigma2: float


def build_potentials(H, y, sigma2, alphabet):
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive for MRF potentials")
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = alphabet.symbols
    gram = H.T @ H
    yh = y @ H
    diag = np.diag(gram)
    phi_i = -(np.outer(diag, s**2) - 2.0 * np.outer(yh, s)) / (2.0 * sigma2)
    coupling = gram.copy()
    np.fill_diagonal(coupling, 0.0)
    phi_ij = -(coupling[:, :, None, None] * np.multiply.outer(s, s)) / sigma2
    return MrfPotentials(phi_i, phi_ij, s.copy(), float(sigma2))
