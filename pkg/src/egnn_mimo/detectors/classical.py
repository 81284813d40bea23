"""Model-based baselines: linear MMSE, exhaustive MAP and loopy sum-product BP."""
from __future__ import annotations

import time

import numpy as np
from scipy.special import logsumexp

from .base import DetectorOutput, hard_decision, one_hot

DEFAULT_MAP_BUDGET = 2**20
_MAP_CHUNK = 2**15


def mmse_estimate(H, y, sigma2, energy=0.5):
    """Linear MMSE estimate ``(H^T H + sigma2/E_s I)^-1 H^T y``; stacks along a leading axis."""
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    n = H.shape[-1]
    Ht = np.swapaxes(H, -1, -2)
    A = Ht @ H + (sigma2[..., None, None] / energy) * np.eye(n)
    rhs = Ht @ y[..., None]
    try:
        return np.linalg.solve(A, rhs)[..., 0]
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "MMSE system is singular (zero noise with a rank-deficient channel)"
        ) from exc


def mmse_detect(sample, alphabet):
    start = time.perf_counter()
    x_hat = mmse_estimate(sample.H, sample.y, sample.sigma2, alphabet.energy)
    labels = alphabet.nearest(x_hat)
    return DetectorOutput(
        one_hot(labels, alphabet.K),
        labels,
        {"detector": "mmse", "iterations": 0, "wall_time": time.perf_counter() - start, "x_hat": x_hat},
    )


def _candidates(K, n, start, stop):
    """Label vectors ``start..stop-1`` in base-K order, first node most significant."""
    idx = np.arange(start, stop, dtype=np.int64)
    powers = K ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return (idx[:, None] // powers) % K


def map_detect_bruteforce(sample, alphabet, budget=DEFAULT_MAP_BUDGET):
    """Exact MAP decision and exact per-node marginals by full enumeration.

    With a uniform prior the posterior is ``exp(-||Hx - y||^2 / 2 sigma2)`` up
    to normalization; ties in the argmax go to the first candidate in
    enumeration order.
    """
    start = time.perf_counter()
    H = np.asarray(sample.H, dtype=np.float64)
    y = np.asarray(sample.y, dtype=np.float64)
    n, K = H.shape[1], alphabet.K
    required = K**n
    if required > budget:
        raise ValueError(
            f"MAP enumeration needs {K}^{n} = {required} hypotheses, over the budget of {budget}; "
            f"raise the budget to at least {required} or shrink the system"
        )
    gram = H.T @ H
    yh = y @ H
    scale = 1.0 / (2.0 * sample.sigma2) if sample.sigma2 > 0 else np.inf
    best_dist, best_labels = np.inf, None
    log_marg = np.full((n, K), -np.inf)
    for lo in range(0, required, _MAP_CHUNK):
        labels = _candidates(K, n, lo, min(required, lo + _MAP_CHUNK))
        X = alphabet.symbols[labels]
        # ||Hx - y||^2 without the constant y^T y
        dist = np.einsum("cn,nm,cm->c", X, gram, X) - 2.0 * X @ yh
        k = int(np.argmin(dist))
        if dist[k] < best_dist:
            best_dist, best_labels = dist[k], labels[k]
        if np.isfinite(scale):
            logw = -scale * (dist - dist.min())
            w = np.exp(logw)
            sums = w @ one_hot(labels, K).reshape(len(labels), n * K)
            with np.errstate(divide="ignore"):
                chunk = np.log(sums.reshape(n, K)) - scale * dist.min()
            log_marg = np.logaddexp(log_marg, chunk)
    if np.isfinite(scale):
        post = np.exp(log_marg - logsumexp(log_marg, axis=1, keepdims=True))
    else:
        post = one_hot(best_labels, K)
    return DetectorOutput(
        post,
        np.asarray(best_labels),
        {
            "detector": "map",
            "iterations": required,
            "wall_time": time.perf_counter() - start,
            "distance": float(best_dist + y @ y),
        },
    )


def bp_detect(potentials, graph, iters=20, damping=0.3, tol=1e-13):
    """Loopy sum-product BP in the log domain with a flooding schedule.

    ``msg[j, i]`` is the normalized log message j -> i over the symbols of
    node i. Only edges active in ``graph`` carry messages.
    """
    if iters < 1:
        raise ValueError("BP needs at least one iteration")
    if not 0 <= damping < 1:
        raise ValueError("damping must lie in [0, 1)")
    start = time.perf_counter()
    phi, pair = potentials.phi_i, potentials.phi_ij
    n, K = phi.shape
    # active[j, i]: j sends to i
    active = np.asarray(graph.active_mask, dtype=bool).T
    # uniform messages, already normalized
    msg = np.where(active[..., None], -np.log(K), 0.0) * np.ones((n, n, K))
    # pair_ji[j, i, a, b] = log phi_ij(x_i = s_a, x_j = s_b)
    pair_ji = np.swapaxes(pair, 0, 1)
    converged = False
    it = 0
    for it in range(1, iters + 1):
        incoming = np.where(active[..., None], msg, 0.0).sum(axis=0)
        # cavity[j, i] = phi_j + sum_{k != i} m_{k->j}
        cavity = (phi + incoming)[:, None, :] - np.swapaxes(msg, 0, 1)
        new = logsumexp(cavity[:, :, None, :] + pair_ji, axis=3)
        new -= logsumexp(new, axis=2, keepdims=True)
        new = np.where(active[..., None], new, 0.0)
        if damping:
            new = (1.0 - damping) * new + damping * msg
        delta = np.max(np.abs(new - msg)) if n > 1 else 0.0
        msg = new
        if delta < tol:
            converged = True
            break
    belief = phi + np.where(active[..., None], msg, 0.0).sum(axis=0)
    post = np.exp(belief - logsumexp(belief, axis=1, keepdims=True))
    return DetectorOutput(
        post,
        hard_decision(post),
        {"detector": "bp", "iterations": it, "converged": converged, "wall_time": time.perf_counter() - start},
    )
