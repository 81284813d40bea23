"""scikit-learn style wrappers around the detectors.

Inputs are a :class:`~egnn_mimo.mimo_model.Dataset` or a tuple
``(H, y, sigma2)``; targets are symbol-index matrices of shape ``(M, 2Nt)``.
``score`` returns the symbol accuracy ``1 - SER``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_even_drop, check_samples
from .detectors.base import hard_decision, one_hot, ser
from .detectors.classical import DEFAULT_MAP_BUDGET, bp_detect, map_detect_bruteforce, mmse_estimate
from .detectors.gnn import EgnnParams, gnn_logits
from .graph import build_graph, build_potentials
from .nn_core import load_checkpoint, save_checkpoint, softmax
from .training import TrainConfig, batch_graph, train


class _SymbolDetector(ClassifierMixin, BaseEstimator):
    def _prepare(self, X, y=None, require_labels=False):
        return check_samples(X, y, getattr(self, "scheme", "qpsk"), require_labels)

    def predict(self, X):
        return hard_decision(self.predict_proba(X))

    def score(self, X, y=None, sample_weight=None):
        ds = self._prepare(X, y, require_labels=y is None and not hasattr(X, "labels"))
        return 1.0 - ser(self.predict(ds), ds.labels)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        tags.non_deterministic = False
        return tags


class _ClassicalDetector(_SymbolDetector):
    def fit(self, X, y=None):
        ds = self._prepare(X, y)
        self.n_nodes_ = ds.labels.shape[1]
        self.classes_ = np.arange(ds.alphabet.K)
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        ds = self._prepare(X)
        if ds.labels.shape[1] != self.n_nodes_:
            raise ValueError(f"fitted for {self.n_nodes_} nodes, got {ds.labels.shape[1]}")
        if len(ds) == 0:
            return np.zeros((0, self.n_nodes_, ds.alphabet.K))
        return self._posteriors(ds)


class MMSEDetector(_ClassicalDetector):
    """Linear MMSE followed by nearest-symbol quantization (one-hot posteriors)."""

    def __init__(self, scheme="qpsk"):
        self.scheme = scheme

    def _posteriors(self, ds):
        x_hat = mmse_estimate(ds.H, ds.y, ds.sigma2, ds.alphabet.energy)
        return one_hot(ds.alphabet.nearest(x_hat), ds.alphabet.K)


class MAPDetector(_ClassicalDetector):
    """Exhaustive MAP search; ``predict_proba`` gives the exact marginals."""

    def __init__(self, scheme="qpsk", budget=DEFAULT_MAP_BUDGET):
        self.scheme = scheme
        self.budget = budget

    def predict(self, X):
        # the joint argmax, which can differ from per-node marginal argmaxes
        check_is_fitted(self)
        ds = self._prepare(X)
        out = np.zeros(ds.labels.shape, dtype=np.int64)
        for k, s in enumerate(ds.samples):
            out[k] = map_detect_bruteforce(s, ds.alphabet, self.budget).hard_labels
        return out

    def _posteriors(self, ds):
        return np.stack([map_detect_bruteforce(s, ds.alphabet, self.budget).posteriors for s in ds.samples])


class BPDetector(_ClassicalDetector):
    """Loopy sum-product belief propagation on the fully connected MRF."""

    def __init__(self, scheme="qpsk", iters=20, damping=0.3):
        self.scheme = scheme
        self.iters = iters
        self.damping = damping

    def _posteriors(self, ds):
        out = []
        for s in ds.samples:
            pot = build_potentials(s.H, s.y, s.sigma2, ds.alphabet)
            out.append(bp_detect(pot, build_graph(s.H, s.y, s.sigma2), self.iters, self.damping).posteriors)
        return np.stack(out)


class EGNNDetector(_SymbolDetector):
    """Trainable GNN detector (``variant='egnn'`` or ``'naive'``).

    ``fit`` trains with Adam and keeps the parameters with the best
    validation SER. Without ``X_val`` the last ``validation_fraction`` of
    the training samples is held out.
    """

    def __init__(
        self,
        variant="egnn",
        ed=0,
        steps=6,
        node_dim=32,
        gru_hidden=128,
        readout_hidden=64,
        gru_self_input=True,
        epochs=100,
        batch_size=64,
        lr=3e-4,
        validation_fraction=0.1,
        scheme="qpsk",
        random_state=0,
    ):
        self.variant = variant
        self.ed = ed
        self.steps = steps
        self.node_dim = node_dim
        self.gru_hidden = gru_hidden
        self.readout_hidden = readout_hidden
        self.gru_self_input = gru_self_input
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.validation_fraction = validation_fraction
        self.scheme = scheme
        self.random_state = random_state

    def _train_config(self):
        if self.variant not in ("egnn", "naive"):
            raise ValueError(f"variant must be 'egnn' or 'naive', got {self.variant!r}")
        check_even_drop(self.ed)
        seed = 0 if self.random_state is None else self.random_state
        if not isinstance(seed, (int, np.integer)):
            raise TypeError("random_state must be an integer seed")
        return TrainConfig(
            variant=self.variant,
            ed_count=int(self.ed),
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            steps=self.steps,
            node_dim=self.node_dim,
            gru_hidden=self.gru_hidden,
            readout_hidden=self.readout_hidden,
            gru_self_input=bool(self.gru_self_input),
            seed=int(seed),
        )

    def fit(self, X, y=None, X_val=None, y_val=None):
        config = self._train_config()
        ds = self._prepare(X, y, require_labels=not hasattr(X, "labels"))
        check_even_drop(config.ed_count, ds.labels.shape[1])
        if X_val is None:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must lie in (0, 1) when X_val is not given")
            n_val = max(1, int(round(self.validation_fraction * len(ds))))
            if n_val >= len(ds):
                raise ValueError("not enough samples to hold out a validation set")
            ds, val = ds[: len(ds) - n_val], ds[len(ds) - n_val :]
        else:
            val = self._prepare(X_val, y_val, require_labels=not hasattr(X_val, "labels"))
        self.params_, self.report_ = train(ds, val, config)
        self.classes_ = np.arange(ds.alphabet.K)
        return self

    def predict_proba(self, X, batch_size=256):
        check_is_fitted(self)
        ds = self._prepare(X)
        # the message-passing weights are shared across nodes, so any graph size works
        K = self.params_.arch.K
        if ds.alphabet.K != K:
            raise ValueError(f"model was trained for {K} symbols per dimension, input uses {ds.alphabet.K}")
        out = np.empty(ds.labels.shape + (K,))
        for lo in range(0, len(ds), batch_size):
            idx = np.arange(lo, min(len(ds), lo + batch_size))
            graph = batch_graph(ds, idx, self.params_.arch.variant, int(self.ed))
            out[idx] = softmax(gnn_logits(self.params_, graph))
        return out

    def save(self, path):
        check_is_fitted(self)
        save_checkpoint(self.params_.to_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, path, ed=0, scheme=None):
        """Estimator with parameters restored from a checkpoint file (ready to predict)."""
        params = EgnnParams.from_checkpoint(load_checkpoint(path))
        arch = params.arch
        est = cls(
            variant=arch.variant,
            ed=ed,
            steps=arch.steps,
            node_dim=arch.node_dim,
            gru_hidden=arch.gru_hidden,
            readout_hidden=arch.readout_hidden,
            gru_self_input=arch.gru_self_input,
            scheme=scheme or ("qpsk" if arch.K == 2 else "qam16"),
        )
        est.params_ = params
        est.classes_ = np.arange(arch.K)
        return est


__all__ = ["BPDetector", "EGNNDetector", "MAPDetector", "MMSEDetector", "check_samples"]
