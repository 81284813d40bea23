"""Small float64 neural toolkit with hand-written adjoints.

Dense layers, a GRU cell, softmax cross-entropy, a flat parameter vector
with named views, Adam, Glorot initialization, a central-difference
gradient oracle and the binary checkpoint format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mimo_model import FormatError

LOG_CLAMP = 1e-30


def _relu_(x):
    return np.maximum(x, 0.0, out=x)


def _sigmoid_(x):
    # overflow-free form: 0.5 * (1 + tanh(x / 2))
    x *= 0.5
    np.tanh(x, out=x)
    x *= 0.5
    x += 0.5
    return x


# activation -> (in-place forward, backward mapping (dout, out) -> dpre)
ACTIVATIONS = {
    "relu": (_relu_, lambda dout, out: np.where(out > 0, dout, 0.0)),
    "tanh": (lambda x: np.tanh(x, out=x), lambda dout, out: dout * (1.0 - out * out)),
    "sigmoid": (_sigmoid_, lambda dout, out: dout * out * (1.0 - out)),
    "identity": (lambda x: x, lambda dout, out: dout),
}


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent layer shapes W {self.W.shape}, b {self.b.shape}")

    def forward(self, x):
        if x.shape[-1] != self.W.shape[1]:
            raise ValueError(f"input width {x.shape[-1]} != layer fan-in {self.W.shape[1]}")
        pre = x @ self.W.T
        pre += self.b
        out = ACTIVATIONS[self.activation][0](pre)
        return out, (x, out)

    def backward(self, dout, cache, dW, db):
        """Accumulate parameter gradients into ``dW``/``db``; return d input."""
        x, out = cache
        dpre = ACTIVATIONS[self.activation][1](dout, out)
        dW += dpre.T @ x
        db += dpre.sum(axis=0)
        return dpre @ self.W


def mlp_forward(layers, x):
    x = np.asarray(x, dtype=np.float64)
    for layer in layers:
        x, _ = layer.forward(x)
    return x


@dataclass
class GruCell:
    """Reset-before-candidate GRU acting on rows of ``[input, hidden]``."""

    Wz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    br: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray

    @property
    def hidden_size(self):
        return self.Wz.shape[0]

    @property
    def input_size(self):
        return self.Wz.shape[1] - self.Wz.shape[0]

    def step(self, x, h):
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ValueError(
                f"GRU expects input {self.input_size} / hidden {self.hidden_size}, "
                f"got {x.shape[-1]} / {h.shape[-1]}"
            )
        D = self.hidden_size
        a = np.concatenate([x, h], axis=-1)
        gates = a @ np.vstack([self.Wz, self.Wr]).T
        gates += np.concatenate([self.bz, self.br])
        _sigmoid_(gates)
        z, r = gates[..., :D], gates[..., D:]
        ac = np.concatenate([x, r * h], axis=-1)
        c = ac @ self.Wc.T
        c += self.bc
        np.tanh(c, out=c)
        h_new = c - h
        h_new *= z
        h_new += h
        return h_new, (a, ac, h, gates, c)

    def step_backward(self, dh_new, cache, grads):
        """Backprop one step. ``grads`` maps Wz/bz/Wr/br/Wc/bc to accumulators.

        Returns ``(dx, dh)``.
        """
        a, ac, h, gates, c = cache
        nin, D = self.input_size, self.hidden_size
        z, r = gates[..., :D], gates[..., D:]
        dpc = dh_new * z
        dpc *= 1.0 - c * c
        grads["Wc"] += dpc.T @ ac
        grads["bc"] += dpc.sum(axis=0)
        dac = dpc @ self.Wc
        drh = dac[:, nin:]
        # d pre-activation of [z, r] gates
        dgates = np.empty_like(gates)
        np.multiply(dh_new, c - h, out=dgates[:, :D])
        np.multiply(drh, h, out=dgates[:, D:])
        dgates *= gates * (1.0 - gates)
        dWzr = dgates.T @ a
        grads["Wz"] += dWzr[:D]
        grads["Wr"] += dWzr[D:]
        dbzr = dgates.sum(axis=0)
        grads["bz"] += dbzr[:D]
        grads["br"] += dbzr[D:]
        da = dgates @ np.vstack([self.Wz, self.Wr])
        dx = dac[:, :nin] + da[:, :nin]
        dh = dh_new * (1.0 - z)
        dh += drh * r
        dh += da[:, nin:]
        return dx, dh


def gru_forward(cell, x, h):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    return cell.step(x, h)[0]


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(p_true, p_pred):
    """Mean over rows of ``-sum p_true * log p_pred`` with the log argument clamped."""
    p_true = np.asarray(p_true, dtype=np.float64)
    p_pred = np.asarray(p_pred, dtype=np.float64)
    logp = np.log(np.maximum(p_pred, LOG_CLAMP))
    per_row = -(p_true * logp).sum(axis=-1)
    return float(per_row.mean())


def softmax_ce_from_labels(logits, labels):
    """Loss and d loss / d logits for integer labels, mean reduction over rows."""
    p = softmax(logits)
    rows = np.arange(len(labels))
    picked = p[rows, labels]
    loss = float(-np.log(np.maximum(picked, LOG_CLAMP)).mean())
    dlogits = p.copy()
    dlogits[rows, labels] -= 1.0
    # clamp has zero derivative where active
    dlogits[picked < LOG_CLAMP] = 0.0
    return loss, p, dlogits / len(labels)


class ParamVector:
    """Flat float64 vector with named, shaped views into it."""

    def __init__(self, layout, flat=None):
        self.layout = {}
        offset = 0
        for name, shape in layout:
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape))
            self.layout[name] = (offset, shape)
            offset += size
        if flat is None:
            flat = np.zeros(offset)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (offset,):
            raise ValueError(f"flat vector of length {flat.shape} does not match layout size {offset}")
        self.flat = flat

    @property
    def size(self):
        return self.flat.size

    @property
    def names(self):
        return list(self.layout)

    def shapes(self):
        return [(name, shape) for name, (_, shape) in self.layout.items()]

    def __getitem__(self, name):
        offset, shape = self.layout[name]
        return self.flat[offset : offset + int(np.prod(shape))].reshape(shape)

    def __contains__(self, name):
        return name in self.layout

    def zeros_like(self):
        return ParamVector(self.shapes())

    def copy(self):
        return ParamVector(self.shapes(), self.flat.copy())

    def unpack(self):
        return {name: self[name].copy() for name in self.layout}

    @classmethod
    def pack(cls, arrays):
        layout = [(name, np.shape(a)) for name, a in arrays.items()]
        flat = np.concatenate([np.ravel(a) for a in arrays.values()]) if arrays else np.zeros(0)
        return cls(layout, flat.astype(np.float64))


def init_params(layout, seed):
    """Glorot-uniform for every 2-D entry, zeros for the rest (biases)."""
    params = ParamVector(layout)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    for name, shape in params.shapes():
        if len(shape) == 2:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls(np.zeros(params.size), np.zeros(params.size), **kwargs)


def adam_step(state, params, grads):
    """One bias-corrected Adam update, in place on ``params.flat``."""
    flat = params.flat if isinstance(params, ParamVector) else params
    g = grads.flat if isinstance(grads, ParamVector) else np.asarray(grads)
    if g.shape != flat.shape or state.m.shape != flat.shape:
        raise ValueError(f"shape mismatch: params {flat.shape}, grads {g.shape}, state {state.m.shape}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    flat -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def fd_gradient(loss_fn, params, h=1e-5, coords=None):
    """Central-difference gradient of ``loss_fn(params)`` (a ParamVector).

    ``coords`` restricts the probe to a subset of flat indices; others are NaN.
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    grad = params.zeros_like()
    if coords is None:
        coords = range(params.size)
    else:
        grad.flat[:] = np.nan
    work = params.copy()
    for k in coords:
        orig = work.flat[k]
        work.flat[k] = orig + h
        up = loss_fn(work)
        work.flat[k] = orig - h
        down = loss_fn(work)
        work.flat[k] = orig
        grad.flat[k] = (up - down) / (2.0 * h)
    return grad


# -- checkpoint format -------------------------------------------------------

CHECKPOINT_MAGIC = b"EGNN-CK\0"
CHECKPOINT_VERSION = 1
_CK_HEAD = struct.Struct("<8sII")
_CK_ENTRY = struct.Struct("<QQ")


def checkpoint_to_bytes(entries):
    """``entries`` maps name -> array; stored flat, shapes are the caller's business."""
    head = [_CK_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(entries))]
    payload = []
    offset = 0
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:40]}...")
        flat = np.ascontiguousarray(np.ravel(arr), dtype="<f8")
        head.append(struct.pack("<H", len(raw)) + raw + _CK_ENTRY.pack(offset, flat.size))
        payload.append(flat.tobytes())
        offset += flat.size
    return b"".join(head + payload)


def checkpoint_from_bytes(buf):
    if len(buf) < _CK_HEAD.size:
        raise FormatError("truncated checkpoint header", len(buf))
    magic, version, count = _CK_HEAD.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    pos = _CK_HEAD.size
    registry = []
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("truncated registry", pos)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        if pos + 2 + nlen + _CK_ENTRY.size > len(buf):
            raise FormatError("truncated registry entry", pos)
        try:
            name = buf[pos + 2 : pos + 2 + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("registry name is not UTF-8", pos + 2) from None
        off, length = _CK_ENTRY.unpack_from(buf, pos + 2 + nlen)
        registry.append((name, off, length, pos))
        pos += 2 + nlen + _CK_ENTRY.size
    total = sum(length for _, _, length, _ in registry)
    if len(buf) - pos < 8 * total:
        raise FormatError(f"truncated payload: {(len(buf) - pos) // 8} of {total} values", len(buf))
    if len(buf) - pos > 8 * total:
        raise FormatError("trailing bytes after payload", pos + 8 * total)
    payload = np.frombuffer(buf, dtype="<f8", count=total, offset=pos).astype(np.float64)
    out = {}
    for name, off, length, at in registry:
        if off + length > total:
            raise FormatError(f"slice {name!r} exceeds payload", at)
        out[name] = payload[off : off + length].copy()
    return out


def save_checkpoint(entries, path):
    Path(path).write_bytes(checkpoint_to_bytes(entries))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
