"""Tape-based reverse-mode differentiation for sparse networks.

Values are numpy arrays wrapped in :class:`Var`.  While a :class:`Tape` is
active (``with Tape() as tape:``) every op appends a closure that maps the
output gradient to input gradients; :meth:`Tape.backward` replays them in
reverse.  Outside a tape the ops are plain numpy and record nothing, which
is what the finite-difference checks and inference use.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import EmptyInput, PatternMismatch
from .sparse_tensor import SparseTensor

_ACTIVE: list = []


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}{self.value.shape}"


class Tape:
    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out: Var, backward):
        self.records.append((out, backward))

    def backward(self, loss: Var, seed=None):
        loss.grad = np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=float)
        for out, fn in reversed(self.records):
            if out.grad is not None:
                fn(out.grad)


@contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = _ACTIVE[:]
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE[:] = saved


def _tape():
    return _ACTIVE[-1] if _ACTIVE else None


def _needs(*vs) -> bool:
    return any(v is not None and v.requires_grad for v in vs)


def _result(value, inputs, backward) -> Var:
    tape = _tape()
    req = tape is not None and _needs(*inputs)
    out = Var(value, requires_grad=req)
    if req:
        tape.record(out, backward)
    return out


def _acc(v: Var | None, g):
    if v is None or not v.requires_grad:
        return
    if v.grad is None:
        v.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        v.grad = v.grad + g


def param(value, name=None) -> Var:
    return Var(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)


# -- ops --------------------------------------------------------------------

def conv(rb: L.Rulebook, kernel: Var, bias: Var | None, x: Var) -> Var:
    value = L.conv_features(rb, kernel.value, None if bias is None else bias.value, x.value)

    def back(g):
        gi, gk, gb = L.conv_backward(rb, kernel.value, x.value, g)
        _acc(x, gi)
        _acc(kernel, gk)
        _acc(bias, gb)

    return _result(value, (x, kernel, bias), back)


def batchnorm(state: L.BatchNormState, scale: Var, shift: Var, x: Var,
              mode: str = "train", update: bool = True) -> Var:
    state.scale, state.shift = scale.value, shift.value
    value, cache = L.batchnorm_features(state, x.value, mode, update)

    def back(g):
        _acc(shift, g.sum(axis=0))
        if cache is None:
            inv = 1.0 / np.sqrt(state.running_var + state.eps)
            xhat = (x.value - state.running_mean) * inv
            _acc(scale, (g * xhat).sum(axis=0))
            _acc(x, g * scale.value * inv)
            return
        xhat, inv = cache
        _acc(scale, (g * xhat).sum(axis=0))
        gx = g * scale.value
        n = g.shape[0]
        _acc(x, inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0)))

    return _result(value, (x, scale, shift), back)


def relu(x: Var) -> Var:
    mask = x.value > 0
    return _result(np.where(mask, x.value, 0.0), (x,), lambda g: _acc(x, g * mask))


def gather(x: Var, rows: np.ndarray) -> Var:
    """Select feature rows (Sparsify pass-through)."""
    rows = np.asarray(rows, dtype=np.int64)

    def back(g):
        gi = np.zeros_like(x.value)
        gi[rows] += g
        _acc(x, gi)

    return _result(x.value[rows], (x,), back)


def add(a: Var, b: Var) -> Var:
    def back(g):
        _acc(a, g)
        _acc(b, g)
    return _result(a.value + b.value, (a, b), back)


def concat(vs: list) -> Var:
    """Concatenate along the channel axis."""
    widths = np.cumsum([0] + [v.value.shape[1] for v in vs])

    def back(g):
        for v, lo, hi in zip(vs, widths[:-1], widths[1:]):
            _acc(v, g[:, lo:hi])

    return _result(np.concatenate([v.value for v in vs], axis=1), tuple(vs), back)


def linear(x: Var, w: Var, b: Var | None = None, rowwise: bool = False) -> Var:
    value = L.rowwise_matmul(x.value, w.value) if rowwise else x.value @ w.value
    if b is not None:
        value = value + b.value

    def back(g):
        _acc(x, g @ w.value.T)
        _acc(w, x.value.T @ g)
        _acc(b, g.sum(axis=0))

    return _result(value, (x, w, b), back)


def weighted_sum(terms: list, weights) -> Var:
    value = np.array(sum(w * t.value for w, t in zip(weights, terms)), dtype=np.float64)

    def back(g):
        for w, t in zip(weights, terms):
            _acc(t, g * w)

    return _result(value, tuple(terms), back)


def mse(out: Var, target: np.ndarray) -> Var:
    n = out.value.shape[0]
    if n == 0:
        raise EmptyInput("MSE over an empty active set")
    diff = out.value - target
    value = np.array((diff * diff).sum() / n)
    return _result(value, (out,), lambda g: _acc(out, g * 2.0 * diff / n))


def hinge_sq(x: Var, rows_P: np.ndarray, rows_N: np.ndarray) -> Var:
    """Squared hinge on the first channel: kept sites pushed above +1, dropped below -1."""
    f = x.value[:, 0]
    mp = np.maximum(1.0 - f[rows_P], 0.0)
    mn = np.maximum(1.0 + f[rows_N], 0.0)
    value = np.array((mp * mp).sum() + (mn * mn).sum())

    def back(g):
        gi = np.zeros_like(x.value)
        np.add.at(gi[:, 0], rows_P, -2.0 * mp * g)
        np.add.at(gi[:, 0], rows_N, 2.0 * mn * g)
        _acc(x, gi)

    return _result(value, (x,), back)


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean softmax cross-entropy over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    value = np.array(-logp[np.arange(n), labels].sum() / n)

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _acc(logits, g * p / n)

    return _result(value, (logits,), back)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- sparse activations -----------------------------------------------------

@dataclass
class SparseVar:
    """Active-site geometry paired with a differentiable feature matrix."""

    tensor: SparseTensor
    var: Var

    @classmethod
    def of(cls, t: SparseTensor) -> "SparseVar":
        return cls(t, Var(np.asarray(t.features, dtype=np.float64)))

    @property
    def coords(self):
        return self.tensor.coords

    def with_var(self, var: Var) -> "SparseVar":
        return SparseVar(self.tensor.with_features(var.value), var)

    def detach(self) -> SparseTensor:
        return self.tensor.with_features(self.var.value)


# -- losses -------------------------------------------------------------------

@dataclass
class LossReport:
    mse: float
    sparsifier_losses: list
    total: float
    term_weights: list = field(default_factory=list)

    def log_fields(self) -> str:
        parts = [f"loss={self.total:.9g}", f"mse={self.mse:.9g}"]
        parts += [f"sp{i}={v:.9g}" for i, (_, v) in enumerate(self.sparsifier_losses)]
        return " ".join(parts)


def mse_loss(input: SparseTensor, output: SparseTensor) -> float:
    if input.n_active == 0:
        raise EmptyInput("MSE over an empty active set")
    if not input.same_sites(output):
        raise PatternMismatch("output active set differs from input active set")
    a = np.asarray(input.features, dtype=np.float64)
    b = np.asarray(output.features, dtype=np.float64)
    if a.shape != b.shape:
        raise PatternMismatch(f"channel mismatch {a.shape} vs {b.shape}")
    diff = a - b
    return float((diff * diff).sum() / input.n_active)


def sparsifier_loss(rec: L.SparsifierRecord) -> float:
    p = np.maximum(1.0 - np.asarray(rec.f_values_P, dtype=np.float64), 0.0)
    n = np.maximum(1.0 + np.asarray(rec.f_values_N, dtype=np.float64), 0.0)
    return float((p * p).sum() + (n * n).sum())


def hierarchical_loss(input: SparseTensor, output: SparseTensor, records: list,
                      weights=None, monochrome: bool = False) -> LossReport:
    """Weighted MSE plus one squared-hinge term per Sparsify layer.

    ``weights[0]`` scales the MSE term and ``weights[i + 1]`` the i-th
    record; missing weights default to 1.
    """
    weights = list(weights) if weights is not None else []
    weights += [1.0] * (len(records) + 1 - len(weights))
    m = 0.0 if monochrome else mse_loss(input, output)
    sp = [(r.level, sparsifier_loss(r)) for r in records]
    total = (0.0 if monochrome else weights[0] * m) + sum(w * v for w, (_, v) in zip(weights[1:], sp))
    return LossReport(m, sp, float(total), weights[:len(records) + 1])


# -- optimizers -------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9


class Optimizer:
    """Adam or SGD with momentum; updates parameter arrays in place."""

    def __init__(self, params: dict, config: OptimizerConfig | None = None):
        self.params = params
        self.config = config or OptimizerConfig()
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()} if self.config.kind == "adam" else {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        c = self.config
        self.t += 1
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if c.kind == "adam":
                self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
                self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
                mhat = self.m[k] / (1 - c.beta1 ** self.t)
                vhat = self.v[k] / (1 - c.beta2 ** self.t)
                p.value -= c.lr * mhat / (np.sqrt(vhat) + c.eps)
            elif c.kind == "sgd":
                self.m[k] = c.momentum * self.m[k] + g
                p.value -= c.lr * self.m[k]
            else:
                raise ValueError(f"unknown optimizer {c.kind!r}")

    def state_tensors(self) -> dict:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict, t: int):
        self.t = t
        for k in self.m:
            if f"opt.m.{k}" in tensors:
                self.m[k] = tensors[f"opt.m.{k}"].astype(np.float64)
        for k in self.v:
            if f"opt.v.{k}" in tensors:
                self.v[k] = tensors[f"opt.v.{k}"].astype(np.float64)


def optimizer_step(params: dict, grads: dict, config: OptimizerConfig | None = None,
                   state: Optimizer | None = None) -> dict:
    """Functional wrapper: apply one step and return the parameter arrays."""
    opt = state or Optimizer(params, config)
    for k, p in params.items():
        p.grad = grads.get(k)
    opt.step()
    return {k: p.value for k, p in params.items()}


def numerical_grad(loss_fn, p: Var, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``p`` (entries in ``index`` or all)."""
    flat = p.value.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = float(loss_fn())
        flat[i] = old - h
        down = float(loss_fn())
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out.reshape(p.value.shape)
