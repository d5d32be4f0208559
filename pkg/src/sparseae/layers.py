"""Rulebooks and forward semantics of the sparse layers.

Every convolution-like layer is executed through a :class:`Rulebook`: for
each kernel offset, a list of ``(input_row, output_row)`` pairs.  Within a
single offset each input row and each output row appears at most once,
so gather / matmul / scatter-add per offset is exact and race free.

Kernel layout is ``(f**d, m, n)`` with offsets in lexicographic order
over ``[0, f)**d``.  All convolutions are correlations:

* SC   ``out[y] = b + sum_o in[s*y + o] @ W[o]``        (no padding)
* SSC  ``out[y] = b + sum_o in[y + o - c] @ W[o]``      (c = (f-1)/2)
* TC   ``out[s*x + o] += in[x] @ W[o]``
* DC   same as TC, restricted to the matching SC's input sites
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadGeometry, EvenFilter, MissingPattern, PatternNotSubset,
                     ShapeMismatch)
from .sparse_tensor import SparseTensor, keys_to_coords, linear_keys


def kernel_offsets(f: int, d: int) -> np.ndarray:
    """All offsets of ``[0, f)**d`` in lexicographic order, shape ``(f**d, d)``."""
    return np.array(list(itertools.product(range(f), repeat=d)), dtype=np.int64).reshape(-1, d)


@dataclass(frozen=True)
class Rulebook:
    kind: str
    f: int
    s: int
    offsets: np.ndarray
    rules: list                       # per offset: (in_rows, out_rows) int arrays
    in_size: tuple
    out_coords: np.ndarray
    out_size: tuple
    batch_size: int
    n_in: int
    _out_keys: np.ndarray = field(default=None, repr=False, compare=False)
    _flat: tuple = field(default=None, repr=False, compare=False)

    @property
    def n_out(self) -> int:
        return len(self.out_coords)

    @property
    def n_rules(self) -> int:
        return sum(len(i) for i, _ in self.rules)

    def output(self, features) -> SparseTensor:
        return SparseTensor(self.out_coords, features, self.out_size, self.batch_size, self._out_keys)

    def pairs(self) -> set:
        """All ``(offset_index, in_row, out_row)`` triples; handy in tests."""
        return {(k, int(i), int(o)) for k, (ins, outs) in enumerate(self.rules)
                for i, o in zip(ins, outs)}


def _sorted_rules(in_rows, out_rows):
    order = np.lexsort((in_rows, out_rows))
    return in_rows[order], out_rows[order]


def sc_output_size(size, f, s):
    out = tuple((n - f) // s + 1 for n in size)
    if any(n < f for n in size) or any(o <= 0 for o in out):
        raise BadGeometry(f"SC(f={f}, s={s}) on size {tuple(size)} has no output")
    return out


def tc_output_size(size, f, s):
    # geometric inverse of SC(f, s): s*(N - 1) + f
    return tuple(s * (n - 1) + f for n in size)


def build_sc_rulebook(x: SparseTensor, f: int, s: int) -> Rulebook:
    """Greedy strided convolution: an output is active if any input in its window is."""
    if not (f >= s >= 1):
        raise BadGeometry(f"SC requires f >= s >= 1, got f={f}, s={s}")
    d = x.d
    out_size = sc_output_size(x.spatial_size, f, s)
    offsets = kernel_offsets(f, d)
    pos = x.coords[:, 1:]
    cand_rows, cand_y = [], []
    osz = np.asarray(out_size)
    for k, o in enumerate(offsets):
        t = pos - o
        ok = np.all((t >= 0) & (t % s == 0), axis=1)
        y = t // s
        ok &= np.all(y < osz, axis=1)
        rows = np.nonzero(ok)[0]
        cand_rows.append(rows)
        cand_y.append(np.concatenate([x.coords[rows, :1], y[rows]], axis=1))
    all_y = np.concatenate(cand_y) if cand_y else np.zeros((0, d + 1), np.int64)
    ykeys = linear_keys(all_y, out_size)
    out_keys = np.unique(ykeys)
    out_coords = keys_to_coords(out_keys, out_size)
    out_rows_all = np.searchsorted(out_keys, ykeys)
    rules = []
    start = 0
    for k in range(len(offsets)):
        n = len(cand_rows[k])
        rules.append(_sorted_rules(cand_rows[k], out_rows_all[start:start + n]))
        start += n
    return Rulebook("sc", f, s, offsets, rules, x.spatial_size, out_coords, out_size,
                    x.batch_size, x.n_active, out_keys)


def build_ssc_rulebook(x: SparseTensor, f: int) -> Rulebook:
    """Submanifold convolution: outputs only at the input's own active sites."""
    if f % 2 == 0 or f < 1:
        raise EvenFilter(f"SSC needs an odd filter size, got {f}")
    d = x.d
    c = (f - 1) // 2
    offsets = kernel_offsets(f, d)
    rules = []
    out_rows = np.arange(x.n_active, dtype=np.int64)
    for o in offsets:
        nb = x.coords.copy()
        nb[:, 1:] += o - c
        rows = x.lookup(nb)
        hit = rows >= 0
        rules.append(_sorted_rules(rows[hit], out_rows[hit]))
    return Rulebook("ssc", f, 1, offsets, rules, x.spatial_size, x.coords, x.spatial_size,
                    x.batch_size, x.n_active, x.keys)


def build_tc_rulebook(x: SparseTensor, f: int, s: int) -> Rulebook:
    """Greedy upsampling: each active input activates all ``f**d`` children."""
    if not (f >= s >= 1):
        raise BadGeometry(f"TC requires f >= s >= 1, got f={f}, s={s}")
    d = x.d
    out_size = tc_output_size(x.spatial_size, f, s)
    offsets = kernel_offsets(f, d)
    ys = []
    for o in offsets:
        y = x.coords.copy()
        y[:, 1:] = y[:, 1:] * s + o
        ys.append(y)
    all_y = np.concatenate(ys) if ys else np.zeros((0, d + 1), np.int64)
    ykeys = linear_keys(all_y, out_size)
    out_keys = np.unique(ykeys)
    out_coords = keys_to_coords(out_keys, out_size)
    out_rows_all = np.searchsorted(out_keys, ykeys)
    in_rows = np.arange(x.n_active, dtype=np.int64)
    rules = []
    for k in range(len(offsets)):
        orow = out_rows_all[k * x.n_active:(k + 1) * x.n_active]
        rules.append(_sorted_rules(in_rows.copy(), orow))
    return Rulebook("tc", f, s, offsets, rules, x.spatial_size, out_coords, out_size,
                    x.batch_size, x.n_active, out_keys)


def build_dc_rulebook(matching_sc: Rulebook | None) -> Rulebook:
    """Transpose of a stored SC rulebook; restores the SC layer's input sites."""
    if matching_sc is None or matching_sc.kind != "sc":
        raise MissingPattern("DC needs the rulebook of its matching SC layer")
    sc = matching_sc
    rules = [_sorted_rules(outs.copy(), ins.copy()) for ins, outs in sc.rules]
    # the SC input coords are not stored on the rulebook; rebuild them from the rules
    return Rulebook("dc", sc.f, sc.s, sc.offsets, rules, sc.out_size, sc_input_coords(sc),
                    sc.in_size, sc.batch_size, sc.n_out)


def sc_input_coords(sc: Rulebook) -> np.ndarray:
    """Coordinates of the SC input rows, recovered from ``y*s + o``."""
    d = len(sc.in_size)
    coords = np.zeros((sc.n_in, d + 1), dtype=np.int64)
    for o, (ins, outs) in zip(sc.offsets, sc.rules):
        y = sc.out_coords[outs]
        coords[ins, 0] = y[:, 0]
        coords[ins, 1:] = y[:, 1:] * sc.s + o
    return coords


def check_weights(rb: Rulebook, kernel: np.ndarray, bias, m: int):
    if kernel.ndim != 3 or kernel.shape[0] != len(rb.offsets) or kernel.shape[1] != m:
        raise ShapeMismatch(f"kernel {kernel.shape} does not match {len(rb.offsets)} offsets x {m} inputs")
    if bias is not None and np.shape(bias) != (kernel.shape[2],):
        raise ShapeMismatch(f"bias {np.shape(bias)} does not match {kernel.shape[2]} outputs")


def flat_rules(rb: Rulebook):
    """Concatenated ``(in_rows, out_rows, offset_index)`` over all offsets."""
    cached = rb._flat
    if cached is None:
        ins = [i for i, _ in rb.rules]
        outs = [o for _, o in rb.rules]
        offs = [np.full(len(i), k, dtype=np.int64) for k, i in enumerate(ins)]
        cached = tuple(np.concatenate(a) if a else np.zeros(0, np.int64) for a in (ins, outs, offs))
        object.__setattr__(rb, "_flat", cached)
    return cached


def _columns(rb: Rulebook, feats: np.ndarray) -> np.ndarray:
    ins, outs, offs = flat_rules(rb)
    cols = np.zeros((rb.n_out, len(rb.offsets), feats.shape[1]), dtype=feats.dtype)
    cols[outs, offs] = feats[ins]
    return cols.reshape(rb.n_out, len(rb.offsets) * feats.shape[1])


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` where each output row depends only on its own input row.

    BLAS picks blocking (and so rounding) from the total row count, which
    would let unrelated rows perturb a result in the last bit.
    """
    return (a[:, :, None] * b[None, :, :]).sum(axis=1)


def conv_features(rb: Rulebook, kernel: np.ndarray, bias, feats: np.ndarray) -> np.ndarray:
    """Feature rows of a rulebook-driven convolution (no geometry).

    Each output row gathers its ``f**d`` input rows (zeros where no rule
    exists) into one column vector, followed by a single matmul.  DC layers
    use the row-independent product so per-site outputs are bit-exact
    functions of their own receptive field.
    """
    if feats.shape[0] != rb.n_in:
        raise ShapeMismatch(f"{feats.shape[0]} input rows, rulebook expects {rb.n_in}")
    check_weights(rb, kernel, bias, feats.shape[1])
    mul = rowwise_matmul if rb.kind == "dc" else np.matmul
    out = mul(_columns(rb, feats), kernel.reshape(-1, kernel.shape[2]))
    if bias is not None:
        out += bias
    return out


def conv_backward(rb: Rulebook, kernel: np.ndarray, feats: np.ndarray, grad_out: np.ndarray):
    """Gradients of :func:`conv_features` w.r.t. input rows, kernel and bias."""
    ins, outs, offs = flat_rules(rb)
    grad_k = (_columns(rb, feats).T @ grad_out).reshape(kernel.shape)
    gcols = (grad_out @ kernel.reshape(-1, kernel.shape[2]).T).reshape(rb.n_out, len(rb.offsets), feats.shape[1])
    grad_in = np.zeros(feats.shape, dtype=grad_out.dtype)
    np.add.at(grad_in, ins, gcols[outs, offs])
    return grad_in, grad_k, grad_out.sum(axis=0)


def conv_forward(rb: Rulebook, kernel: np.ndarray, bias, x: SparseTensor) -> SparseTensor:
    return rb.output(conv_features(rb, kernel, bias, np.asarray(x.features)))


def init_conv(rng: np.random.Generator, f: int, d: int, m: int, n: int):
    """Glorot-uniform kernel ``(f**d, m, n)`` and zero bias."""
    vol = f ** d
    limit = np.sqrt(6.0 / (m * vol + n * vol))
    return rng.uniform(-limit, limit, size=(vol, m, n)), np.zeros(n)


# -- Sparsify ---------------------------------------------------------------

@dataclass(frozen=True)
class SparsifierRecord:
    """First-channel values split into kept (P) and dropped (N) sites."""

    level: int
    f_values_P: np.ndarray
    f_values_N: np.ndarray
    rows_P: np.ndarray = field(default=None, repr=False)
    rows_N: np.ndarray = field(default=None, repr=False)


def pattern_rows(x: SparseTensor, pattern: np.ndarray) -> np.ndarray:
    """Rows of ``x`` for every site of ``pattern``; raises if one is missing."""
    rows = x.lookup(pattern)
    if np.any(rows < 0):
        missing = pattern[np.argmax(rows < 0)].tolist()
        raise PatternNotSubset(f"encoder site {missing} is not active in the decoder")
    return rows


def sparsify_train(x: SparseTensor, encoder_pattern: np.ndarray, level: int = 0):
    """Keep exactly the encoder's sites (a subset of the input's active set)."""
    pattern = np.asarray(encoder_pattern, dtype=np.int64).reshape(-1, x.d + 1)
    keep = pattern_rows(x, pattern)
    keep_sorted = np.sort(keep)
    mask = np.ones(x.n_active, dtype=bool)
    mask[keep_sorted] = False
    drop = np.nonzero(mask)[0]
    feats = np.asarray(x.features)
    first = feats[:, 0] if x.n_active else np.zeros(0)
    rec = SparsifierRecord(level, first[keep_sorted], first[drop], keep_sorted, drop)
    out = SparseTensor(x.coords[keep_sorted], feats[keep_sorted], x.spatial_size, x.batch_size)
    return out, rec


def sparsify_test(x: SparseTensor) -> SparseTensor:
    feats = np.asarray(x.features)
    keep = np.nonzero(feats[:, 0] > 0)[0] if x.n_active else np.zeros(0, np.int64)
    return SparseTensor(x.coords[keep], feats[keep], x.spatial_size, x.batch_size)


# -- BatchNorm / ReLU -------------------------------------------------------

@dataclass
class BatchNormState:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, n: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n), momentum, eps)


def batchnorm_features(state: BatchNormState, feats: np.ndarray, mode: str = "train",
                       update: bool = True):
    """Normalize over active rows only.

    Returns ``(out, cache)``; ``cache`` is ``(xhat, inv_std)`` in train mode
    and ``None`` in eval mode.
    """
    if feats.shape[1] != len(state.scale):
        raise ShapeMismatch(f"{feats.shape[1]} channels, batchnorm has {len(state.scale)}")
    if mode == "eval" or feats.shape[0] == 0:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        return (feats - state.running_mean) * inv * state.scale + state.shift, None
    n = feats.shape[0]
    mean = feats.sum(axis=0) / n
    centered = feats - mean
    var = (centered * centered).sum(axis=0) / n
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv
    if update:
        unbiased = var * n / (n - 1) if n > 1 else var
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mean
        state.running_var = m * state.running_var + (1 - m) * unbiased
    return xhat * state.scale + state.shift, (xhat, inv)


def batchnorm_forward(state: BatchNormState, x: SparseTensor, mode: str = "train") -> SparseTensor:
    out, _ = batchnorm_features(state, np.asarray(x.features), mode)
    return x.with_features(out)


def relu(x: SparseTensor) -> SparseTensor:
    return x.with_features(np.maximum(np.asarray(x.features), 0.0))


def residual_block(x: SparseTensor, weights: dict, f: int = 3, mode: str = "train",
                   rulebook: Rulebook | None = None) -> SparseTensor:
    """``x + BN(SSC(ReLU(BN(SSC(x)))))`` on the unchanged active set.

    ``weights`` holds ``kernel_a, bias_a, bn_a, kernel_b, bias_b, bn_b``.
    """
    rb = rulebook or build_ssc_rulebook(x, f)
    feats = np.asarray(x.features)
    for key in ("kernel_a", "kernel_b"):
        k = weights[key]
        if k.shape[1] != feats.shape[1] or k.shape[2] != feats.shape[1]:
            raise ShapeMismatch("residual block needs equal input and output channels")
    h = conv_features(rb, weights["kernel_a"], weights.get("bias_a"), feats)
    h, _ = batchnorm_features(weights["bn_a"], h, mode)
    h = np.maximum(h, 0.0)
    h = conv_features(rb, weights["kernel_b"], weights.get("bias_b"), h)
    h, _ = batchnorm_features(weights["bn_b"], h, mode)
    return x.with_features(feats + h)
