"""Differentiable layer modules built on the rulebook primitives."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import layers as L
from .autograd import SparseVar, Var
from .errors import MissingPattern


@dataclass
class Context:
    """Per-forward-pass state shared by all layers.

    ``patterns`` and ``sc_rulebooks`` form the pattern stack written by the
    encoder; DC layers and training-mode Sparsify layers read it back.
    """

    mode: str = "train"          # batchnorm: "train" | "eval"
    sparsify: str = "train"      # "train" (copy encoder pattern) | "test" (threshold)
    update_bn: bool = True
    cache: dict | None = None
    check_superset: bool = True
    patterns: list = field(default_factory=list)
    sc_rulebooks: list = field(default_factory=list)
    records: list = field(default_factory=list)
    decoder_patterns: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def rulebook(self, kind: str, x, f: int, s: int = 1) -> L.Rulebook:
        if self.cache is None:
            return _build(kind, x, f, s)
        h = hashlib.blake2b(x.coords.tobytes(), digest_size=16).hexdigest()
        key = (kind, f, s, x.spatial_size, x.batch_size, x.coords.shape, h)
        rb = self.cache.get(key)
        if rb is None:
            rb = self.cache[key] = _build(kind, x, f, s)
        return rb


def _build(kind, x, f, s):
    if kind == "ssc":
        return L.build_ssc_rulebook(x, f)
    if kind == "sc":
        return L.build_sc_rulebook(x, f, s)
    if kind == "tc":
        return L.build_tc_rulebook(x, f, s)
    raise ValueError(kind)


class Module:
    """Minimal parameter container; children are found through attributes."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Var) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_bn_states(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, L.BatchNormState):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_bn_states(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_bn_states(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def bn_states(self) -> dict:
        return dict(self.named_bn_states())

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters().values())


class Conv(Module):
    """SC / SSC / TC / DC layer with kernel ``(f**d, m, n)`` and bias."""

    def __init__(self, kind, d, m, n, f, s=1, rng=None, level=None):
        self.kind, self.d, self.m, self.n, self.f, self.s = kind, d, m, n, f, s
        self.level = level
        k, b = L.init_conv(rng or np.random.default_rng(0), f, d, m, n)
        self.kernel = ag.param(k)
        self.bias = ag.param(b)

    def label(self):
        if self.kind == "ssc":
            return f"SSC({self.m},{self.n},{self.f})"
        return f"{self.kind.upper()}({self.m},{self.n},{self.f},{self.s})"

    def __call__(self, x: SparseVar, ctx: Context) -> SparseVar:
        t = x.tensor
        if self.kind == "dc":
            if self.level is None or self.level >= len(ctx.sc_rulebooks):
                raise MissingPattern(f"no stored SC rulebook for level {self.level}")
            rb = L.build_dc_rulebook(ctx.sc_rulebooks[self.level])
        else:
            rb = ctx.rulebook(self.kind, t, self.f, self.s)
        out = ag.conv(rb, self.kernel, self.bias, x.var)
        ctx.trace.append((self.kind.upper(), self.m, self.n, self.f, self.s,
                          t.spatial_size[0], rb.out_size[0]))
        if self.kind == "sc" and self.level is not None:
            while len(ctx.sc_rulebooks) <= self.level:
                ctx.sc_rulebooks.append(None)
            ctx.sc_rulebooks[self.level] = rb
        return SparseVar(rb.output(out.value), out)


class BatchNorm(Module):
    def __init__(self, n):
        self.state = L.BatchNormState.create(n)
        self.scale = ag.param(self.state.scale)
        self.shift = ag.param(self.state.shift)

    def __call__(self, x: SparseVar, ctx: Context) -> SparseVar:
        out = ag.batchnorm(self.state, self.scale, self.shift, x.var, ctx.mode, ctx.update_bn)
        return x.with_var(out)


def relu(x: SparseVar) -> SparseVar:
    return x.with_var(ag.relu(x.var))


class ConvBNReLU(Module):
    def __init__(self, kind, d, m, n, f, s=1, rng=None, level=None):
        self.conv = Conv(kind, d, m, n, f, s, rng, level)
        self.bn = BatchNorm(n)

    def __call__(self, x, ctx):
        return relu(self.bn(self.conv(x, ctx), ctx))


class ResidualBlock(Module):
    """``x + BN(SSC(ReLU(BN(SSC(x)))))``."""

    def __init__(self, d, n, rng=None, f=3):
        self.conv_a = Conv("ssc", d, n, n, f, 1, rng)
        self.bn_a = BatchNorm(n)
        self.conv_b = Conv("ssc", d, n, n, f, 1, rng)
        self.bn_b = BatchNorm(n)

    def __call__(self, x, ctx):
        h = relu(self.bn_a(self.conv_a(x, ctx), ctx))
        h = self.bn_b(self.conv_b(h, ctx), ctx)
        return x.with_var(ag.add(x.var, h.var))


class Block(Module):
    """One SSC-BN-ReLU, or two residual blocks."""

    def __init__(self, style, d, n, rng=None):
        if style == "residual":
            self.layers = [ResidualBlock(d, n, rng), ResidualBlock(d, n, rng)]
        else:
            self.layers = [ConvBNReLU("ssc", d, n, n, 3, 1, rng)]

    def __call__(self, x, ctx):
        for layer in self.layers:
            x = layer(x, ctx)
        return x


class Sparsify(Module):
    """Training: copy the encoder's pattern at ``level``.  Test: keep first channel > 0."""

    def __init__(self, level):
        self.level = level

    def __call__(self, x: SparseVar, ctx: Context) -> SparseVar:
        t = x.tensor
        before = t.coords
        if ctx.sparsify == "train":
            if self.level >= len(ctx.patterns):
                raise MissingPattern(f"no encoder pattern for level {self.level}")
            pattern = ctx.patterns[self.level]
            out, rec = L.sparsify_train(t.with_features(x.var.value), pattern, self.level)
            ctx.records.append((rec, x.var))
            keep = rec.rows_P
        else:
            f = x.var.value[:, 0] if t.n_active else np.zeros(0)
            keep = np.nonzero(f > 0)[0]
            out = None
        var = ag.gather(x.var, keep)
        out = out if out is not None else t.__class__(t.coords[keep], var.value, t.spatial_size, t.batch_size)
        ctx.trace.append(("Sparsify", x.var.value.shape[1], x.var.value.shape[1], None, None,
                          t.spatial_size[0], t.spatial_size[0]))
        ctx.decoder_patterns.append((self.level, before, out.coords))
        return SparseVar(out.with_features(var.value), var)


class Linear(Module):
    """Per-row affine map (per-site when applied to sparse features)."""

    def __init__(self, m, n, rng=None, rowwise=False):
        rng = rng or np.random.default_rng(0)
        limit = np.sqrt(6.0 / (m + n))
        self.weight = ag.param(rng.uniform(-limit, limit, size=(m, n)))
        self.bias = ag.param(np.zeros(n))
        self.m, self.n = m, n
        self.rowwise = rowwise

    def __call__(self, x: Var) -> Var:
        return ag.linear(x, self.weight, self.bias, self.rowwise)
