"""Network builders: encoder, decoder, NonConvNet, U-Net, heads and baselines.

Channel plan for an encoder with levels ``0..L-1`` (level ``i`` has spatial
size ``input_size / 2**i``):

* doubling growth: ``k, 2k, 4k, ...``; linear growth: ``k, 2k, 3k, ...``
* ``to_point`` mode stops at spatial size 4 and adds ``SC(c, 4c, 4, 1)``
  down to a ``1**d`` latent (``16k`` for the 16**d network)
* ``fixed_factor(F)`` mode has ``log2(F)`` downsamples; the last level is
  the latent.

An input ``SSC(n_in, k, 3)`` and an output per-site linear map ``k -> n_in``
adapt the data channels to the ``k``-channel tables.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import LossReport, SparseVar, Var
from .errors import BadGeometry, SpecInvalid
from .nn import Block, BatchNorm, Context, Conv, ConvBNReLU, Linear, Module, Sparsify, relu
from .sparse_tensor import SparseTensor


@dataclass(frozen=True)
class NetworkSpec:
    d: int = 2
    k: int = 16
    input_size: int = 16
    in_channels: int = 1
    growth: str = "doubling"      # doubling | linear
    block: str = "single"         # single | residual
    mode: str = "to_point"        # to_point | fixed_factor
    factor: int = 16
    latent_ssc: int = 0           # extra SSC blocks on a spatial latent before NonConvNet

    def __post_init__(self):
        if not 2 <= self.d <= 4:
            raise SpecInvalid(f"d must be 2, 3 or 4, got {self.d}")
        if self.k < 1 or self.in_channels < 1:
            raise SpecInvalid("k and in_channels must be positive")
        if self.growth not in ("doubling", "linear"):
            raise SpecInvalid(f"unknown growth {self.growth!r}")
        if self.block not in ("single", "residual"):
            raise SpecInvalid(f"unknown block style {self.block!r}")
        if self.mode == "to_point":
            n = self.input_size
            if n < 4 or n & (n - 1):
                raise SpecInvalid(f"to_point needs a power-of-two input size >= 4, got {n}")
        elif self.mode == "fixed_factor":
            F = self.factor
            if F < 2 or F & (F - 1):
                raise SpecInvalid(f"fixed factor must be a power of 2, got {F}")
            if self.input_size % F:
                raise SpecInvalid(f"input size {self.input_size} not divisible by {F}")
        else:
            raise SpecInvalid(f"unknown mode {self.mode!r}")

    @property
    def scales(self) -> int:
        """Number of f=s=2 downsampling stages."""
        if self.mode == "to_point":
            return int(np.log2(self.input_size // 4))
        return int(np.log2(self.factor))

    def level_channels(self) -> list:
        n = self.scales + 1
        if self.growth == "linear":
            return [self.k * (i + 1) for i in range(n)]
        return [self.k * 2 ** i for i in range(n)]

    def level_sizes(self) -> list:
        return [self.input_size // 2 ** i for i in range(self.scales + 1)]

    @property
    def latent_channels(self) -> int:
        c = self.level_channels()[-1]
        return 4 * c if self.mode == "to_point" else c

    @property
    def latent_size(self) -> int:
        return 1 if self.mode == "to_point" else self.input_size // self.factor

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls(**json.loads(text))


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class Encoder(Module):
    def __init__(self, spec: NetworkSpec, rng=0):
        rng = _rng(rng)
        self.spec = spec
        d, ch = spec.d, spec.level_channels()
        self.input = ConvBNReLU("ssc", d, spec.in_channels, ch[0], 3, 1, rng)
        self.blocks = [Block(spec.block, d, c, rng) for c in ch]
        self.down = [ConvBNReLU("sc", d, ch[i], ch[i + 1], 2, 2, rng, level=i)
                     for i in range(len(ch) - 1)]
        self.to_point = (Conv("sc", d, ch[-1], 4 * ch[-1], 4, 1, rng, level=len(ch) - 1)
                         if spec.mode == "to_point" else None)

    def __call__(self, x: SparseVar, ctx: Context) -> SparseVar:
        if x.tensor.spatial_size != (self.spec.input_size,) * self.spec.d:
            raise BadGeometry(f"encoder expects {self.spec.input_size}^{self.spec.d}, "
                              f"got {x.tensor.spatial_size}")
        ctx.patterns = []
        ctx.sc_rulebooks = []
        x = self.input(x, ctx)
        for i, block in enumerate(self.blocks):
            ctx.patterns.append(x.coords)
            x = block(x, ctx)
            if i < len(self.down):
                x = self.down[i](x, ctx)
        if self.to_point is not None:
            x = self.to_point(x, ctx)
            ctx.patterns.append(x.coords)
        return x


class DecoderStage(Module):
    """TC upsample, SSC, Sparsify, SSC at one scale."""

    def __init__(self, style, d, m, n, f, s, level, rng):
        self.up = ConvBNReLU("tc", d, m, n, f, s, rng)
        self.style = style
        if style == "residual":
            self.pre = Block("residual", d, n, rng)
            self.post = Block("residual", d, n, rng)
        else:
            self.pre = Conv("ssc", d, n, n, 3, 1, rng)
            self.post_bn = BatchNorm(n)
            self.post = ConvBNReLU("ssc", d, n, n, 3, 1, rng)
        self.sparsify = Sparsify(level)

    def __call__(self, x, ctx):
        x = self.up(x, ctx)
        x = self.pre(x, ctx)
        x = self.sparsify(x, ctx)
        if self.style != "residual":
            x = relu(self.post_bn(x, ctx))
        return self.post(x, ctx)


class Decoder(Module):
    def __init__(self, spec: NetworkSpec, rng=0):
        rng = _rng(rng)
        self.spec = spec
        d, ch = spec.d, spec.level_channels()
        stages = []
        if spec.mode == "to_point":
            stages.append(DecoderStage(spec.block, d, 4 * ch[-1], ch[-1], 4, 1, len(ch) - 1, rng))
        for i in range(len(ch) - 2, -1, -1):
            stages.append(DecoderStage(spec.block, d, ch[i + 1], ch[i], 2, 2, i, rng))
        self.stages = stages
        self.output = Linear(ch[0], spec.in_channels, rng)

    def __call__(self, z: SparseVar, ctx: Context) -> SparseVar:
        x = z
        for stage in self.stages:
            x = stage(x, ctx)
        out = self.output(x.var)
        return x.with_var(out)


class Autoencoder(Module):
    def __init__(self, spec: NetworkSpec, rng=0):
        rng = _rng(rng)
        self.spec = spec
        self.encoder = Encoder(spec, rng)
        self.decoder = Decoder(spec, rng)

    def __call__(self, x: SparseTensor, ctx: Context):
        z = self.encoder(SparseVar.of(x), ctx)
        return z, self.decoder(z, ctx)

    def loss(self, x: SparseTensor, ctx: Context, weights=None, monochrome=False):
        """Differentiable hierarchical loss; returns ``(total_var, LossReport)``."""
        ctx.records = []
        _, out = self(x, ctx)
        n_sp = len(ctx.records)
        weights = list(weights) if weights is not None else []
        weights += [1.0] * (n_sp + 1 - len(weights))
        terms, w = [], []
        mse_val = 0.0
        if not monochrome:
            m = ag.mse(out.var, np.asarray(x.features, dtype=np.float64))
            mse_val = float(m.value)
            terms.append(m)
            w.append(weights[0])
        sp = []
        for i, (rec, pre) in enumerate(ctx.records):
            h = ag.hinge_sq(pre, rec.rows_P, rec.rows_N)
            sp.append((rec.level, float(h.value)))
            terms.append(h)
            w.append(weights[i + 1])
        total = ag.weighted_sum(terms, w)
        return total, LossReport(mse_val, sp, float(total.value), weights[:n_sp + 1]), out


class NonConvNet(Module):
    """Non-overlapping deconvolutions from the latent, then per-site logits."""

    def __init__(self, spec: NetworkSpec, classes: int, rng=0):
        rng = _rng(rng)
        self.spec = spec
        d, ch = spec.d, spec.level_channels()
        self.latent = [Block(spec.block, d, spec.latent_channels, rng) for _ in range(spec.latent_ssc)]
        ups = []
        if spec.mode == "to_point":
            ups.append(Conv("dc", d, 4 * ch[-1], ch[-1], 4, 1, rng, level=len(ch) - 1))
        for i in range(len(ch) - 2, -1, -1):
            ups.append(Conv("dc", d, ch[i + 1], ch[i], 2, 2, rng, level=i))
        self.ups = ups
        self.head = Linear(ch[0], classes, rng, rowwise=True)

    def __call__(self, z: SparseVar, ctx: Context) -> SparseVar:
        x = z
        for block in self.latent:
            x = block(x, ctx)
        for i, up in enumerate(self.ups):
            x = up(x, ctx)
            x = relu(x)
        return x.with_var(self.head(x.var))


class UNet(Module):
    """SSC blocks with stride-2 SC downsampling, DC upsampling and skip concatenation."""

    def __init__(self, spec: NetworkSpec, classes: int, rng=0):
        rng = _rng(rng)
        self.spec = spec
        d, ch = spec.d, spec.level_channels()
        self.input = ConvBNReLU("ssc", d, spec.in_channels, ch[0], 3, 1, rng)
        self.enc = [Block(spec.block, d, c, rng) for c in ch]
        self.down = [ConvBNReLU("sc", d, ch[i], ch[i + 1], 2, 2, rng, level=i) for i in range(len(ch) - 1)]
        self.up = [Conv("dc", d, ch[i + 1], ch[i], 2, 2, rng, level=i) for i in range(len(ch) - 1)]
        self.up_bn = [BatchNorm(ch[i]) for i in range(len(ch) - 1)]
        self.merge = [ConvBNReLU("ssc", d, 2 * ch[i], ch[i], 3, 1, rng) for i in range(len(ch) - 1)]
        self.dec = [Block(spec.block, d, ch[i], rng) for i in range(len(ch) - 1)]
        self.head = Linear(ch[0], classes, rng)

    def __call__(self, x: SparseTensor, ctx: Context) -> SparseVar:
        ctx.sc_rulebooks = []
        h = self.input(SparseVar.of(x), ctx)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h, ctx)
            if i < len(self.down):
                skips.append(h)
                h = self.down[i](h, ctx)
        for i in range(len(self.down) - 1, -1, -1):
            h = relu(self.up_bn[i](self.up[i](h, ctx), ctx))
            cat = ag.concat([h.var, skips[i].var])
            ctx.trace.append(("Concat", h.var.value.shape[1], cat.value.shape[1], None, None,
                              h.tensor.spatial_size[0], h.tensor.spatial_size[0]))
            h = self.merge[i](h.with_var(cat), ctx)
            h = self.dec[i](h, ctx)
        return h.with_var(self.head(h.var))


class ClassifierHead(Module):
    """Linear layer, or an MLP with two hidden ReLU layers."""

    def __init__(self, kind: str, in_dim: int, classes: int, hidden: int = 512, rng=0):
        if in_dim <= 0 or classes <= 0:
            raise SpecInvalid("head dimensions must be positive")
        rng = _rng(rng)
        self.kind = kind
        if kind == "linear":
            self.layers = [Linear(in_dim, classes, rng)]
        elif kind == "mlp":
            self.layers = [Linear(in_dim, hidden, rng), Linear(hidden, hidden, rng),
                           Linear(hidden, classes, rng)]
        else:
            raise SpecInvalid(f"unknown head kind {kind!r}")

    @property
    def hidden_layers(self) -> int:
        return len(self.layers) - 1

    def __call__(self, x: Var) -> Var:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.relu(x)
        return x


def build_encoder(spec, rng=0):
    return Encoder(spec, rng)


def build_decoder(spec, rng=0):
    return Decoder(spec, rng)


def build_autoencoder(spec, rng=0):
    return Autoencoder(spec, rng)


def build_nonconvnet(spec, classes, rng=0):
    return NonConvNet(spec, classes, rng)


def build_unet(spec, classes, rng=0):
    return UNet(spec, classes, rng)


def build_classifier_head(kind, in_dim, classes, hidden=512, rng=0):
    return ClassifierHead(kind, in_dim, classes, hidden, rng)


def latent_vectors(z: SparseVar) -> Var:
    """One latent row per sample for a ``1**d`` latent (rows are batch-ordered)."""
    if any(s != 1 for s in z.tensor.spatial_size):
        raise SpecInvalid("classification heads need a to_point encoder")
    if not np.array_equal(z.coords[:, 0], np.arange(z.tensor.batch_size)):
        raise BadGeometry("empty sample in batch")
    return z.var


def burn_in_batchnorm(network: Module, data, passes: int = 100):
    """Run ``passes`` train-mode forward passes to set batchnorm running statistics.

    ``data`` is a sequence of input tensors, cycled as needed.  Parameters
    are untouched.
    """
    data = list(data)
    if not data:
        raise ValueError("burn-in needs data")
    for i in range(passes):
        ctx = Context(mode="train", update_bn=True)
        x = data[i % len(data)]
        if isinstance(network, (Encoder,)):
            network(SparseVar.of(x), ctx)
        else:
            network(x, ctx)
    return network


# -- shape context ------------------------------------------------------------

def shape_context(x: SparseTensor, levels: int) -> SparseTensor:
    """Multi-scale ``3**d`` neighbourhood features at each active site.

    For scale ``2**j`` (``j < levels``) the input is average pooled by
    ``2**j`` (window volume as divisor), the ``3**d`` cells around each site's
    pooled cell are gathered (zeros outside), and the results of all scales
    are concatenated: ``3**d * n * levels`` channels, ordered scale, then
    neighbour offset, then channel.
    """
    from .layers import kernel_offsets

    if levels < 1:
        raise BadGeometry("levels must be >= 1")
    top = 2 ** (levels - 1)
    if any(s % top for s in x.spatial_size):
        raise BadGeometry(f"spatial size {x.spatial_size} not divisible by {top}")
    d, n = x.d, x.channels
    feats = np.asarray(x.features, dtype=np.float64)
    offsets = kernel_offsets(3, d) - 1
    blocks = []
    for j in range(levels):
        s = 2 ** j
        size = tuple(v // s for v in x.spatial_size)
        cells = x.coords.copy()
        cells[:, 1:] //= s
        pooled = SparseTensor.from_coords(*_pool(cells, feats, size, s ** d), size, x.batch_size)
        for o in offsets:
            nb = cells.copy()
            nb[:, 1:] += o
            rows = pooled.lookup(nb)
            g = np.zeros((x.n_active, n))
            hit = rows >= 0
            g[hit] = pooled.features[rows[hit]]
            blocks.append(g)
    out = np.concatenate(blocks, axis=1) if blocks else np.zeros((x.n_active, 0))
    return x.with_features(out)


def _pool(cells, feats, size, volume):
    from .sparse_tensor import keys_to_coords, linear_keys

    keys = linear_keys(cells, size)
    uniq, inv = np.unique(keys, return_inverse=True)
    sums = np.zeros((len(uniq), feats.shape[1]))
    np.add.at(sums, inv, feats)
    return keys_to_coords(uniq, size), sums / volume
