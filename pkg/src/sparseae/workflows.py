"""Training, evaluation and reconstruction workflows behind the CLI."""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import SparseVar, Tape
from .checkpoint import (Checkpoint, load_checkpoint, load_module_tensors, module_tensors,
                         save_checkpoint)
from .config import RunConfig
from .data import (AffineConfig, PointCloudSample, format_point_cloud, normalize,
                   parse_point_cloud, parse_strokes, random_affine, rasterize, voxelize)
from .errors import ConfigError, EmptyInput, SpecMismatch
from .metrics import (PatternConfusion, classification_error, confusion_labels, mean_iou,
                      pattern_confusion)
from .models import (Autoencoder, ClassifierHead, Encoder, NetworkSpec, NonConvNet, UNet,
                     burn_in_batchnorm, latent_vectors, shape_context)
from .nn import Context
from .sparse_tensor import SparseTensor, concat_batch, occupancy

SEGMENTATION_HEADS = ("nonconvnet", "unet", "shape_context")


# -- datasets -----------------------------------------------------------------

@dataclass
class Dataset:
    """Samples ready for batching.

    ``kind`` is ``"strokes"`` (one class label per sample) or ``"cloud"``
    (one label per active site).
    """

    kind: str
    items: list            # StrokeSample or SparseTensor
    labels: list           # int per sample, or int array per sample
    grid: int

    def __len__(self):
        return len(self.items)

    def tensor(self, i: int, augment: AffineConfig | None = None, seed=None) -> SparseTensor:
        item = self.items[i]
        if self.kind == "strokes":
            if augment is None:
                return rasterize(item, self.grid)
            s = random_affine(normalize(item, self.grid), augment, seed)
            t = rasterize(s, self.grid, fit=False)
            return t if t.n_active else rasterize(item, self.grid)
        return item


def load_dataset(path: str, cfg: RunConfig) -> Dataset:
    """Stroke file -> rasterised samples; directory -> voxelised point clouds."""
    if not path:
        raise ConfigError("no dataset path given")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.txt")))
        if not files:
            raise EmptyInput(f"no point-cloud files in {path}")
        items, labels = [], []
        size = (cfg.grid,) * cfg.d
        for fname in files:
            with open(fname, encoding="utf-8") as fh:
                cloud = parse_point_cloud(fh.read())
            if cloud.d != cfg.d:
                raise ConfigError(f"{fname}: {cloud.d}-dimensional points, config has d={cfg.d}")
            vox = voxelize(cloud, cfg.resolution, cfg.d, size=size, origin=np.zeros(cfg.d))
            t = vox.tensor
            if t.channels != cfg.in_channels:
                t = t.with_features(np.ones((t.n_active, cfg.in_channels)))
            items.append(t)
            labels.append(vox.site_labels)
        return Dataset("cloud", items, labels, cfg.grid)
    with open(path, encoding="utf-8") as fh:
        samples = parse_strokes(fh.read())
    if not samples:
        raise EmptyInput(f"no samples in {path}")
    return Dataset("strokes", samples, [s.label for s in samples], cfg.grid)


def augment_config(cfg: RunConfig) -> AffineConfig | None:
    if not cfg.augment:
        return None
    return AffineConfig((-cfg.rotation, cfg.rotation), (cfg.scale_lo, cfg.scale_hi),
                        (-cfg.shear, cfg.shear), cfg.translation)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


class StepLog:
    """Append-only text log, one ``key=value`` record per line."""

    def __init__(self, path: str | None):
        self.path = path
        self.lines = []
        if path:
            open(path, "w").close()

    def write(self, line: str):
        self.lines.append(line)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def _fmt(v: float) -> str:
    return f"{v:.9g}"


# -- autoencoder ----------------------------------------------------------------

def reconstruct_tensor(model: Autoencoder, x: SparseTensor, ctx: Context | None = None):
    """Test-mode decoding: eval batchnorm, thresholded Sparsify."""
    ctx = ctx or Context(mode="eval", sparsify="test", update_bn=False)
    z = model.encoder(SparseVar.of(x), ctx)
    out = model.decoder(z, ctx)
    return out.detach(), ctx


def pattern_accuracy(model: Autoencoder, tensors) -> PatternConfusion:
    total = PatternConfusion(0, 0, 0)
    for x in tensors:
        out, _ = reconstruct_tensor(model, x)
        total = total + pattern_confusion(out.coords, x.coords)
    return total


def train_autoencoder(cfg: RunConfig, out_path: str | None = None, log_path: str | None = None):
    """Hierarchical-loss training.  Returns ``(model, checkpoint, log)``."""
    data = load_dataset(cfg.train_data, cfg)
    spec = cfg.network_spec()
    rng = np.random.default_rng(cfg.seed)
    model = Autoencoder(spec, rng)
    params = model.parameters()
    opt = ag.Optimizer(params, ag.OptimizerConfig(kind=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum))
    aug = augment_config(cfg)
    log = StepLog(log_path)
    weights = cfg.weights()
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    total_steps = cfg.steps or cfg.epochs * steps_per_epoch
    cache = {} if aug is None else None
    step = 0
    epoch = 0
    while step < total_steps:
        epoch += 1
        ep_loss, ep_n = 0.0, 0
        for idx in batches(len(data), cfg.batch_size, rng):
            if step >= total_steps:
                break
            seeds = rng.integers(0, 2**31, size=len(idx))
            x = concat_batch([data.tensor(int(i), aug, int(s)) for i, s in zip(idx, seeds)])
            ctx = Context(cache=cache)
            with Tape() as tape:
                total, report, _ = model.loss(x, ctx, weights, cfg.monochrome)
                tape.backward(total)
            opt.step()
            opt.zero_grad()
            step += 1
            ep_loss += report.total
            ep_n += 1
            log.write(f"step={step} {report.log_fields()}")
        conf = pattern_accuracy(model, [data.tensor(i) for i in range(len(data))])
        log.write(f"epoch={epoch} loss={_fmt(ep_loss / max(ep_n, 1))} tp={conf.tp} fp={conf.fp} "
                  f"fn={conf.fn} pattern_acc={_fmt(conf.accuracy)}")
    ckpt = Checkpoint(
        {"kind": "autoencoder", "spec": _spec_dict(spec), "seed": cfg.seed, "step": step,
         "optimizer": {"kind": cfg.optimizer, "lr": cfg.lr, "t": opt.t}},
        {**{f"ae.{k}": v for k, v in module_tensors(model).items()}, **opt.state_tensors()})
    if out_path:
        save_checkpoint(ckpt, out_path)
    return model, ckpt, log


def _spec_dict(spec: NetworkSpec) -> dict:
    import json
    return json.loads(spec.to_json())


def autoencoder_from_checkpoint(ckpt: Checkpoint) -> Autoencoder:
    if ckpt.meta.get("kind") != "autoencoder":
        raise SpecMismatch(f"expected an autoencoder checkpoint, got {ckpt.meta.get('kind')!r}")
    model = Autoencoder(NetworkSpec(**ckpt.spec), 0)
    load_module_tensors(model, ckpt.tensors, "ae.")
    return model


# -- heads --------------------------------------------------------------------

class HeadModel:
    """Encoder (optional) plus head, trained with one of the three protocols."""

    def __init__(self, spec: NetworkSpec, head: str, classes: int, hidden: int, protocol: str,
                 rng, shape_levels: int = 3):
        self.spec, self.head_kind, self.classes, self.protocol = spec, head, classes, protocol
        self.shape_levels = shape_levels
        self.encoder = Encoder(spec, rng) if head in ("linear", "mlp", "nonconvnet") else None
        if head in ("linear", "mlp"):
            self.head = ClassifierHead(head, spec.latent_channels, classes, hidden, rng)
        elif head == "nonconvnet":
            self.head = NonConvNet(spec, classes, rng)
        elif head == "unet":
            self.head = UNet(spec, classes, rng)
        else:
            width = 3 ** spec.d * spec.in_channels * shape_levels
            self.head = ClassifierHead("mlp", width, classes, hidden, rng)

    @property
    def frozen(self) -> bool:
        return self.encoder is not None and self.protocol != "supervised"

    def trainable(self) -> dict:
        params = {f"head.{k}": v for k, v in self.head.parameters().items()}
        if self.encoder is not None and not self.frozen:
            params.update({f"enc.{k}": v for k, v in self.encoder.parameters().items()})
        return params

    def tensors(self) -> dict:
        out = {f"head.{k}": v for k, v in module_tensors(self.head).items()}
        if self.encoder is not None:
            out.update({f"enc.{k}": v for k, v in module_tensors(self.encoder).items()})
        return out

    def logits(self, x: SparseTensor, train: bool) -> ag.Var:
        """Per-sample logits (classification) or per-site logits (segmentation)."""
        enc_mode = "train" if (train and not self.frozen) else "eval"
        head_mode = "train" if train else "eval"
        if self.head_kind == "unet":
            return self.head(x, Context(mode=head_mode, update_bn=train)).var
        if self.head_kind == "shape_context":
            feats = shape_context(x, self.shape_levels).features
            return self.head(ag.Var(feats))
        ctx = Context(mode=enc_mode, update_bn=enc_mode == "train")
        if self.frozen:
            with ag.no_grad():
                z = self.encoder(SparseVar.of(x), ctx)
            z = SparseVar(z.tensor, ag.Var(z.var.value))
        else:
            z = self.encoder(SparseVar.of(x), ctx)
        if self.head_kind == "nonconvnet":
            ctx.mode = head_mode
            return self.head(z, ctx).var
        return self.head(latent_vectors(z))


def _targets(data: Dataset, idx, segmentation: bool):
    if segmentation:
        return np.concatenate([np.asarray(data.labels[i]) for i in idx])
    return np.array([data.labels[i] for i in idx], dtype=np.int64)


def train_head(cfg: RunConfig, out_path: str | None = None, log_path: str | None = None,
               encoder_ckpt: Checkpoint | None = None):
    """Supervised head training.  Returns ``(model, checkpoint, log)``."""
    segmentation = cfg.head in SEGMENTATION_HEADS
    data = load_dataset(cfg.train_data, cfg)
    if segmentation != (data.kind == "cloud"):
        raise ConfigError(f"head {cfg.head!r} does not fit a {data.kind} dataset")
    spec = cfg.network_spec()
    if cfg.protocol == "unsupervised" and cfg.head in ("linear", "mlp", "nonconvnet"):
        if encoder_ckpt is None:
            if not cfg.encoder:
                raise ConfigError("unsupervised protocol needs an encoder checkpoint")
            encoder_ckpt = load_checkpoint(cfg.encoder)
        spec = NetworkSpec(**encoder_ckpt.spec)
    rng = np.random.default_rng(cfg.seed)
    model = HeadModel(spec, cfg.head, cfg.classes, cfg.hidden, cfg.protocol, rng, cfg.shape_levels)
    aug = augment_config(cfg)
    if model.encoder is not None:
        if cfg.protocol == "unsupervised":
            prefix = "ae.encoder." if encoder_ckpt.meta.get("kind") == "autoencoder" else "enc."
            load_module_tensors(model.encoder, encoder_ckpt.tensors, prefix)
        elif cfg.protocol == "untrained":
            burn = [concat_batch([data.tensor(int(i)) for i in idx])
                    for idx in batches(len(data), cfg.batch_size, np.random.default_rng(cfg.seed))]
            burn_in_batchnorm(model.encoder, burn, cfg.burn_in)
    params = model.trainable()
    opt = ag.Optimizer(params, ag.OptimizerConfig(kind=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum))
    log = StepLog(log_path)
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    total_steps = cfg.steps or cfg.epochs * steps_per_epoch
    step = epoch = 0
    while step < total_steps:
        epoch += 1
        for idx in batches(len(data), cfg.batch_size, rng):
            if step >= total_steps:
                break
            seeds = rng.integers(0, 2**31, size=len(idx))
            x = concat_batch([data.tensor(int(i), None if segmentation else aug, int(s))
                              for i, s in zip(idx, seeds)])
            y = _targets(data, idx, segmentation)
            with Tape() as tape:
                logits = model.logits(x, train=True)
                keep = y >= 0
                if not keep.all():
                    logits = ag.gather(logits, np.nonzero(keep)[0])
                loss = ag.cross_entropy(logits, y[keep])
                tape.backward(loss)
            opt.step()
            opt.zero_grad()
            step += 1
            log.write(f"step={step} loss={_fmt(float(loss.value))}")
        log.write(f"epoch={epoch}")
    meta = {"kind": "head", "head": cfg.head, "protocol": cfg.protocol, "classes": cfg.classes,
            "hidden": cfg.hidden, "shape_levels": cfg.shape_levels, "spec": _spec_dict(spec),
            "seed": cfg.seed, "step": step,
            "head_parameters": int(sum(p.value.size for p in model.head.parameters().values()))}
    ckpt = Checkpoint(meta, model.tensors())
    if out_path:
        save_checkpoint(ckpt, out_path)
    return model, ckpt, log


def head_from_checkpoint(ckpt: Checkpoint) -> HeadModel:
    m = ckpt.meta
    if m.get("kind") != "head":
        raise SpecMismatch(f"expected a head checkpoint, got {m.get('kind')!r}")
    model = HeadModel(NetworkSpec(**m["spec"]), m["head"], m["classes"], m["hidden"],
                      m["protocol"], np.random.default_rng(0), m.get("shape_levels", 3))
    load_module_tensors(model.head, ckpt.tensors, "head.")
    if model.encoder is not None:
        load_module_tensors(model.encoder, ckpt.tensors, "enc.")
    return model


def predict(model: HeadModel, data: Dataset, batch_size: int = 32) -> np.ndarray:
    preds = []
    for lo in range(0, len(data), batch_size):
        x = concat_batch([data.tensor(i) for i in range(lo, min(lo + batch_size, len(data)))])
        preds.append(np.argmax(model.logits(x, train=False).value, axis=1))
    return np.concatenate(preds)


# -- evaluation ------------------------------------------------------------------

def evaluate(cfg: RunConfig, ckpt: Checkpoint) -> dict:
    path = cfg.test_data or cfg.train_data
    data = load_dataset(path, cfg)
    occ = [occupancy(data.tensor(i)) for i in range(len(data))]
    report = {"dataset": path, "samples": len(data), "occupancy_mean": float(np.mean(occ)),
              "occupancy_min": float(np.min(occ)), "occupancy_max": float(np.max(occ))}
    kind = ckpt.meta.get("kind")
    if kind == "autoencoder":
        model = autoencoder_from_checkpoint(ckpt)
        mse_sum, conf = 0.0, PatternConfusion(0, 0, 0)
        for i in range(len(data)):
            x = data.tensor(i)
            ctx = Context(mode="eval", update_bn=False)
            _, rep, _ = model.loss(x, ctx)
            mse_sum += rep.mse
            out, _ = reconstruct_tensor(model, x)
            conf = conf + pattern_confusion(out.coords, x.coords)
        report.update({"mse": mse_sum / len(data), "tp": conf.tp, "fp": conf.fp, "fn": conf.fn,
                       "pattern_acc": conf.accuracy})
    elif kind == "head":
        model = head_from_checkpoint(ckpt)
        preds = predict(model, data)
        if data.kind == "strokes":
            report["error_pct"] = classification_error(preds, np.asarray(data.labels))
        else:
            truth = np.concatenate([np.asarray(l) for l in data.labels])
            keep = truth >= 0
            report["mean_iou"] = mean_iou(preds[keep], truth[keep], ckpt.meta["classes"])
        report["head"] = ckpt.meta["head"]
        report["protocol"] = ckpt.meta["protocol"]
    else:
        raise SpecMismatch(f"unknown checkpoint kind {kind!r}")
    return report


# -- reconstruction dumps ---------------------------------------------------------

def reconstruct(cfg: RunConfig, ckpt: Checkpoint, input_path: str, out_dir: str) -> list:
    """Write per-scale TP/FP/FN pattern dumps and the final output per sample.

    Files are point-cloud text: coordinates, features, label where the
    label is 0 = true positive, 1 = false positive, 2 = false negative.
    """
    model = autoencoder_from_checkpoint(ckpt)
    spec = model.spec
    sub = RunConfig(**{**cfg.to_dict(), "grid": spec.input_size, "d": spec.d,
                       "in_channels": spec.in_channels})
    data = load_dataset(input_path, sub)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for i in range(len(data)):
        x = data.tensor(i)
        out, ctx = reconstruct_tensor(model, x)
        truth = ctx.patterns
        for level, _before, after in ctx.decoder_patterns:
            sites, codes = confusion_labels(after[:, 1:], truth[level][:, 1:])
            fname = os.path.join(out_dir, f"sample{i:04d}_level{level}.txt")
            _write(fname, PointCloudSample(sites.astype(np.float64), codes, None))
            written.append(fname)
        sites, codes = confusion_labels(out.coords[:, 1:], x.coords[:, 1:])
        feats = np.zeros((len(sites), spec.in_channels))
        rows = out.lookup(np.concatenate([np.zeros((len(sites), 1), np.int64), sites], axis=1))
        feats[rows >= 0] = np.asarray(out.features)[rows[rows >= 0]]
        fname = os.path.join(out_dir, f"sample{i:04d}_output.txt")
        _write(fname, PointCloudSample(sites.astype(np.float64), codes, feats))
        written.append(fname)
    return written


def _write(path, sample):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_point_cloud(sample))
