"""Command line entry point: ``sparseae <command> [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

from .config import RunConfig, load_config
from .errors import (CheckpointError, ConfigError, DegenerateSample, EmptyCloud, EmptyInput,
                     ParseError, SpecInvalid, SpecMismatch)

log = logging.getLogger("sparseae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4


def _add_common(p: argparse.ArgumentParser, config_keys=True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output path")
    p.add_argument("--device-threads", type=int, default=None, help="BLAS thread count")
    if config_keys:
        for f in fields(RunConfig):
            if f.name == "seed":
                continue
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None,
                           metavar="VALUE", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseae", description="Sparse convolutional autoencoders")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ae", help="train an autoencoder with the hierarchical loss")
    _add_common(p)

    p = sub.add_parser("train-head", help="train a classifier/segmentation head")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("checkpoint")

    p = sub.add_parser("reconstruct", help="dump test-mode reconstructions")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("input", help="stroke file or point-cloud directory")

    p = sub.add_parser("gen-synth", help="write synthetic samples")
    _add_common(p, config_keys=False)
    p.add_argument("--style", default="polyline", choices=("polyline", "shell", "random", "digits"))
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--vertices", type=int, default=3)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--classes", type=int, default=2)

    p = sub.add_parser("convert-strokes", help="convert UCI pen-digits files to the stroke format")
    _add_common(p, config_keys=False)
    p.add_argument("inputs", nargs="+")
    return parser


def _config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _log_path(cfg: RunConfig, out: str | None) -> str | None:
    if cfg.log:
        return cfg.log
    return f"{out}.log" if out else None


def _require_out(args):
    if not args.out:
        raise ConfigError("--out is required")
    return args.out


def run(args) -> int:
    from . import workflows as W
    from .checkpoint import load_checkpoint

    cmd = args.command
    if cmd == "train-ae":
        cfg = _config(args)
        out = _require_out(args)
        _, ckpt, lg = W.train_autoencoder(cfg, out, _log_path(cfg, out))
        print(lg.lines[-1] if lg.lines else "no steps")
        return EXIT_OK
    if cmd == "train-head":
        cfg = _config(args)
        out = _require_out(args)
        model, ckpt, lg = W.train_head(cfg, out, _log_path(cfg, out))
        print(f"head_parameters={ckpt.meta['head_parameters']}")
        return EXIT_OK
    if cmd == "eval":
        cfg = _config(args)
        report = W.evaluate(cfg, load_checkpoint(args.checkpoint))
        for key in sorted(report):
            print(f"{key}={report[key]}")
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump(report, fh, indent=2, sort_keys=True)
                fh.write("\n")
        return EXIT_OK
    if cmd == "reconstruct":
        cfg = _config(args)
        files = W.reconstruct(cfg, load_checkpoint(args.checkpoint), args.input, _require_out(args))
        print(f"files={len(files)}")
        return EXIT_OK
    if cmd == "gen-synth":
        return _gen_synth(args)
    if cmd == "convert-strokes":
        from .data import convert_unipen, format_strokes
        samples = []
        for path in args.inputs:
            with open(path, encoding="utf-8", errors="replace") as fh:
                samples += convert_unipen(fh.read())
        _write_text(_require_out(args), format_strokes(samples))
        print(f"samples={len(samples)}")
        return EXIT_OK
    raise ConfigError(f"unknown command {cmd}")


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _gen_synth(args) -> int:
    import numpy as np

    from .data import PointCloudSample, format_point_cloud, format_strokes, synth_digits, synth_sparse

    out = _require_out(args)
    seed = args.seed or 0
    if args.style == "digits":
        _write_text(out, format_strokes(synth_digits(args.n, seed)))
        print(f"samples={args.n}")
        return EXIT_OK
    os.makedirs(out, exist_ok=True)
    seeds = np.random.default_rng(seed).integers(0, 2**31, size=args.n)
    for i, s in enumerate(seeds):
        t, labels = synth_sparse(args.d, args.grid, args.style, int(s), vertices=args.vertices,
                                 p=args.p, classes=args.classes)
        cloud = PointCloudSample(t.coords[:, 1:].astype(np.float64) + 0.5, labels, None)
        _write_text(os.path.join(out, f"sample{i:04d}.txt"), format_point_cloud(cloud))
    print(f"samples={args.n}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    limiter = None
    if args.device_threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.device_threads)
    try:
        return run(args)
    except (ConfigError, SpecInvalid) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (ParseError, DegenerateSample, EmptyCloud, EmptyInput, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except (CheckpointError, SpecMismatch, IsADirectoryError) as e:
        log.error("checkpoint error: %s", e)
        return EXIT_CHECKPOINT
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
