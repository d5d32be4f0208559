"""Run configuration: ``key = value`` files with ``#`` comments.

Keys (defaults in parentheses):

    train_data, test_data   dataset paths: a stroke file, or a directory of point-cloud files
    encoder                 encoder/autoencoder checkpoint for train-head (unsupervised protocol)
    d (2), grid (16), k (8), in_channels (1)
    growth (doubling|linear), block (single|residual)
    mode (to_point|fixed_factor), factor (16), latent_ssc (0)
    optimizer (adam|sgd), lr (0.001), momentum (0.9)
    epochs (1), steps (0 = run full epochs), batch_size (8)
    loss_weights ("" = all 1), monochrome (false)
    augment (false), rotation (15), scale_lo (0.85), scale_hi (1.15), shear (0), translation (0.1)
    resolution (1.0)        voxel edge for point-cloud datasets
    head (linear|mlp|nonconvnet|unet|shape_context), hidden (512)
    protocol (unsupervised|untrained|supervised), classes (10), burn_in (100)
    shape_levels (3), seed (0), log ("" = <out>.log)
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    train_data: str = ""
    test_data: str = ""
    encoder: str = ""
    d: int = 2
    grid: int = 16
    k: int = 8
    in_channels: int = 1
    growth: str = "doubling"
    block: str = "single"
    mode: str = "to_point"
    factor: int = 16
    latent_ssc: int = 0
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 1
    steps: int = 0
    batch_size: int = 8
    loss_weights: str = ""
    monochrome: bool = False
    augment: bool = False
    rotation: float = 15.0
    scale_lo: float = 0.85
    scale_hi: float = 1.15
    shear: float = 0.0
    translation: float = 0.1
    resolution: float = 1.0
    head: str = "linear"
    hidden: int = 512
    protocol: str = "unsupervised"
    classes: int = 10
    burn_in: int = 100
    shape_levels: int = 3
    seed: int = 0
    log: str = ""

    def validate(self) -> "RunConfig":
        positive = ("d", "grid", "k", "in_channels", "factor", "epochs", "batch_size",
                    "hidden", "classes", "shape_levels", "lr", "resolution")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("steps", "latent_ssc", "burn_in", "seed", "rotation", "shear", "translation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 2 <= self.d <= 4:
            raise ConfigError(f"d must be 2, 3 or 4, got {self.d}")
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ConfigError("need 0 < scale_lo <= scale_hi")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        choices = {
            "growth": ("doubling", "linear"), "block": ("single", "residual"),
            "mode": ("to_point", "fixed_factor"), "optimizer": ("adam", "sgd"),
            "head": ("linear", "mlp", "nonconvnet", "unet", "shape_context"),
            "protocol": ("unsupervised", "untrained", "supervised"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        self.weights()
        return self

    def weights(self) -> list | None:
        if not self.loss_weights.strip():
            return None
        try:
            w = [float(v) for v in self.loss_weights.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"bad loss_weights {self.loss_weights!r}") from None
        if any(v < 0 for v in w):
            raise ConfigError("loss weights must be non-negative")
        return w

    def network_spec(self):
        from .errors import SpecInvalid
        from .models import NetworkSpec

        try:
            return NetworkSpec(d=self.d, k=self.k, input_size=self.grid, in_channels=self.in_channels,
                               growth=self.growth, block=self.block, mode=self.mode,
                               factor=self.factor, latent_ssc=self.latent_ssc)
        except SpecInvalid as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, value: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    try:
        if kind == "bool":
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value.strip()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        setattr(cfg, key.strip(), coerce(key.strip(), value))
    return cfg


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config(fh.read(), cfg)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    for key, value in (overrides or {}).items():
        setattr(cfg, key, coerce(key, str(value)) if isinstance(value, str) else value)
    return cfg.validate()
