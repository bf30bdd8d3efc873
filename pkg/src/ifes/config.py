"""``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .network import NetConfig, Variant
from .training import make_optimizer

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    stages: int = 3
    scale: int = 8
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-3
    tau: float = 1.0
    xi: float = 1.7
    ssim_const: float = 9e-4
    window: int = 16
    iterations: int = 500
    batch: int = 1
    smooth: bool = False
    variant: str = "full"
    recon_loss: str = "mse"
    data_dir: str = ""
    ir_suffix: str = "_ir"
    vis_suffix: str = "_vis"
    patch: int = 64  # square patch side; 0 trains on full images
    patches: int = 0  # patches to sample when patch > 0; 0 means one per pair
    output_dir: str = "runs"

    def __post_init__(self):
        if self.batch != 1:
            raise ConfigError("only batch = 1 is supported")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.patch < 0 or self.patches < 0:
            raise ConfigError("patch and patches must be >= 0")
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"variant must be one of full, no_ifem, hc; got {self.variant!r}") from None
        self.loss_config()
        self.net_config()

    def net_config(self):
        try:
            return NetConfig(stages=self.stages, scale=self.scale, variant=self.variant, seed=self.seed)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def loss_config(self):
        return LossConfig(
            tau=self.tau, xi=self.xi, ssim_const=self.ssim_const, window=self.window, recon=self.recon_loss
        )

    def optimizer(self):
        return make_optimizer(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def dumps(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name, raw, typ):
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in dataclasses.fields(RunConfig)}


def parse_pairs(items, source="<args>"):
    values = {}
    for lineno, line in items:
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line.strip()!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, _TYPES[key])
    return values


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        values.update(parse_pairs(enumerate(text.splitlines(), 1), str(path)))
    values.update(parse_pairs(((i, o) for i, o in enumerate(overrides, 1)), "--set"))
    return RunConfig(**values)
