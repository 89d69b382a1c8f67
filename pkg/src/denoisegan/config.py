"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment. ``profile`` (desk | full) picks
the size defaults and is applied before any other key, so explicit keys
always win. Command-line overrides are applied last.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossWeights
from .models import CascadeNetConfig, DiscriminatorConfig, GeneratorConfig

PROFILES = {
    "desk": {
        "image_size": 64, "jitter_size": 72, "base_width": 16, "disc_base_width": 16,
        "cascade_widths": [16, 16, 32, 32, 64],
    },
    "full": {
        "image_size": 256, "jitter_size": 286, "base_width": 64, "disc_base_width": 64,
        "cascade_widths": [64, 64, 128, 128, 256],
    },
}

# keys that name files; left out of the checkpoint snapshot so identical
# runs in different directories produce identical bytes
PATH_KEYS = ("train_manifest", "heldout_manifest", "cascade_weights")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 42
    epochs: int = 200
    batch_size: int = 1
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # share of the epochs, at the end, over which lr falls linearly to zero
    lr_decay_fraction: float = 0.0
    noise_sigma: float = 0.1
    fresh_noise: bool = True
    use_perturbed: bool = True
    use_cascade: bool = True
    use_instance: bool = True
    use_skips: bool = True
    saturating_gan: bool = False
    gamma: float = 100.0
    theta_p: float = 1.0
    sigma_c: float = 1.0
    cascade_lambdas: list[float] = field(default_factory=lambda: [0.2] * 5)
    image_size: int = 64
    jitter_size: int = 72
    base_width: int = 16
    num_res_blocks: int = 9
    disc_layers: int = 4
    disc_base_width: int = 16
    cascade_widths: list[int] = field(default_factory=lambda: [16, 16, 32, 32, 64])
    cascade_seed: int = 19
    cascade_weights: str = ""
    complex_classes: list[str] = field(default_factory=lambda: ["car"])
    num_classes: int = 4
    train_manifest: str = ""
    heldout_manifest: str = ""
    checkpoint_every: int = 20
    eval_bn: str = "running"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        if self.eval_bn not in ("running", "batch"):
            raise ConfigError(f"eval_bn must be 'running' or 'batch', got {self.eval_bn!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.jitter_size < self.image_size:
            raise ConfigError("jitter_size must be >= image_size")
        if not 0.0 <= self.lr_decay_fraction <= 1.0:
            raise ConfigError(f"lr_decay_fraction must lie in [0, 1], got {self.lr_decay_fraction}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if len(self.cascade_lambdas) != len(self.cascade_widths):
            raise ConfigError(f"{len(self.cascade_lambdas)} cascade_lambdas for {len(self.cascade_widths)} levels")

    # -- derived configs ---------------------------------------------------
    @property
    def input_channels(self) -> int:
        return self.num_classes + (len(self.complex_classes) if self.use_instance else 0)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.input_channels, self.base_width, self.num_res_blocks, 3,
                               self.image_size, self.use_skips)

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.input_channels, self.disc_layers, self.disc_base_width)

    def cascade_config(self) -> CascadeNetConfig:
        return CascadeNetConfig(len(self.cascade_widths), list(self.cascade_widths), self.cascade_seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.gamma, self.theta_p, self.sigma_c, list(self.cascade_lambdas))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # -- text form ---------------------------------------------------------
    def to_text(self, include_paths: bool = True) -> str:
        lines = []
        for f in fields(self):
            if not include_paths and f.name in PATH_KEYS:
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(_format(x) for x in v)
    return str(v)


def _parse(name: str, raw: str):
    f = _FIELDS[name]
    default = f.default_factory() if f.default is dataclasses.MISSING else f.default
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        if not raw:
            return []
        elem = type(default[0])
        return [elem(x.strip()) for x in raw.split(",")]
    return raw


def parse_lines(text: str, source: str = "<config>") -> list[tuple[str, str, int]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out.append((key, val, lineno))
    return out


def resolve(text: str = "", overrides: dict[str, str] | None = None, source: str = "<config>") -> RunConfig:
    """Build a RunConfig from file text plus string overrides."""
    overrides = dict(overrides or {})
    items = parse_lines(text, source)
    for key in overrides:
        if key not in _FIELDS:
            raise ConfigError(f"unknown override key {key!r}")
    profile = overrides.get("profile")
    if profile is None:
        profile = next((v for k, v, _ in items if k == "profile"), "desk")
    if profile not in PROFILES:
        raise ConfigError(f"{source}: unknown profile {profile!r}")
    values: dict = {"profile": profile, **PROFILES[profile]}
    for key, val, lineno in items:
        try:
            values[key] = _parse(key, val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    for key, val in overrides.items():
        try:
            values[key] = _parse(key, val)
        except ValueError as exc:
            raise ConfigError(f"override {key}: {exc}") from None
    if "cascade_lambdas" not in values or len(values["cascade_lambdas"]) != len(values["cascade_widths"]):
        if not any(k == "cascade_lambdas" for k, _, _ in items) and "cascade_lambdas" not in overrides:
            n = len(values["cascade_widths"])
            values["cascade_lambdas"] = [1.0 / n] * n
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file; relative paths in it are taken from the file's directory."""
    p = Path(path)
    cfg = resolve(p.read_text(encoding="utf-8"), overrides, str(p))
    overridden = set(overrides or ())
    for key in PATH_KEYS:
        val = getattr(cfg, key)
        if val and key not in overridden and not Path(val).is_absolute():
            setattr(cfg, key, str(p.parent / val))
    return cfg


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")
