"""Run configuration: JSON documents with nested sections, flags on top."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import ConfigError, Protocol
from .nn import DEFAULT_WIDTHS
from .viz import RenderSpec

OUTPUT_ENV = "SIRAD_OUTPUT_ROOT"

# file section -> keys it holds
SECTIONS = {
    "model": ("image_size", "channels", "widths", "loops", "epsilon_cos", "leaky_slope", "teacher_checkpoint"),
    "train": ("iterations", "batch_size", "learning_rate", "loss_log_every"),
    "score": ("sigma_smooth",),
    "data": ("protocol", "manifests"),
    "render": ("p_lo", "p_hi", "alpha", "colormap"),
}
TOP_LEVEL = ("seed", "output_dir")


def _default_output() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


@dataclass
class Config:
    seed: int = 0
    image_size: int = 64
    channels: int = 1
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    loops: int = 3
    iterations: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-4
    loss_log_every: int = 10
    sigma_smooth: float = 4.0
    epsilon_cos: float = 1e-8
    leaky_slope: float = 0.1
    protocol: str = "one_shot_universal"
    manifests: list[str] = field(default_factory=list)
    teacher_checkpoint: str | None = None
    output_dir: str = field(default_factory=_default_output)
    p_lo: float = 20.0
    p_hi: float = 95.0
    alpha: float = 0.5
    colormap: str = "jet"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.manifests = [str(m) for m in self.manifests]

    @classmethod
    def full_scale(cls, **overrides) -> "Config":
        """Iterations, batch, learning rate, loop count and input size of the original setup."""
        base = dict(iterations=3000, batch_size=16, learning_rate=1e-4, loops=3, image_size=128)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "Config":
        positive = ("image_size", "channels", "loops", "iterations", "batch_size", "loss_log_every")
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("learning_rate", "sigma_smooth", "epsilon_cos"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if self.image_size % 16:
            raise ConfigError(f"image_size must be divisible by 16, got {self.image_size}")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ConfigError(f"widths must be four positive channel counts, got {self.widths}")
        self.protocol_spec()
        self.render_spec()
        return self

    def protocol_spec(self, seed: int = 0) -> Protocol:
        return Protocol.parse(self.protocol, seed)

    def render_spec(self) -> RenderSpec:
        try:
            return RenderSpec(self.p_lo, self.p_hi, self.alpha, self.colormap)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def with_overrides(self, **kw) -> "Config":
        kw = {k: v for k, v in kw.items() if v is not None}
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    def to_document(self) -> dict:
        flat = asdict(self)
        flat["widths"] = list(self.widths)
        doc = {k: flat[k] for k in TOP_LEVEL}
        for section, keys in SECTIONS.items():
            doc[section] = {k: flat[k] for k in keys}
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_document(cls, doc: dict) -> "Config":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        flat: dict = {}
        for key, value in doc.items():
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                for k, v in value.items():
                    if k not in SECTIONS[key]:
                        raise ConfigError(f"unknown key {k!r} in section {key!r}")
                    flat[k] = v
            elif key in TOP_LEVEL:
                flat[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return cls(**flat).validate()
        except TypeError as e:
            raise ConfigError(f"bad config value: {e}") from e


def load_config(path) -> Config:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    cfg = Config.from_document(doc)
    # manifest paths are relative to the config file
    cfg.manifests = [os.path.abspath(path.parent / m) for m in cfg.manifests]
    return cfg


def write_config(cfg: Config, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / "config.json"
    out.write_text(cfg.dumps())
    return out
