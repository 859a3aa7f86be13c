"""Run configuration: one canonical JSON document carried next to every artifact.

The architecture-identity subset (image size, channel schedule, stage map,
head width, time embedding dim, backbone tag) is hashed into a 32-byte
fingerprint stored in checkpoints; loading a checkpoint under a different
architecture refuses early instead of failing deep inside the graph.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, PipelineIOError
from .priors import DEFAULT_STAGE_MAP, stage_input_channels, validate_stage_map

FORMAT_VERSION = 1


def _default_stage_map() -> list:
    return [list(s) for s in DEFAULT_STAGE_MAP]


@dataclass
class RunConfig:
    image_size: int = 64
    channels: list = field(default_factory=lambda: [16, 32, 64, 64])
    head_channels: int = 8
    time_dim: int = 64
    stage_map: list = field(default_factory=_default_stage_map)
    backbone: str = "toy-pyramid"
    steps: int = 1
    lr: float = 2.5e-5
    weight_decay: float = 0.01
    batch: int = 8
    accum: int = 4
    epochs: int = 90
    prior_dropout: float = 0.5
    bins: int = 8
    threshold: float = 0.5
    difficulty: float = 0.5
    seed: int = 0
    data_dir: str | None = None
    run_dir: str | None = None

    def __post_init__(self):
        if self.image_size % 32 or self.image_size < 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if len(self.channels) != 4 or any(int(c) < 1 for c in self.channels):
            raise ConfigError(f"channels must be 4 positive values, got {self.channels}")
        validate_stage_map(self.stage_map)
        if self.backbone != "toy-pyramid":
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.steps < 1 or self.epochs < 0 or self.bins < 1:
            raise ConfigError("steps must be >= 1, epochs >= 0, bins >= 1")
        if self.batch < 1 or self.accum < 1 or self.batch % self.accum:
            raise ConfigError(
                f"batch ({self.batch}) must be a positive multiple of accum ({self.accum})"
            )
        if not 0.0 <= self.prior_dropout <= 1.0:
            raise ConfigError(f"prior_dropout must lie in [0, 1], got {self.prior_dropout}")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ConfigError(f"difficulty must lie in [0, 1], got {self.difficulty}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @property
    def micro_batch(self) -> int:
        return self.batch // self.accum

    def stage_in_channels(self) -> tuple[int, ...]:
        return stage_input_channels(self.stage_map)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = FORMAT_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise PipelineIOError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def save(self, path) -> None:
        try:
            Path(path).write_text(self.to_json())
        except OSError as exc:
            raise PipelineIOError(f"cannot write config {path}: {exc}") from exc

    def with_overrides(self, **kv) -> "RunConfig":
        kv = {k: v for k, v in kv.items() if v is not None}
        return replace(self, **kv)

    # -- identity ------------------------------------------------------------

    def arch_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "channels": [int(c) for c in self.channels],
            "head_channels": self.head_channels,
            "image_size": self.image_size,
            "stage_map": [list(s) for s in self.stage_map],
            "time_dim": self.time_dim,
        }

    def fingerprint(self) -> bytes:
        canon = json.dumps(self.arch_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).digest()
