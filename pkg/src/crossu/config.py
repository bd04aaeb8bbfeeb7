"""Run configuration: one serializable object that fully determines a training run.

A run is reproducible from (config, seed) alone, so every stochastic choice in
training reads its seed from here. Files may be TOML or JSON; both parse into
the same nested dict shape that ``RunConfig.from_dict`` consumes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .datapipe import DatasetSpec
from .errors import InvalidConfigError
from .flow import SamplerConfig
from .model import PRESETS, ModelConfig
from .routing import GuidanceSpec

_MU_P_BASE_DIM = 128  # toy width; μP learning rates are quoted at this scale


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 3e-4
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.01
    mu_p_scaling: bool = False

    def __post_init__(self):
        if self.kind != "adamw":
            raise InvalidConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise InvalidConfigError(f"lr must be positive, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise InvalidConfigError(f"betas must be two values in [0,1), got {self.betas}")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must be >= 0")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def effective_lr(self, model_dim: int) -> float:
        """Width-scaled learning rate; identity unless mu_p_scaling is on."""
        if not self.mu_p_scaling:
            return self.lr
        return self.lr * _MU_P_BASE_DIM / model_dim


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 2000
    batch: int = 4
    tread_rate: float = 0.5
    caption_dropout: float = 0.1
    grad_accum: int = 1
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.grad_accum < 1:
            raise InvalidConfigError("steps, batch, and grad_accum must be >= 1")
        if not 0.0 <= self.tread_rate <= 1.0:
            raise InvalidConfigError(f"tread_rate must lie in [0, 1], got {self.tread_rate}")
        if not 0.0 <= self.caption_dropout <= 1.0:
            raise InvalidConfigError("caption_dropout must lie in [0, 1]")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise InvalidConfigError("checkpoint_every and log_every must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    data: DatasetSpec
    optimizer: OptimizerConfig = OptimizerConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    sampling: SamplerConfig = SamplerConfig()
    seed: int = 0
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": dataclasses.asdict(self.data),
            "optimizer": dataclasses.asdict(self.optimizer),
            "schedule": dataclasses.asdict(self.schedule),
            "sampling": {
                "steps": self.sampling.steps,
                "seed": self.sampling.seed,
                "guidance": dataclasses.asdict(self.sampling.guidance),
            },
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {"model", "data", "optimizer", "schedule", "sampling", "seed", "out_dir"}
        extra = set(raw) - known
        if extra:
            raise InvalidConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(
            model=_model_from(raw.get("model", {})),
            data=DatasetSpec(**raw.get("data", {"source": "procedural:0"})),
            optimizer=OptimizerConfig(**_tupled(raw.get("optimizer", {}), "betas")),
            schedule=ScheduleConfig(**raw.get("schedule", {})),
            sampling=_sampling_from(raw.get("sampling", {})),
            seed=int(raw.get("seed", 0)),
            out_dir=str(raw.get("out_dir", "runs/default")),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _tupled(section: dict, key: str) -> dict:
    # TOML arrays and JSON lists arrive as lists; frozen dataclasses want tuples
    section = dict(section)
    if key in section:
        section[key] = tuple(section[key])
    return section


def _model_from(section: Any) -> ModelConfig:
    if isinstance(section, ModelConfig):
        return section
    if isinstance(section, str):
        section = {"preset": section}
    section = dict(section)
    preset = section.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise InvalidConfigError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"
            )
        base = dataclasses.asdict(PRESETS[preset])
        base.update(section)
        section = base
    if not section:
        section = dataclasses.asdict(PRESETS["toy"])
    try:
        return ModelConfig(**section)
    except TypeError as exc:
        raise InvalidConfigError(f"bad model section: {exc}") from exc


def _sampling_from(section: Any) -> SamplerConfig:
    if isinstance(section, SamplerConfig):
        return section
    section = dict(section)
    guidance = section.pop("guidance", {})
    if not isinstance(guidance, GuidanceSpec):
        guidance = GuidanceSpec(**guidance)
    try:
        return SamplerConfig(guidance=guidance, **section)
    except TypeError as exc:
        raise InvalidConfigError(f"bad sampling section: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse a TOML or JSON run config. Format is picked by suffix, with a
    content sniff as fallback so extensionless files still load."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    suffix = path.suffix.lower()
    if suffix == ".json":
        raw = json.loads(text)
    elif suffix == ".toml":
        raw = tomli.loads(text)
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError:
            try:
                raw = tomli.loads(text)
            except tomli.TOMLDecodeError as exc:
                raise InvalidConfigError(
                    f"{path} is neither valid JSON nor valid TOML: {exc}"
                ) from exc
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"config root must be a table, got {type(raw).__name__}")
    return RunConfig.from_dict(raw)
