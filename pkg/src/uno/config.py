"""Engine configuration: thresholds, training hyperparameters, backend wiring.

The config file is a flat TOML document whose top-level keys mirror
:class:`EngineConfig` one to one, plus an optional ``[backends]`` table
selecting mock or HTTP backends.
"""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .serde import obj_digest


class ConfigError(ValueError):
    """Raised when a config value violates its stated range."""


@dataclass(frozen=True)
class EngineConfig:
    epsilon_var: float = 4.0
    tau_star: float = 0.45
    gamma: float = 0.53
    outlier_distance: float = 1.2
    bleu_floor: float = 0.05
    judge_samples: int = 3
    epochs: int = 8
    dpo_beta: float = 0.1
    nll_weight: float = 0.5
    adapter_rank: int = 64
    adapter_dropout: float = 0.05
    learning_rate: float = 5e-4
    temperature: float = 0.1
    train_split_fraction: float = 0.8
    min_cluster_train: int = 16
    min_cluster_critic: int = 8
    online_winrate_delta: float = 0.03
    online_valloss_delta: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        checks = [
            ("epsilon_var", self.epsilon_var > 0, "must be > 0"),
            ("tau_star", 0.0 <= self.tau_star <= 1.0, "must lie in [0, 1]"),
            ("gamma", 0.0 <= self.gamma <= 1.0, "must lie in [0, 1]"),
            ("outlier_distance", self.outlier_distance >= 0.0, "must be >= 0"),
            ("bleu_floor", 0.0 <= self.bleu_floor <= 1.0, "must lie in [0, 1]"),
            ("judge_samples", self.judge_samples >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("dpo_beta", self.dpo_beta > 0.0, "must be > 0"),
            ("nll_weight", 0.0 <= self.nll_weight <= 1.0, "must lie in [0, 1]"),
            ("adapter_rank", self.adapter_rank >= 1, "must be >= 1"),
            ("adapter_dropout", 0.0 <= self.adapter_dropout < 1.0, "must lie in [0, 1)"),
            ("learning_rate", self.learning_rate > 0.0, "must be > 0"),
            ("temperature", self.temperature >= 0.0, "must be >= 0"),
            (
                "train_split_fraction",
                0.0 < self.train_split_fraction < 1.0,
                "must lie strictly between 0 and 1",
            ),
            ("min_cluster_train", self.min_cluster_train >= 1, "must be >= 1"),
            ("min_cluster_critic", self.min_cluster_critic >= 1, "must be >= 1"),
            ("online_winrate_delta", self.online_winrate_delta >= 0.0, "must be >= 0"),
            ("online_valloss_delta", self.online_valloss_delta >= 0.0, "must be >= 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"config field {name!r} {msg} (got {getattr(self, name)})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**dict(d))

    def config_hash(self) -> str:
        return obj_digest(self.to_dict())


@dataclass(frozen=True)
class BackendConfig:
    """Which backend family to use and how to reach it.

    ``mode='mock'`` runs fully in process; ``mock_world`` then points at a
    simulator answer-key file that parameterizes the teachable mock family.
    URLs may be overridden by UNO_CHAT_URL / UNO_EMBED_URL / UNO_RERANK_URL /
    UNO_TRAINER_URL; UNO_API_KEY supplies credentials.
    """

    mode: str = "mock"
    embed_dim: int = 64
    mock_world: Optional[str] = None
    judge_mode: str = "rules"
    chat_url: str = "http://localhost:8001"
    embed_url: str = "http://localhost:8002"
    rerank_url: str = "http://localhost:8003"
    trainer_url: str = "http://localhost:8004"
    chat_model: str = "base-policy"
    embed_model: str = "sentence-encoder"
    retries: int = 3
    max_in_flight: int = 8

    def __post_init__(self) -> None:
        if self.mode not in ("mock", "http"):
            raise ConfigError(f"config field 'backends.mode' must be 'mock' or 'http' (got {self.mode!r})")
        if self.judge_mode not in ("rules", "honest_noise"):
            raise ConfigError(
                f"config field 'backends.judge_mode' must be 'rules' or 'honest_noise' (got {self.judge_mode!r})"
            )
        if self.embed_dim < 2:
            raise ConfigError(f"config field 'backends.embed_dim' must be >= 2 (got {self.embed_dim})")
        if self.retries < 1:
            raise ConfigError(f"config field 'backends.retries' must be >= 1 (got {self.retries})")

    def resolved_url(self, name: str) -> str:
        env = os.environ.get(f"UNO_{name.upper()}_URL")
        return env or getattr(self, f"{name}_url")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BackendConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown backends field(s): {', '.join(unknown)}")
        return cls(**dict(d))


@dataclass(frozen=True)
class RunConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    backends: BackendConfig = field(default_factory=BackendConfig)

    def to_dict(self) -> dict:
        return {"engine": self.engine.to_dict(), "backends": self.backends.to_dict()}

    def config_hash(self) -> str:
        return obj_digest(self.to_dict())


def load_config(path: Path | str) -> RunConfig:
    """Parse a flat TOML config; unknown or out-of-range keys fail fast."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}")
    backends_raw = raw.pop("backends", {})
    engine = EngineConfig.from_dict(raw)
    backends = BackendConfig.from_dict(backends_raw)
    return RunConfig(engine=engine, backends=backends)
