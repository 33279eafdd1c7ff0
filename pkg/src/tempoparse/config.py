"""Single-file pipeline configuration with a stable content hash."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .errors import ConfigInvalid
from .pseudolabel import PseudoLabelConfig
from .synthgen import GeneratorConfig
from .tempnet import TemporalConfig

SEED_ENV = "TEMPOPARSE_SEED"


@dataclass
class EvalConfig:
    n_runs: int = 5
    # explicit per-run seeds; defaults to seed, seed + 1, ...
    seeds: list[int] | None = None
    min_duration: int = 15

    def run_seeds(self, base: int) -> list[int]:
        return list(self.seeds) if self.seeds else [base + i for i in range(self.n_runs)]


@dataclass
class PipelineConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    kernel: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def seeded(self) -> "PipelineConfig":
        """Copy with the master seed pushed into every section."""
        return replace(
            self,
            generator=replace(self.generator, seed=self.seed),
            encoder=replace(self.encoder, seed=self.seed),
            temporal=replace(self.temporal, seed=self.seed),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["hidden"] = list(self.encoder.hidden)
        d["generator"]["phases"] = {k: list(v) for k, v in self.generator.phases.items()}
        return d

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def validate(self) -> None:
        try:
            self.generator.validate()
            self.temporal.validate()
            for g in ("tool", "segment", "inout"):
                self.encoder.strategy_for(g)
        except (ValueError, TypeError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        if self.kernel.sigma <= 0 or self.kernel.M < 0:
            raise ConfigInvalid("kernel sigma must be > 0 and M >= 0")
        if self.evaluation.n_runs < 1:
            raise ConfigInvalid("evaluation.n_runs must be >= 1")


def _build(cls, data: Any):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"section {cls.__name__} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigInvalid(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value)
        elif name == "hidden":
            kwargs[name] = tuple(value)
        elif name == "phases":
            kwargs[name] = {k: tuple(v) for k, v in value.items()}
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = _build(PipelineConfig, data)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None, env: dict | None = None) -> PipelineConfig:
    """Read a JSON config (defaults when ``path`` is None); ``TEMPOPARSE_SEED`` overrides the seed."""
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigInvalid(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config is not valid JSON: {exc}") from None
    cfg = config_from_dict(data)
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigInvalid(f"{SEED_ENV} must be an integer") from None
    return cfg
