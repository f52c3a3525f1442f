"""JSON run configuration with sections world, expert, nets, train and eval."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .expert import LOOKAHEAD, IdmParams
from .gailrl import TrainConfig
from .nets import NetConfig
from .world import ConfigError


@dataclass
class WorldConfig:
    n_scenarios: int = 256
    n_agents: tuple = (3, 5)
    heldout_frac: float = 0.2
    vocab_size: int = 64

    def __post_init__(self):
        self.n_agents = tuple(self.n_agents)
        if self.n_scenarios < 2 or len(self.n_agents) != 2 or not 1 <= self.n_agents[0] <= self.n_agents[1]:
            raise ConfigError("world needs >= 2 scenarios and a valid [min, max] agent range")
        if not 0.0 < self.heldout_frac < 1.0:
            raise ConfigError("heldout_frac must lie in (0, 1)")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")


@dataclass
class ExpertConfig:
    v0: float = 12.0
    T: float = 1.5
    a_max: float = 2.0
    b_comf: float = 2.0
    s0: float = 2.0
    delta: float = 4.0
    lookahead: float = LOOKAHEAD

    def __post_init__(self):
        self.idm()
        if self.lookahead <= 0:
            raise ConfigError("lookahead must be positive")

    def idm(self):
        try:
            return IdmParams(self.v0, self.T, self.a_max, self.b_comf, self.s0, self.delta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class EvalConfig:
    rollouts: int = 32
    batch: int = 64
    stability_iterations: int = 200
    stability_window: int = 20
    stability_caps: tuple = (5, 10, None)
    ablation_iterations: int = 200

    def __post_init__(self):
        self.stability_caps = tuple(self.stability_caps)
        if self.rollouts < 1 or self.batch < 1 or self.stability_window < 1:
            raise ConfigError("eval counts must be positive")


SECTIONS = {"world": WorldConfig, "expert": ExpertConfig, "nets": NetConfig, "train": TrainConfig,
            "eval": EvalConfig}


@dataclass
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    nets: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            extra = set(sec) - allowed
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
            try:
                parts[name] = klass(**sec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {name!r} section: {exc}") from exc
        cfg = cls(**parts)
        if cfg.nets.K != cfg.world.vocab_size:
            cfg.nets = NetConfig(**{**asdict(cfg.nets), "K": cfg.world.vocab_size})
        if cfg.world.n_agents[1] - 1 > cfg.nets.max_neighbors:
            raise ConfigError("nets.max_neighbors is smaller than the largest scene allows")
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"
