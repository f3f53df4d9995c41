"""Experiment configuration: flat ``key = value`` files with one section per module."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..core import TrainConfig
from ..envkit import ENV_KINDS

SCENARIOS = {
    "offline-only": {"source": "none"},
    "learned-model": {"source": "learned_model"},
    "sim-medium": {"source": "simulator", "tier": "medium"},
    "sim-very": {"source": "simulator", "tier": "very"},
    "sim-extreme": {"source": "simulator", "tier": "extreme"},
    "concat-baseline": {"source": "none"},
}
CONCAT_TIER = "medium"

# Training settings for experiments on a single CPU: fewer, larger-step updates
# per iteration and ten-step simulator rollouts driven by the current policy.
EXPERIMENT_CORE = {"gamma": 0.98, "q_lr": 1e-3, "pi_lr": 1e-3, "gradient_steps_per_iter": 10, "horizon": 10,
                   "rollout_action_schedule": "policy_only"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class DataConfig:
    path: str = "dataset.txt"
    behavior: str = "medium"
    n_transitions: int = 20000
    expert_steps: int = 10000
    noise: float = 0.1
    seed: int = 0


@dataclass
class HarnessConfig:
    scenario: str = "sim-medium"
    iterations: int = 1500
    eval_every: int = 100
    eval_episodes: int = 10
    final_episodes: int = 20
    eval_seed: int = 10_000
    seeds: str = "0,1,2,3,4"
    out: str = "runs"
    timing: str = "off"

    @property
    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]


@dataclass
class ExperimentConfig:
    env_kind: str = "pendulum"
    core: TrainConfig = field(default_factory=lambda: TrainConfig(**EXPERIMENT_CORE))
    data: DataConfig = field(default_factory=DataConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def for_run(self, scenario: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        """Copy with the scenario's config delta applied (and optionally a new seed)."""
        scenario = scenario or self.harness.scenario
        if scenario not in SCENARIOS:
            raise ConfigError(f"harness.scenario: unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
        core = dataclasses.asdict(self.core)
        core.update(SCENARIOS[scenario])
        core["env_kind"] = self.env_kind
        if seed is not None:
            core["seed"] = seed
        if core["source"] == "none":
            core["f"] = 1.0
        return ExperimentConfig(self.env_kind, _make(TrainConfig, core, "core"), dataclasses.replace(self.data),
                                dataclasses.replace(self.harness, scenario=scenario))

    def to_sections(self) -> dict[str, dict]:
        core = dataclasses.asdict(self.core)
        core.pop("env_kind")
        return {"env": {"kind": self.env_kind}, "data": dataclasses.asdict(self.data), "core": core,
                "harness": dataclasses.asdict(self.harness)}

    def dumps(self) -> str:
        lines = []
        for section, values in self.to_sections().items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_render(v)}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(value: str, kind, key: str):
    try:
        if kind is bool:
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def _make(cls, values: dict, section: str):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    out = {}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"{section}.{key}: unknown key")
        kind = kinds.get(str(types[key]), str)
        out[key] = _coerce(value, kind, f"{section}.{key}") if isinstance(value, str) else value
    try:
        return cls(**out)
    except ValueError as exc:
        raise ConfigError(f"{section}.{exc}") from None


def from_sections(sections: dict[str, dict]) -> ExperimentConfig:
    unknown = set(sections) - {"env", "data", "core", "harness", "DEFAULT"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    env = dict(sections.get("env", {}))
    kind = env.pop("kind", "pendulum")
    if env:
        raise ConfigError(f"env.{next(iter(env))}: unknown key")
    if kind not in ENV_KINDS:
        raise ConfigError(f"env.kind: unknown environment {kind!r}")
    core = {k: _render(v) for k, v in EXPERIMENT_CORE.items()}
    core.update(sections.get("core", {}))
    if "env_kind" in core:
        raise ConfigError("core.env_kind: set the environment in [env] kind")
    core["env_kind"] = kind
    harness = _make(HarnessConfig, dict(sections.get("harness", {})), "harness")
    if harness.scenario not in SCENARIOS:
        raise ConfigError(f"harness.scenario: unknown scenario {harness.scenario!r}")
    if harness.timing not in ("off", "wall"):
        raise ConfigError("harness.timing: expected 'off' or 'wall'")
    return ExperimentConfig(kind, _make(TrainConfig, core, "core"),
                            _make(DataConfig, dict(sections.get("data", {})), "data"), harness)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_sections({s: dict(parser[s]) for s in parser.sections()})


def from_report(report: dict) -> ExperimentConfig:
    """Rehydrate the configuration echoed in a run report."""
    sections = {k: {kk: _render(vv) for kk, vv in v.items()} for k, v in report["config"].items()}
    return from_sections(sections)
