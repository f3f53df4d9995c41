"""Offline datasets: collection with a behaviour policy, text serialisation, batch sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envkit import make_env, IDENTITY

REAL = "real"
SYNTHETIC = "synthetic"
HEADER_TAG = "cosbo-dataset"
FORMAT_VERSION = "v1"


@dataclass(frozen=True)
class Transitions:
    """Columnar batch of transitions sharing one provenance tag."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    source: str = REAL

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("states", "actions", "next_states", "terminals"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if self.source not in (REAL, SYNTHETIC):
            raise ValueError(f"unknown source tag {self.source!r}")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def obs_dim(self) -> int:
        return self.states.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    def take(self, idx) -> "Transitions":
        return Transitions(self.states[idx], self.actions[idx], self.rewards[idx],
                           self.next_states[idx], self.terminals[idx], self.source)

    def retag(self, source: str) -> "Transitions":
        return Transitions(self.states, self.actions, self.rewards, self.next_states, self.terminals, source)

    @staticmethod
    def concatenate(parts: list["Transitions"], source: str | None = None) -> "Transitions":
        if not parts:
            raise ValueError("nothing to concatenate")
        source = source or parts[0].source
        return Transitions(*(np.concatenate([getattr(p, c) for p in parts]) for c in
                             ("states", "actions", "rewards", "next_states", "terminals")), source)

    @staticmethod
    def empty(obs_dim: int, act_dim: int, source: str = SYNTHETIC) -> "Transitions":
        return Transitions(np.zeros((0, obs_dim)), np.zeros((0, act_dim)), np.zeros(0),
                           np.zeros((0, obs_dim)), np.zeros(0, dtype=bool), source)

    def equals(self, other: "Transitions") -> bool:
        return (self.source == other.source and all(
            np.array_equal(getattr(self, c), getattr(other, c))
            for c in ("states", "actions", "rewards", "next_states", "terminals")))


@dataclass(frozen=True)
class OfflineDataset:
    data: Transitions
    env_kind: str
    behavior: str = "unknown"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.data) == 0:
            raise ValueError("an offline dataset cannot be empty")
        if self.data.source != REAL:
            raise ValueError("offline datasets hold real transitions only")
        for c in ("states", "actions", "rewards", "next_states", "terminals"):
            getattr(self.data, c).flags.writeable = False

    def __len__(self) -> int:
        return len(self.data)

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def obs_dim(self) -> int:
        return self.data.obs_dim

    @property
    def act_dim(self) -> int:
        return self.data.act_dim

    def equals(self, other: "OfflineDataset") -> bool:
        return self.env_kind == other.env_kind and self.data.equals(other.data)


class RandomPolicy:
    """Uniform over the environment's action set."""

    def __init__(self, env):
        self.env = env
        self.description = "uniform-random"

    def act(self, state, rng, deterministic=False):
        return self.env.random_action(rng)


class NoisyPolicy:
    """Deterministic mean action of ``policy`` plus clipped Gaussian noise."""

    def __init__(self, policy, sigma: float, description: str = "noisy"):
        self.policy = policy
        self.sigma = sigma
        self.description = f"{description} (gaussian sigma={sigma:g})"

    def act(self, state, rng, deterministic=False):
        a = self.policy.mean_action(state)[0]
        if deterministic:
            return a
        bound = self.policy.action_bound
        return np.clip(a + self.sigma * rng.standard_normal(a.shape), -bound, bound)


def run_episode(env, policy, rng, deterministic=False, record=None) -> float:
    """Roll one episode from a fresh reset; returns the undiscounted return."""
    state = env.reset(rng)
    total = 0.0
    for _ in range(env.horizon):
        action = np.asarray(policy.act(state, rng, deterministic=deterministic), dtype=np.float64).reshape(-1)
        result = env.step(action)
        total += result.reward
        if record is not None:
            record.append((state, action, result.reward, result.next_state, result.terminal))
        state = result.next_state
        if result.terminal:
            break
    return total


def episode_returns(env, policy, n_episodes: int, seed: int, deterministic=False) -> np.ndarray:
    rng = np.random.default_rng(seed)
    env.rng = rng
    return np.array([run_episode(env, policy, rng, deterministic) for _ in range(n_episodes)])


def collect_dataset(env, behavior, n_transitions: int, seed: int) -> OfflineDataset:
    """Roll ``behavior`` in the unperturbed version of ``env`` until ``n_transitions`` are recorded."""
    if n_transitions <= 0:
        raise ValueError("n_transitions must be positive")
    target = make_env(env.kind, IDENTITY)
    rng = np.random.default_rng(seed)
    target.rng = rng
    records, returns = [], []
    while len(records) < n_transitions:
        returns.append(run_episode(target, behavior, rng, record=records))
    records = records[:n_transitions]
    cols = list(zip(*records))
    data = Transitions(np.array(cols[0]), np.array(cols[1]), np.array(cols[2], dtype=np.float64),
                       np.array(cols[3]), np.array(cols[4], dtype=bool), REAL)
    desc = getattr(behavior, "description", type(behavior).__name__)
    return OfflineDataset(data, env.kind, desc, seed, {"episodes": len(returns),
                                                      "mean_episode_return": float(np.mean(returns))})


def sample_batch(dataset: OfflineDataset | Transitions, n: int, rng: np.random.Generator) -> Transitions:
    data = dataset.data if isinstance(dataset, OfflineDataset) else dataset
    if len(data) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if n < 1:
        raise ValueError("batch size must be at least 1")
    return data.take(rng.integers(0, len(data), size=n))


# file format ------------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save(dataset: OfflineDataset, path) -> None:
    d = dataset.data
    lines = [f"{HEADER_TAG} {FORMAT_VERSION} {dataset.env_kind} {d.obs_dim} {d.act_dim} {len(d)}"]
    for i in range(len(d)):
        fields = [*map(_fmt, d.states[i]), *map(_fmt, d.actions[i]), _fmt(d.rewards[i]),
                  *map(_fmt, d.next_states[i]), "1" if d.terminals[i] else "0"]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> OfflineDataset:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 6 or header[0] != HEADER_TAG or header[1] != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}:1: malformed header {' '.join(header)!r}")
        env_kind = header[2]
        try:
            obs_dim, act_dim, n = (int(x) for x in header[3:])
        except ValueError:
            raise DatasetFormatError(f"{path}:1: non-integer dimensions in header") from None
        width = 2 * obs_dim + act_dim + 2
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != width:
                raise DatasetFormatError(f"{path}:{lineno}: expected {width} fields, found {len(parts)}")
            if parts[-1] not in ("0", "1"):
                raise DatasetFormatError(f"{path}:{lineno}: terminal flag must be 0 or 1, got {parts[-1]!r}")
            try:
                values = [float(x) for x in parts[:-1]]
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: unparsable number") from None
            if not all(math.isfinite(v) for v in values):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite value")
            rows.append(values + [float(parts[-1])])
    if len(rows) != n:
        raise DatasetFormatError(f"{path}: header declares {n} transitions but file holds {len(rows)}")
    if n == 0:
        raise DatasetFormatError(f"{path}: dataset is empty")
    arr = np.array(rows)
    o, a = obs_dim, act_dim
    data = Transitions(arr[:, :o], arr[:, o:o + a], arr[:, o + a], arr[:, o + a + 1:o + a + 1 + o],
                       arr[:, -1] == 1.0, REAL)
    return OfflineDataset(data, env_kind, behavior="loaded from file")
