"""Synthetic transition sources and the FIFO buffer that holds their output.

Every source exposes ``generate(starts, policy, horizon, rng)`` and returns
transitions tagged ``synthetic``.  A rollout begins at a dataset state; with
the ``dataset_first`` schedule its first action is the recorded dataset
action and later actions come from the current policy.
"""

from __future__ import annotations

import numpy as np

from .datakit import OfflineDataset, SYNTHETIC, Transitions
from .diffkit import Adam, Mlp, grad, mean, square, sub
from .envkit import TIER_PRESETS, DynamicsSpec, make_env, preset

SCHEDULES = ("dataset_first", "policy_only")


def _check_schedule(schedule: str) -> None:
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown rollout_action_schedule {schedule!r}; choose from {SCHEDULES}")


class RolloutSource:
    """Shared rollout loop; subclasses supply the one-step transition."""

    name = "abstract"

    def __init__(self):
        self.stats = {"generated": 0, "truncated": 0, "calls": 0}

    def _transition(self, active, states, actions, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Step rows ``active`` of the current rollout batch; returns (next_states, rewards, terminals)."""
        raise NotImplementedError

    def _begin(self, n: int, rng: np.random.Generator) -> None:
        """Hook run once per generate call, before the first step."""

    def generate(self, starts: Transitions, policy, horizon: int = 1, rng: np.random.Generator | None = None,
                 schedule: str = "dataset_first") -> Transitions:
        if horizon < 1:
            raise ValueError("rollout horizon must be at least 1")
        _check_schedule(schedule)
        rng = rng if rng is not None else np.random.default_rng()
        n = len(starts)
        self._begin(n, rng)
        active = np.arange(n)
        states = np.array(starts.states, dtype=np.float64)
        parts = []
        truncated = 0
        for t in range(horizon):
            if len(active) == 0:
                break
            if t == 0 and schedule == "dataset_first":
                actions = np.array(starts.actions[active], dtype=np.float64)
            else:
                actions, _ = policy.sample(states, rng)
            nxt, rewards, terminals = self._transition(active, states, actions, rng)
            parts.append(Transitions(states, actions, rewards, nxt, terminals, SYNTHETIC))
            keep = ~terminals
            if t < horizon - 1:
                truncated += int(np.count_nonzero(terminals))
            active, states = active[keep], nxt[keep]
        batch = (Transitions.concatenate(parts, SYNTHETIC) if parts
                 else Transitions.empty(starts.obs_dim, starts.act_dim))
        self.stats["generated"] += len(batch)
        self.stats["truncated"] += truncated
        self.stats["calls"] += 1
        self.last_truncated = truncated
        return batch


class SimulatorSource(RolloutSource):
    """Rolls out in perturbed simulators, choosing one of the tier's presets uniformly per rollout."""

    name = "simulator"

    def __init__(self, env_kind: str, tier: str | None = None, specs: list[DynamicsSpec] | None = None):
        super().__init__()
        if (tier is None) == (specs is None):
            raise ValueError("give exactly one of tier or specs")
        if tier is not None:
            if tier not in TIER_PRESETS:
                raise ValueError(f"unknown tier {tier!r}; choose from {sorted(TIER_PRESETS)}")
            self.preset_names = list(TIER_PRESETS[tier])
            specs = [preset(p) for p in self.preset_names]
        else:
            self.preset_names = [f"custom{i}" for i in range(len(specs))]
        self.tier = tier
        self.specs = list(specs)
        self.envs = [make_env(env_kind, s) for s in self.specs]
        self.preset_counts = np.zeros(len(self.specs), dtype=np.int64)
        self._choice = np.zeros(0, dtype=np.int64)

    def _begin(self, n, rng):
        self._choice = rng.integers(0, len(self.envs), size=n)
        self.preset_counts += np.bincount(self._choice, minlength=len(self.envs))

    def _transition(self, active, states, actions, rng):
        nxt = np.empty_like(states)
        rewards = np.empty(len(states))
        terminals = np.zeros(len(states), dtype=bool)
        for i, (k, s, a) in enumerate(zip(self._choice[active], states, actions)):
            env = self.envs[k]
            env.set_state(s)
            result = env.step(a, rng)
            nxt[i], rewards[i], terminals[i] = result.next_state, result.reward, result.terminal
        return nxt, rewards, terminals


class DatasetResampleSource(RolloutSource):
    """Replays the start transitions' own outcomes; the zero-gap reference source."""

    name = "resample"

    def __init__(self, n_presets: int = 1):
        super().__init__()
        self.n_presets = n_presets
        self._starts = None

    def generate(self, starts, policy, horizon=1, rng=None, schedule="dataset_first"):
        self._starts = starts
        return super().generate(starts, policy, 1, rng, schedule)

    def _begin(self, n, rng):
        # same generator draws as SimulatorSource so seeded runs stay aligned
        rng.integers(0, self.n_presets, size=n)

    def _transition(self, active, states, actions, rng):
        s = self._starts.take(active)
        return np.array(s.next_states), np.array(s.rewards), np.array(s.terminals)


class LearnedModelSource(RolloutSource):
    """Ensemble of one-step models predicting (Δstate, reward, terminal) from state ⊕ action."""

    name = "learned_model"

    def __init__(self, members: list[Mlp], in_mean, in_std, out_mean, out_std, obs_dim: int):
        super().__init__()
        self.members = members
        self.in_mean, self.in_std = in_mean, in_std
        self.out_mean, self.out_std = out_mean, out_std
        self.obs_dim = obs_dim

    @property
    def K(self) -> int:
        return len(self.members)

    def predict(self, states, actions, member: int | np.ndarray = 0):
        """Returns (next_states, rewards, terminals); ``member`` may be one index or one per row."""
        x = (np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1) - self.in_mean) / self.in_std
        member = np.broadcast_to(np.asarray(member), (len(x),))
        out = np.empty((len(x), len(self.out_mean)))
        for k in np.unique(member):
            rows = member == k
            out[rows] = self.members[k].forward(x[rows])
        out = out * self.out_std + self.out_mean
        d = self.obs_dim
        return np.atleast_2d(states) + out[:, :d], out[:, d], out[:, d + 1] > 0.5

    def _transition(self, active, states, actions, rng):
        member = rng.integers(0, self.K, size=len(states))
        return self.predict(states, actions, member)


def _normalizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return mu, np.where(sd < 1e-8, 1.0, sd)


def fit_model(dataset: OfflineDataset | Transitions, K: int = 4, epochs: int = 30,
              rng: np.random.Generator | None = None, hidden=(64, 64), batch_size: int = 256,
              lr: float = 1e-3) -> LearnedModelSource:
    data = dataset.data if isinstance(dataset, OfflineDataset) else dataset
    n = len(data)
    if n == 0:
        raise ValueError("cannot fit a model to an empty dataset")
    if K < 1:
        raise ValueError("ensemble size must be positive")
    batch_size = min(batch_size, n)
    if n < 2:
        raise ValueError(f"dataset of {n} transition(s) is too small for one training batch")
    rng = rng if rng is not None else np.random.default_rng()
    x = np.concatenate([data.states, data.actions], axis=1)
    y = np.concatenate([data.next_states - data.states, data.rewards[:, None],
                        data.terminals.astype(np.float64)[:, None]], axis=1)
    in_mean, in_std = _normalizer(x)
    out_mean, out_std = _normalizer(y)
    xn, yn = (x - in_mean) / in_std, (y - out_mean) / out_std
    members = []
    for _ in range(K):
        net = Mlp([x.shape[1], *hidden, y.shape[1]], rng)
        opt = Adam(net.params, lr=lr)
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n - batch_size + 1, batch_size):
                idx = order[lo:lo + batch_size]
                xb, yb = xn[idx], yn[idx]
                _, grads = grad(lambda: mean(square(sub(net(xb), yb))), net.params)
                opt.step(grads)
        members.append(net)
    return LearnedModelSource(members, in_mean, in_std, out_mean, out_std, data.obs_dim)


class SyntheticBuffer:
    """Bounded FIFO of synthetic transitions; the oldest entries are evicted first."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, obs_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, batch: Transitions) -> None:
        if batch.source != SYNTHETIC:
            raise ValueError("the synthetic buffer only accepts synthetic transitions")
        n = len(batch)
        if n > self.capacity:
            batch = batch.take(slice(n - self.capacity, n))
            n = self.capacity
        idx = (self.ptr + np.arange(n)) % self.capacity
        self.states[idx] = batch.states
        self.actions[idx] = batch.actions
        self.rewards[idx] = batch.rewards
        self.next_states[idx] = batch.next_states
        self.terminals[idx] = batch.terminals
        self.ptr = (self.ptr + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def _take(self, idx) -> Transitions:
        return Transitions(self.states[idx], self.actions[idx], self.rewards[idx],
                           self.next_states[idx], self.terminals[idx], SYNTHETIC)

    def sample(self, n: int, rng: np.random.Generator) -> Transitions:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self._take(rng.integers(0, self.size, size=n))

    def contents(self) -> Transitions:
        """Stored transitions, oldest first."""
        start = (self.ptr - self.size) % self.capacity
        return self._take((start + np.arange(self.size)) % self.capacity)


def simulator_generate(src: RolloutSource, starts, policy, h, rng, schedule="dataset_first"):
    return src.generate(starts, policy, h, rng, schedule)


def buffer_push(buffer: SyntheticBuffer, batch: Transitions) -> None:
    buffer.push(batch)


def buffer_sample(buffer: SyntheticBuffer, n: int, rng) -> Transitions:
    return buffer.sample(n, rng)
