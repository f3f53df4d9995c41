"""Target and simulator environments: a torque-limited pendulum and a tabular chain.

A simulator is the same environment class built from a perturbed
:class:`DynamicsSpec`.  Both environments can be teleported to arbitrary
states with :meth:`set_state`, which is what rollout generation relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PENDULUM_MASS = 1.0
PENDULUM_LENGTH = 1.0
GRAVITY = 9.81
DT = 0.05
MAX_TORQUE = 2.0
MAX_SPEED = 8.0
PENDULUM_HORIZON = 200

CHAIN_STATES = 12
CHAIN_MAX_STEPS = 200
CHAIN_GOAL_REWARD = 1.0
CHAIN_CLIFF_REWARD = -1.0
CHAIN_STEP_REWARD = -0.01


@dataclass(frozen=True)
class DynamicsSpec:
    mass_scale: float = 1.0
    length_scale: float = 1.0
    kernel_mix: float = 0.0

    def __post_init__(self):
        for name in ("mass_scale", "length_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v}")
        if not 0.0 <= self.kernel_mix <= 1.0:
            raise ValueError(f"kernel_mix must lie in [0, 1], got {self.kernel_mix}")

    @property
    def is_identity(self) -> bool:
        return self.mass_scale == 1.0 and self.length_scale == 1.0 and self.kernel_mix == 0.0


IDENTITY = DynamicsSpec()

_TIERS = {
    "": {"light": 0.5, "heavy": 1.5, "short": 0.5, "long": 1.5},
    "very_": {"light": 0.3, "heavy": 2.0, "short": 0.3, "long": 2.0},
    "extreme_": {"light": 0.1, "heavy": 3.0, "short": 0.1, "long": 3.0},
}
PRESETS: dict[str, DynamicsSpec] = {}
for _prefix, _table in _TIERS.items():
    for _kind, _scale in _table.items():
        _field = "mass_scale" if _kind in ("light", "heavy") else "length_scale"
        PRESETS[_prefix + _kind] = DynamicsSpec(**{_field: _scale})

TIER_PRESETS = {
    "medium": ["light", "heavy", "short", "long"],
    "very": ["very_light", "very_heavy", "very_short", "very_long"],
    "extreme": ["extreme_light", "extreme_heavy", "extreme_short", "extreme_long"],
}


def preset(name: str) -> DynamicsSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown dynamics preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    terminal: bool


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


class Pendulum:
    """Swing-up pendulum; theta = 0 is upright.

    The state is held as its observation ``(cos θ, sin θ, θ̇)`` and the angle
    is recovered with atan2, so stepping is a pure function of the
    observation.  That makes a teleported simulator reproduce recorded
    transitions bit for bit when its dynamics are unperturbed.
    """

    kind = "pendulum"
    obs_dim = 3
    act_dim = 1
    action_bound = MAX_TORQUE
    horizon = PENDULUM_HORIZON

    def __init__(self, spec: DynamicsSpec = IDENTITY, seed: int | None = None):
        self.spec = spec
        self.mass = PENDULUM_MASS * spec.mass_scale
        self.length = PENDULUM_LENGTH * spec.length_scale
        self.rng = np.random.default_rng(seed)
        self._obs = np.array([1.0, 0.0, 0.0])

    @staticmethod
    def observation(theta: float, theta_dot: float) -> np.ndarray:
        return np.array([math.cos(theta), math.sin(theta), float(theta_dot)])

    @property
    def state(self) -> np.ndarray:
        return self._obs.copy()

    @property
    def theta(self) -> float:
        return math.atan2(self._obs[1], self._obs[0])

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng if rng is not None else self.rng
        theta = rng.uniform(-math.pi, math.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        self._obs = self.observation(theta, theta_dot)
        return self.state

    def set_state(self, state) -> None:
        obs = np.asarray(state, dtype=np.float64)
        if obs.shape != (3,) or not np.all(np.isfinite(obs)):
            raise ValueError(f"invalid pendulum state {state!r}")
        if abs(math.hypot(obs[0], obs[1]) - 1.0) > 1e-9:
            raise ValueError("pendulum state must have unit-norm (cos, sin) components")
        if abs(obs[2]) > MAX_SPEED:
            raise ValueError(f"angular velocity {obs[2]} exceeds ±{MAX_SPEED}")
        self._obs = obs.copy()

    def angular_acceleration(self, theta: float, u: float) -> float:
        m, l = self.mass, self.length
        return -3.0 * GRAVITY / (2.0 * l) * math.sin(theta + math.pi) + 3.0 / (m * l * l) * u

    def step(self, action, rng: np.random.Generator | None = None) -> StepResult:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (1,):
            raise ValueError(f"pendulum expects a 1-d action, got shape {np.shape(action)}")
        u = float(np.clip(a[0], -MAX_TORQUE, MAX_TORQUE))
        theta = self.theta
        theta_dot = float(self._obs[2])
        reward = -(theta ** 2 + 0.1 * theta_dot ** 2 + 0.001 * u ** 2)
        new_dot = min(max(theta_dot + self.angular_acceleration(theta, u) * DT, -MAX_SPEED), MAX_SPEED)
        new_theta = theta + new_dot * DT
        self._obs = self.observation(new_theta, new_dot)
        return StepResult(self.state, reward, False)

    def is_terminal_state(self, state) -> bool:
        return False

    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-MAX_TORQUE, MAX_TORQUE, size=1)


def chain_base_kernel(n_states: int = CHAIN_STATES) -> np.ndarray:
    """Slippery chain: intended move 0.8, stay 0.1, opposite 0.1; both ends absorb."""
    T = np.zeros((n_states, 2, n_states))
    last = n_states - 1
    for s in range(n_states):
        if s in (0, last):
            T[s, :, s] = 1.0
            continue
        for a, step in ((0, -1), (1, 1)):
            T[s, a, s + step] += 0.8
            T[s, a, s] += 0.1
            T[s, a, s - step] += 0.1
    return T


class ChainWorld:
    """Tabular chain with a penalising cliff at state 0 and a rewarding goal at the far end.

    Actions are 1-d reals; negative means "left", non-negative means "right".
    Observations are one-hot state indicators.
    """

    kind = "chainworld"
    act_dim = 1
    action_bound = 1.0
    horizon = CHAIN_MAX_STEPS

    def __init__(self, spec: DynamicsSpec = IDENTITY, seed: int | None = None, n_states: int = CHAIN_STATES):
        self.spec = spec
        self.n_states = n_states
        self.obs_dim = n_states
        self.absorbing = (0, n_states - 1)
        base = chain_base_kernel(n_states)
        k = spec.kernel_mix
        self.kernel = base if k == 0.0 else (1.0 - k) * base + k / n_states
        bonus = np.full(n_states, CHAIN_STEP_REWARD)
        bonus[0] = CHAIN_CLIFF_REWARD
        bonus[-1] = CHAIN_GOAL_REWARD
        self.rewards = self.kernel @ bonus
        self.rewards[list(self.absorbing)] = 0.0
        self._cdf = np.cumsum(self.kernel, axis=2)
        self._cdf[..., -1] = 1.0
        self.rng = np.random.default_rng(seed)
        self.index = 1

    @property
    def state(self) -> np.ndarray:
        return self.one_hot(self.index)

    def one_hot(self, index: int) -> np.ndarray:
        obs = np.zeros(self.n_states)
        obs[index] = 1.0
        return obs

    @staticmethod
    def discrete_action(action) -> int:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (1,):
            raise ValueError(f"chainworld expects a 1-d action, got shape {np.shape(action)}")
        return int(a[0] >= 0.0)

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng if rng is not None else self.rng
        self.index = int(rng.integers(1, self.n_states - 1))
        return self.state

    def state_index(self, state) -> int:
        if np.isscalar(state) or np.ndim(state) == 0:
            index = int(state)
        else:
            obs = np.asarray(state, dtype=np.float64)
            if obs.shape != (self.n_states,) or not np.all(np.isfinite(obs)):
                raise ValueError(f"invalid chainworld observation of shape {obs.shape}")
            index = int(np.argmax(obs))
            if obs[index] != 1.0 or np.count_nonzero(obs) != 1:
                raise ValueError("chainworld observation must be one-hot")
        if not 0 <= index < self.n_states:
            raise ValueError(f"state index {index} outside [0, {self.n_states})")
        return index

    def set_state(self, state) -> None:
        self.index = self.state_index(state)

    def step(self, action, rng: np.random.Generator | None = None) -> StepResult:
        a = self.discrete_action(action)
        rng = rng if rng is not None else self.rng
        s = self.index
        nxt = int(np.searchsorted(self._cdf[s, a], rng.random(), side="right"))
        self.index = min(nxt, self.n_states - 1)
        return StepResult(self.state, float(self.rewards[s, a]), self.index in self.absorbing)

    def is_terminal_state(self, state) -> bool:
        return self.state_index(state) in self.absorbing

    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([1.0 if rng.random() < 0.5 else -1.0])


ENV_KINDS = {"pendulum": Pendulum, "chainworld": ChainWorld}


def make_env(kind: str, spec: DynamicsSpec = IDENTITY, seed: int | None = None):
    try:
        cls = ENV_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown environment kind {kind!r}") from None
    if not isinstance(spec, DynamicsSpec):
        raise TypeError("spec must be a DynamicsSpec")
    return cls(spec, seed=seed)


def step(env, state, action) -> StepResult:
    """Teleport ``env`` to ``state`` and apply ``action``."""
    env.set_state(state)
    return env.step(action)


def set_state(env, state) -> None:
    env.set_state(state)


def exact_kernel(env) -> tuple[np.ndarray, np.ndarray]:
    """Transition tensor T[s, a, s'] and reward table R[s, a] used by chainworld's sampler."""
    if not isinstance(env, ChainWorld):
        raise TypeError("exact_kernel is only defined for tabular environments")
    return env.kernel, env.rewards
