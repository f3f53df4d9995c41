"""Conservative policy evaluation over mixed real/synthetic data, and policy improvement.

One update path serves three algorithms, selected by ``TrainConfig.source``:

* ``simulator``     -- rollouts from a dynamics-mismatched simulator (COSBO)
* ``learned_model`` -- rollouts from a fitted one-step ensemble (COMBO-style)
* ``none``          -- no synthetic data; penalised pairs use dataset states (CQL-style)
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .datakit import OfflineDataset, Transitions, sample_batch
from .diffkit import Adam, QFunction, StochasticPolicy, grad, mean, minimum, mul, rows, square, sub
from .diffkit import sum as tsum
from .envkit import IDENTITY, make_env
from .rolloutkit import (SCHEDULES, DatasetResampleSource, LearnedModelSource, RolloutSource, SimulatorSource,
                         SyntheticBuffer, fit_model)

SOURCES = ("simulator", "learned_model", "none")
RHO_STATES = ("next", "start")


@dataclass
class TrainConfig:
    env_kind: str = "pendulum"
    beta: float = 1.0
    f: float = 0.5
    horizon: int = 1
    gamma: float = 0.99
    entropy_weight: float = 0.2
    q_lr: float = 3e-4
    pi_lr: float = 3e-4
    tau: float = 0.005
    batch_size: int = 256
    gradient_steps_per_iter: int = 100
    rollout_batch: int = 128
    source: str = "simulator"
    tier: str = "medium"
    ensemble_size: int = 4
    model_epochs: int = 30
    rollout_action_schedule: str = "dataset_first"
    rho_states: str = "next"
    buffer_capacity: int = 0
    hidden: int = 64
    twin: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source: expected one of {SOURCES}, got {self.source!r}")
        if self.source == "none":
            self.f = 1.0
        if self.rollout_action_schedule not in SCHEDULES:
            raise ValueError(f"rollout_action_schedule: expected one of {SCHEDULES}")
        if self.rho_states not in RHO_STATES:
            raise ValueError(f"rho_states: expected one of {RHO_STATES}")
        if self.beta < 0:
            raise ValueError("beta: must be non-negative")
        if not 0.0 <= self.f <= 1.0:
            raise ValueError("f: must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma: must lie in (0, 1)")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight: must be non-negative")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau: must lie in (0, 1]")
        for key in ("q_lr", "pi_lr"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key}: must be positive")
        for key in ("horizon", "batch_size", "gradient_steps_per_iter", "rollout_batch", "ensemble_size",
                    "hidden"):
            if int(getattr(self, key)) < 1:
                raise ValueError(f"{key}: must be a positive integer")
        if self.buffer_capacity <= 0:
            self.buffer_capacity = 50 * self.batch_size

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CriticState:
    critic: QFunction
    target: QFunction
    optimizer: Adam


@dataclass
class ActorState:
    policy: StochasticPolicy
    optimizer: Adam


def init_agent(cfg: TrainConfig, obs_dim: int, act_dim: int, action_bound: float,
               rng: np.random.Generator) -> tuple[CriticState, ActorState]:
    hidden = (cfg.hidden, cfg.hidden)
    critic = QFunction(obs_dim, act_dim, hidden, rng, twin=cfg.twin)
    policy = StochasticPolicy(obs_dim, act_dim, action_bound, hidden, rng)
    return (CriticState(critic, critic.copy(), Adam(critic.params, lr=cfg.q_lr)),
            ActorState(policy, Adam(policy.params, lr=cfg.pi_lr)))


def bellman_target(critic_target: QFunction, policy: StochasticPolicy, batch: Transitions, gamma: float,
                   entropy_weight: float, rng: np.random.Generator) -> np.ndarray:
    """Soft one-sample backup r + γ(1 - done)(min Q'(s', a') - α log π(a'|s')), a' ~ π(.|s')."""
    next_actions, next_logp = policy.sample(batch.next_states, rng)
    q_next = critic_target.min_value(batch.next_states, next_actions)
    alive = 1.0 - batch.terminals.astype(np.float64)
    return batch.rewards + gamma * alive * (q_next - entropy_weight * next_logp)


def mix_batches(real: Transitions, synth: Transitions | None, f: float, rng: np.random.Generator) -> tuple[
        Transitions, np.ndarray]:
    """Per-element Bernoulli(f) choice between the real and synthetic row; returns (batch, took_real)."""
    take_real = rng.random(len(real)) < f
    if take_real.all():
        return real, take_real
    if synth is None or len(synth) == 0:
        raise ValueError("synthetic batch is empty but f < 1 requires synthetic samples")
    if len(synth) != len(real):
        raise ValueError("real and synthetic batches must be the same size")
    pick = take_real[:, None]
    mixed = Transitions(np.where(pick, real.states, synth.states), np.where(pick, real.actions, synth.actions),
                        np.where(take_real, real.rewards, synth.rewards),
                        np.where(pick, real.next_states, synth.next_states),
                        np.where(take_real, real.terminals, synth.terminals), real.source)
    return mixed, take_real


def rho_states(cfg: TrainConfig, real: Transitions, synth: Transitions | None) -> np.ndarray:
    """States of the penalised distribution: simulator-visited states, or dataset states without a source."""
    if cfg.source == "none" or synth is None or len(synth) == 0:
        return real.states
    return synth.next_states if cfg.rho_states == "next" else synth.states


@dataclass
class LossInfo:
    loss: float
    q_real_mean: float
    q_rho_mean: float
    bellman_mse: float


def conservative_q_loss(critic: QFunction, critic_target: QFunction, policy: StochasticPolicy,
                        real_batch: Transitions, synth_batch: Transitions | None, cfg: TrainConfig,
                        rng: np.random.Generator) -> tuple[LossInfo, list[np.ndarray]]:
    """β(E_ρ[Q] - E_D[Q]) + ½ E_{d_f}[(Q - y)²] summed over the twin critics.

    Generator draws, in order: π-actions at the ρ states, the Bernoulli(f)
    mixing mask, then the a' samples of the backup.
    """
    s_rho = rho_states(cfg, real_batch, synth_batch)
    a_rho, _ = policy.sample(s_rho, rng)
    mixed, _ = mix_batches(real_batch, synth_batch, cfg.f, rng)
    y = bellman_target(critic_target, policy, mixed, cfg.gamma, cfg.entropy_weight, rng)[:, None]

    n_rho, n_real = len(s_rho), len(real_batch)
    states = np.concatenate([s_rho, real_batch.states, mixed.states])
    actions = np.concatenate([a_rho, real_batch.actions, mixed.actions])
    lo, hi = n_rho, n_rho + n_real
    stash = {}

    def build():
        total = None
        q_all = critic(states, actions)
        for q in q_all:
            penalty = mul(sub(mean(rows(q, 0, lo)), mean(rows(q, lo, hi))), cfg.beta)
            bellman = mul(mean(square(sub(rows(q, hi, len(states)), y))), 0.5)
            term = penalty + bellman
            total = term if total is None else total + term
        stash["q"] = np.min([q.value[:, 0] for q in q_all], axis=0)
        stash["bellman"] = np.mean([np.mean((q.value[hi:, 0] - y[:, 0]) ** 2) for q in q_all])
        return total

    loss, grads = grad(build, critic.params)
    q = stash["q"]
    info = LossInfo(loss, float(q[lo:hi].mean()), float(q[:lo].mean()), float(stash["bellman"]))
    return info, grads


def policy_loss(policy: StochasticPolicy, critic: QFunction, states: np.ndarray, entropy_weight: float,
                rng: np.random.Generator) -> tuple[float, list[np.ndarray]]:
    """mean(α log π(a|s) - min Q(s, a)) with a reparameterised; gradients for the actor only."""
    noise = rng.standard_normal((len(states), policy.act_dim))

    def build():
        actions, logp = policy.rsample(states, noise)
        qs = critic(states, actions, frozen=True)
        q = qs[0] if len(qs) == 1 else minimum(qs[0], qs[1])
        return mean(sub(mul(logp, entropy_weight), tsum(q, axis=1)))

    return grad(build, policy.params)


# sources ----------------------------------------------------------------------


def build_source(cfg: TrainConfig, dataset: OfflineDataset, rng: np.random.Generator) -> RolloutSource | None:
    if cfg.source == "none":
        return None
    if cfg.source == "simulator":
        return SimulatorSource(cfg.env_kind, tier=cfg.tier)
    return fit_model(dataset, K=cfg.ensemble_size, epochs=cfg.model_epochs, rng=rng)


# training -----------------------------------------------------------------------


METRIC_COLUMNS = ("iter", "eval_return_mean", "eval_return_std", "q_loss", "pi_loss", "q_real_mean",
                  "q_synth_mean", "conservatism_gap", "buffer_size", "wall_ms")


@dataclass
class TrainResult:
    policy: StochasticPolicy
    critic: QFunction
    metrics: list[dict] = field(default_factory=list)
    source: RolloutSource | None = None


def train(cfg: TrainConfig, dataset: OfflineDataset, iterations: int, eval_every: int = 0,
          eval_episodes: int = 5, eval_seed: int = 10_000, source: RolloutSource | None = None,
          record_time: bool = True, progress=None) -> TrainResult:
    """Offline training loop; ``source`` overrides the one implied by ``cfg``.

    Each iteration: (1) roll out ``rollout_batch`` dataset starts through the
    source into the synthetic buffer, (2) take ``gradient_steps_per_iter``
    critic steps with target soft-updates, (3) the same number of actor steps.
    Metrics are recorded every ``eval_every`` iterations and after the last.
    """
    if dataset.env_kind != cfg.env_kind:
        raise ValueError(f"dataset env {dataset.env_kind!r} does not match config env {cfg.env_kind!r}")
    rng = np.random.default_rng(cfg.seed)
    env = make_env(cfg.env_kind, IDENTITY)
    crit, actor = init_agent(cfg, dataset.obs_dim, dataset.act_dim, env.action_bound, rng)
    if source is None:
        source = build_source(cfg, dataset, rng)
    buffer = SyntheticBuffer(cfg.buffer_capacity, dataset.obs_dim, dataset.act_dim) if source else None
    result = TrainResult(actor.policy, crit.critic, source=source)
    t0 = time.perf_counter()
    window = {"q_loss": [], "pi_loss": [], "q_real": [], "q_rho": []}

    for it in range(1, iterations + 1):
        if source is not None:
            starts = sample_batch(dataset, cfg.rollout_batch, rng)
            synth = source.generate(starts, actor.policy, cfg.horizon, rng, cfg.rollout_action_schedule)
            if len(synth):
                buffer.push(synth)

        for _ in range(cfg.gradient_steps_per_iter):
            real = sample_batch(dataset, cfg.batch_size, rng)
            synth = buffer.sample(cfg.batch_size, rng) if buffer is not None and len(buffer) else None
            info, grads = conservative_q_loss(crit.critic, crit.target, actor.policy, real, synth, cfg, rng)
            crit.optimizer.step(grads)
            crit.target.soft_update_from(crit.critic, cfg.tau)
            window["q_loss"].append(info.loss)
            window["q_real"].append(info.q_real_mean)
            window["q_rho"].append(info.q_rho_mean)

        for _ in range(cfg.gradient_steps_per_iter):
            if buffer is not None and len(buffer):
                synth = buffer.sample(cfg.batch_size, rng)
                states = synth.next_states if cfg.rho_states == "next" else synth.states
            else:
                states = sample_batch(dataset, cfg.batch_size, rng).states
            loss, grads = policy_loss(actor.policy, crit.critic, states, cfg.entropy_weight, rng)
            actor.optimizer.step(grads)
            window["pi_loss"].append(loss)

        if (eval_every and it % eval_every == 0) or it == iterations:
            if eval_episodes > 0:
                ev_mean, ev_std, _ = evaluate(actor.policy, env, eval_episodes, eval_seed)
            else:
                ev_mean = ev_std = float("nan")
            q_real, q_rho = float(np.mean(window["q_real"])), float(np.mean(window["q_rho"]))
            row = {"iter": it, "eval_return_mean": ev_mean, "eval_return_std": ev_std,
                   "q_loss": float(np.mean(window["q_loss"])), "pi_loss": float(np.mean(window["pi_loss"])),
                   "q_real_mean": q_real, "q_synth_mean": q_rho, "conservatism_gap": q_real - q_rho,
                   "buffer_size": len(buffer) if buffer is not None else 0,
                   "wall_ms": round((time.perf_counter() - t0) * 1000.0) if record_time else 0}
            result.metrics.append(row)
            window = {k: [] for k in window}
            if progress:
                progress(row)
    return result


def evaluate(policy, env, n_episodes: int, seed: int) -> tuple[float, float, np.ndarray]:
    """Deterministic (mean-action) returns in the unperturbed environment."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    if isinstance(env, str):
        env = make_env(env, IDENTITY)
    if not env.spec.is_identity:
        raise ValueError("evaluation must use the unperturbed target environment")
    rng = np.random.default_rng(seed)
    envs = [make_env(env.kind, IDENTITY) for _ in range(n_episodes)]
    for e in envs:
        e.rng = np.random.default_rng(rng.integers(2 ** 63))
    states = np.stack([e.reset() for e in envs])
    returns = np.zeros(n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    for _ in range(env.horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        actions = policy.mean_action(states[idx])
        for j, i in enumerate(idx):
            r = envs[i].step(actions[j])
            returns[i] += r.reward
            states[i] = r.next_state
            if r.terminal:
                alive[i] = False
    return float(returns.mean()), float(returns.std()), returns


# online expert training (used to build the "medium" behaviour policy) ---------------------


@dataclass
class OnlineResult:
    policy: StochasticPolicy
    checkpoints: list[tuple[int, float, StochasticPolicy]]


def train_online(cfg: TrainConfig, env_steps: int, eval_every: int = 1000, eval_episodes: int = 5,
                 start_steps: int = 1000, eval_seed: int = 20_000, progress=None) -> OnlineResult:
    """Unpenalised soft actor-critic in the target environment, one update per environment step.

    Snapshots the policy every ``eval_every`` steps alongside its evaluation return.
    """
    online_cfg = cfg.replace(beta=0.0, source="none", f=1.0)
    rng = np.random.default_rng(cfg.seed)
    env = make_env(cfg.env_kind, IDENTITY)
    env.rng = rng
    crit, actor = init_agent(online_cfg, env.obs_dim, env.act_dim, env.action_bound, rng)
    obs_dim, act_dim = env.obs_dim, env.act_dim
    store = {"s": np.zeros((env_steps, obs_dim)), "a": np.zeros((env_steps, act_dim)), "r": np.zeros(env_steps),
             "s2": np.zeros((env_steps, obs_dim)), "d": np.zeros(env_steps, dtype=bool)}
    checkpoints = []
    state = env.reset(rng)
    t_ep = 0
    for t in range(env_steps):
        if t < start_steps:
            action = env.random_action(rng)
        else:
            action = actor.policy.sample(state[None], rng)[0][0]
        r = env.step(action)
        store["s"][t], store["a"][t], store["r"][t] = state, action, r.reward
        store["s2"][t], store["d"][t] = r.next_state, r.terminal
        state = r.next_state
        t_ep += 1
        if r.terminal or t_ep >= env.horizon:
            state = env.reset(rng)
            t_ep = 0
        if t + 1 >= min(start_steps, 256):
            idx = rng.integers(0, t + 1, size=online_cfg.batch_size)
            batch = Transitions(store["s"][idx], store["a"][idx], store["r"][idx], store["s2"][idx], store["d"][idx])
            _, grads = conservative_q_loss(crit.critic, crit.target, actor.policy, batch, None, online_cfg, rng)
            crit.optimizer.step(grads)
            crit.target.soft_update_from(crit.critic, online_cfg.tau)
            _, grads = policy_loss(actor.policy, crit.critic, batch.states, online_cfg.entropy_weight, rng)
            actor.optimizer.step(grads)
        if (t + 1) % eval_every == 0:
            ev, _, _ = evaluate(actor.policy, cfg.env_kind, eval_episodes, eval_seed)
            checkpoints.append((t + 1, ev, actor.policy.copy()))
            if progress:
                progress(t + 1, ev)
    return OnlineResult(actor.policy, checkpoints)


__all__ = ["TrainConfig", "bellman_target", "conservative_q_loss", "policy_loss", "train", "evaluate",
           "train_online", "mix_batches", "rho_states", "METRIC_COLUMNS", "LearnedModelSource",
           "DatasetResampleSource"]
