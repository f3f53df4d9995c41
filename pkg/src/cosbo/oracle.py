"""Exact tabular ground truth on the chain world.

Tables are indexed ``[s, a]``; kernels ``[s, a, s']``; policies are
row-stochastic ``[s, a]`` matrices.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .envkit import ChainWorld, DynamicsSpec, exact_kernel


class CoverageError(ValueError):
    """A penalised or data-supported pair has zero weight in the Bellman mixture."""


def check_policy(policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > 1e-12:
        raise ValueError("policy rows must be probability vectors")
    return policy


def pair_transition(kernel: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """P[(s,a), (s',a')] = T(s'|s,a) π(a'|s')."""
    S, A, _ = kernel.shape
    return np.einsum("sat,tb->satb", kernel, policy).reshape(S * A, S * A)


def exact_policy_q(kernel, rewards, policy, gamma: float) -> np.ndarray:
    """Solve Q = r + γ P^π Q directly."""
    assert 0.0 < gamma < 1.0, "the evaluation system is singular unless gamma < 1"
    kernel = np.asarray(kernel, dtype=np.float64)
    policy = check_policy(policy)
    S, A, _ = kernel.shape
    P = pair_transition(kernel, policy)
    r = np.asarray(rewards, dtype=np.float64).reshape(S * A)
    q = np.linalg.solve(np.eye(S * A) - gamma * P, r)
    residual = np.max(np.abs(q - (r + gamma * P @ q)))
    assert residual < 1e-10, f"linear solve residual {residual:.3e}"
    return q.reshape(S, A)


def bellman_backup(q, kernel, rewards, policy, gamma):
    v = (q * policy).sum(axis=1)
    return rewards + gamma * kernel @ v


def penalty_table(rho, d, d_f) -> np.ndarray:
    """(ρ - d) / d_f with 0/0 := 0; raises when a supported pair has no Bellman weight."""
    rho, d, d_f = (np.asarray(x, dtype=np.float64) for x in (rho, d, d_f))
    uncovered = (d_f <= 0) & ((rho > 0) | (d > 0))
    if np.any(uncovered):
        pairs = [tuple(int(i) for i in p) for p in np.argwhere(uncovered)]
        raise CoverageError(f"d_f is zero on penalised/data pairs {pairs}")
    out = np.zeros_like(d_f)
    ok = d_f > 0
    out[ok] = (rho[ok] - d[ok]) / d_f[ok]
    return out


def exact_conservative_fixed_point(kernel, d, rho, d_f, rewards, policy, beta: float, gamma: float,
                                   iters: int = 1_000_000, tol: float = 1e-10) -> np.ndarray:
    """Iterate Q <- B^π Q - β (ρ - d) / d_f to its fixed point.

    That update zeroes the per-pair derivative of
    β(ρ Q - d Q) + ½ d_f (Q - B^π Q_k)².  Iteration stops once the
    contraction bound γ/(1-γ)·‖ΔQ‖∞ drops below ``tol``.
    """
    policy = check_policy(policy)
    kernel = np.asarray(kernel, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    shift = beta * penalty_table(rho, d, d_f)
    q = np.zeros_like(rewards)
    scale = gamma / (1.0 - gamma)
    for _ in range(iters):
        new = bellman_backup(q, kernel, rewards, policy, gamma) - shift
        change = np.max(np.abs(new - q))
        q = new
        if scale * change < tol:
            return q
    raise RuntimeError(f"fixed-point iteration did not converge in {iters} steps")


def visitation_distribution(kernel, policy, initial_dist, gamma: float) -> np.ndarray:
    """Discounted state-action occupancy d(s) π(a|s) with d(s) = (1-γ) Σ_t γ^t P(s_t = s)."""
    policy = check_policy(policy)
    P = np.einsum("sa,sat->st", policy, np.asarray(kernel, dtype=np.float64))
    S = P.shape[0]
    mu0 = np.asarray(initial_dist, dtype=np.float64)
    d_s = np.linalg.solve(np.eye(S) - gamma * P.T, (1.0 - gamma) * mu0)
    return d_s[:, None] * policy


def monte_carlo_q(kernel, rewards, policy, gamma: float, state: int, action: int, n_rollouts: int,
                  rng: np.random.Generator, horizon: int | None = None,
                  terminal_states=()) -> tuple[float, float]:
    """Mean and standard error of sampled discounted returns from (state, action)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    S, A, _ = kernel.shape
    if horizon is None:
        horizon = int(np.ceil(np.log(1e-12) / np.log(gamma)))
    kernel_cdf = np.cumsum(kernel, axis=2)
    kernel_cdf[..., -1] = 1.0
    policy_cdf = np.cumsum(policy, axis=1)
    policy_cdf[:, -1] = 1.0
    # absorbing zero-reward states contribute nothing further, so rollouts stop there
    terminal = np.zeros(S, dtype=bool)
    terminal[list(terminal_states)] = True
    self_loop = np.all(rewards == 0, axis=1) & np.all(kernel[np.arange(S), :, np.arange(S)] == 1.0, axis=1)
    terminal |= self_loop
    idx = np.arange(n_rollouts)
    s = np.full(n_rollouts, state)
    a = np.full(n_rollouts, action)
    returns = np.zeros(n_rollouts)
    discount = 1.0
    for _ in range(horizon):
        if len(idx) == 0:
            break
        returns[idx] += discount * rewards[s, a]
        u = rng.random(len(idx))
        s = np.minimum((u[:, None] > kernel_cdf[s, a]).sum(axis=1), S - 1)
        keep = ~terminal[s]
        idx, s = idx[keep], s[keep]
        u = rng.random(len(idx))
        a = np.minimum((u[:, None] > policy_cdf[s]).sum(axis=1), A - 1)
        discount *= gamma
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(n_rollouts))


# reference instance ---------------------------------------------------------------


@dataclass
class ChainInstance:
    """A fully specified conservative-evaluation problem on the chain world.

    ``kernel`` and ``rewards`` are the d_f-weighted mixture of the target and
    simulator transitions, which is what the squared Bellman term averages.
    """

    target_kernel: np.ndarray
    sim_kernel: np.ndarray
    target_rewards: np.ndarray
    sim_rewards: np.ndarray
    kernel: np.ndarray
    rewards: np.ndarray
    policy: np.ndarray
    behavior: np.ndarray
    d: np.ndarray
    rho: np.ndarray
    d_mu: np.ndarray
    d_f: np.ndarray
    f: float
    gamma: float


def chain_instance(kernel_mix: float = 0.3, f: float = 0.5, gamma: float = 0.9, p_right: float = 0.9,
                   n_states: int = 12) -> ChainInstance:
    """Data from a uniform behaviour policy in the target chain; ρ from ``policy`` in the simulator chain."""
    target = ChainWorld(DynamicsSpec(), n_states=n_states)
    sim = ChainWorld(DynamicsSpec(kernel_mix=kernel_mix), n_states=n_states)
    T, R = exact_kernel(target)
    Ts, Rs = exact_kernel(sim)
    S = n_states
    behavior = np.full((S, 2), 0.5)
    policy = np.tile([1.0 - p_right, p_right], (S, 1))
    mu0 = np.zeros(S)
    mu0[1:-1] = 1.0 / (S - 2)
    d = visitation_distribution(T, behavior, mu0, gamma)
    rho = visitation_distribution(Ts, policy, mu0, gamma)
    d_mu = visitation_distribution(Ts, behavior, mu0, gamma)
    d_f = f * d + (1.0 - f) * d_mu
    w_real = np.divide(f * d, d_f, out=np.zeros_like(d_f), where=d_f > 0)
    kernel = w_real[..., None] * T + (1.0 - w_real)[..., None] * Ts
    rewards = w_real * R + (1.0 - w_real) * Rs
    return ChainInstance(T, Ts, R, Rs, kernel, rewards, policy, behavior, d, rho, d_mu, d_f, f, gamma)


def conservative_q(inst: ChainInstance, beta: float, rho=None) -> np.ndarray:
    rho = inst.rho if rho is None else rho
    return exact_conservative_fixed_point(inst.kernel, inst.d, rho, inst.d_f, inst.rewards, inst.policy,
                                          beta, inst.gamma)


# verification suite ----------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name, fn) -> Check:
    t0 = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # reported, not raised: verify prints every property
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return Check(name, bool(passed), detail, time.perf_counter() - t0)


BETA_GRID = (0.0, 0.5, 1.0, 2.0, 5.0)


def check_residual(inst: ChainInstance):
    q = exact_policy_q(inst.kernel, inst.rewards, inst.policy, inst.gamma)
    res = np.max(np.abs(q - bellman_backup(q, inst.kernel, inst.rewards, inst.policy, inst.gamma)))
    return res < 1e-10, f"residual {res:.2e}"


def check_monte_carlo(inst: ChainInstance, n_rollouts: int = 1_000_000, seed: int = 0,
                      pairs=((3, 1), (6, 0), (9, 1))):
    T, R, pi = inst.target_kernel, inst.target_rewards, inst.policy
    q = exact_policy_q(T, R, pi, inst.gamma)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for s, a in pairs:
        est, se = monte_carlo_q(T, R, pi, inst.gamma, s, a, n_rollouts, rng)
        worst = max(worst, abs(est - q[s, a]) / se)
    return worst < 3.0, f"max |MC - exact| = {worst:.2f} standard errors over {len(pairs)} pairs"


def check_beta_zero(inst: ChainInstance):
    q = exact_policy_q(inst.kernel, inst.rewards, inst.policy, inst.gamma)
    err = np.max(np.abs(conservative_q(inst, 0.0) - q))
    return err < 1e-9, f"max error {err:.2e}"


def check_rho_equals_d(inst: ChainInstance):
    q = exact_policy_q(inst.kernel, inst.rewards, inst.policy, inst.gamma)
    err = np.max(np.abs(conservative_q(inst, 2.0, rho=inst.d) - q))
    return err < 1e-9, f"max error {err:.2e}"


def check_monotone_in_beta(inst: ChainInstance):
    means = [float((inst.rho * conservative_q(inst, b)).sum()) for b in BETA_GRID]
    ok = all(b <= a for a, b in zip(means, means[1:]))
    return ok, "E_rho[Q] over beta grid: " + ", ".join(f"{m:.4f}" for m in means)


def check_pushed_down(inst: ChainInstance):
    q0 = conservative_q(inst, 0.0)
    mask = inst.rho > inst.d
    bad = []
    for b in BETA_GRID[1:]:
        qb = conservative_q(inst, b)
        if not np.all(qb[mask] < q0[mask]):
            bad.append(b)
    return not bad, f"{int(mask.sum())} pairs with rho > d; failing betas: {bad or 'none'}"


def check_visitation(inst: ChainInstance):
    total = abs(inst.rho.sum() - 1.0)
    return total < 1e-10, f"|sum - 1| = {total:.2e}"


def run_verification(monte_carlo_rollouts: int = 1_000_000) -> list[Check]:
    inst = chain_instance()
    checks = [
        ("exact_policy_q residual", lambda: check_residual(inst)),
        ("exact_policy_q vs Monte-Carlo", lambda: check_monte_carlo(inst, monte_carlo_rollouts)),
        ("fixed point with beta=0 equals exact_policy_q", lambda: check_beta_zero(inst)),
        ("fixed point with rho=d equals exact_policy_q", lambda: check_rho_equals_d(inst)),
        ("E_rho[Q] non-increasing in beta", lambda: check_monotone_in_beta(inst)),
        ("pairs with rho > d pushed below beta=0 value", lambda: check_pushed_down(inst)),
        ("visitation distribution normalised", lambda: check_visitation(inst)),
    ]
    return [_timed(name, fn) for name, fn in checks]
