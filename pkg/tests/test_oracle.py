import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from cosbo.oracle import (BETA_GRID, CoverageError, bellman_backup, chain_instance, conservative_q,
                          exact_conservative_fixed_point, exact_policy_q, monte_carlo_q, penalty_table,
                          run_verification, visitation_distribution)


def random_mdp(seed, S=5, A=2):
    rng = np.random.default_rng(seed)
    T = rng.random((S, A, S)) ** 3
    T /= T.sum(axis=2, keepdims=True)
    R = rng.normal(size=(S, A))
    pi = rng.random((S, A))
    pi /= pi.sum(axis=1, keepdims=True)
    return T, R, pi


def test_zero_rewards_give_zero_q():
    T, _, pi = random_mdp(0)
    np.testing.assert_array_equal(exact_policy_q(T, np.zeros((5, 2)), pi, 0.9), 0.0)


def test_single_absorbing_state_geometric_series():
    q = exact_policy_q(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones((1, 1)), 0.9)
    assert q[0, 0] == pytest.approx(10.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 0.98))
def test_exact_q_satisfies_bellman(seed, gamma):
    T, R, pi = random_mdp(seed)
    q = exact_policy_q(T, R, pi, gamma)
    assert np.max(np.abs(q - bellman_backup(q, T, R, pi, gamma))) < 1e-10


def test_random_instance_matches_monte_carlo():
    T, R, pi = random_mdp(3, S=4)
    q = exact_policy_q(T, R, pi, 0.8)
    est, se = monte_carlo_q(T, R, pi, 0.8, 2, 1, 200_000, np.random.default_rng(0))
    assert abs(est - q[2, 1]) < 3 * se


def test_policy_validation():
    T, R, _ = random_mdp(0)
    with pytest.raises(ValueError, match="probability"):
        exact_policy_q(T, R, np.full((5, 2), 0.6), 0.9)


def test_closed_form_update_is_the_per_pair_minimiser():
    """d/dQ [beta (rho Q - d Q) + 1/2 d_f (Q - y)^2] = 0 gives Q = y - beta (rho - d) / d_f."""
    q, y, beta, rho, d, d_f = sp.symbols("Q y beta rho d d_f", real=True)
    d_f = sp.Symbol("d_f", positive=True)
    objective = beta * (rho * q - d * q) + sp.Rational(1, 2) * d_f * (q - y) ** 2
    (solution,) = sp.solve(sp.diff(objective, q), q)
    assert sp.simplify(solution - (y - beta * (rho - d) / d_f)) == 0
    assert sp.diff(objective, q, 2) == d_f  # convex, so the stationary point is the minimum


def test_fixed_point_matches_closed_form_step():
    inst = chain_instance()
    q = conservative_q(inst, 1.0)
    again = bellman_backup(q, inst.kernel, inst.rewards, inst.policy, inst.gamma) - penalty_table(
        inst.rho, inst.d, inst.d_f)
    np.testing.assert_allclose(again, q, atol=1e-10)


def test_fixed_point_is_linear_solve_of_shifted_rewards():
    inst = chain_instance(kernel_mix=0.5, f=0.3)
    shift = 2.0 * penalty_table(inst.rho, inst.d, inst.d_f)
    direct = exact_policy_q(inst.kernel, inst.rewards - shift, inst.policy, inst.gamma)
    np.testing.assert_allclose(conservative_q(inst, 2.0), direct, atol=1e-9)


@pytest.mark.parametrize("mix,f", [(0.0, 0.5), (0.3, 0.5), (0.6, 0.2), (0.3, 1.0)])
def test_beta_zero_and_rho_equals_d(mix, f):
    inst = chain_instance(kernel_mix=mix, f=f)
    exact = exact_policy_q(inst.kernel, inst.rewards, inst.policy, inst.gamma)
    assert np.max(np.abs(conservative_q(inst, 0.0) - exact)) < 1e-9
    assert np.max(np.abs(conservative_q(inst, 3.0, rho=inst.d) - exact)) < 1e-9


def test_out_of_data_pair_pushed_down_and_data_pairs_up():
    inst = chain_instance()
    rho = np.zeros_like(inst.d)
    rho[5, 0] = 1.0  # a single pair the policy would visit more than the data does
    q0 = conservative_q(inst, 0.0, rho=rho)
    q1 = conservative_q(inst, 1.0, rho=rho)
    assert q1[5, 0] < q0[5, 0]
    # data-supported pairs away from the penalised one get the push-up term
    assert q1[9, 1] >= q0[9, 1] - 1e-12


@pytest.mark.parametrize("mix", [0.1, 0.3, 0.8])
def test_rho_weighted_q_non_increasing_in_beta(mix):
    inst = chain_instance(kernel_mix=mix)
    means = [(inst.rho * conservative_q(inst, b)).sum() for b in BETA_GRID]
    assert all(b <= a for a, b in zip(means, means[1:]))


def test_coverage_violation_reported():
    inst = chain_instance()
    d_f = inst.d_f.copy()
    d_f[4, 1] = 0.0
    with pytest.raises(CoverageError, match=r"\(4, 1\)"):
        exact_conservative_fixed_point(inst.kernel, inst.d, inst.rho, d_f, inst.rewards, inst.policy, 1.0, 0.9)


def test_visitation_examples():
    T, _, pi = random_mdp(1)
    mu0 = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
    myopic = visitation_distribution(T, pi, mu0, 1e-9)
    np.testing.assert_allclose(myopic, mu0[:, None] * pi, atol=1e-6)
    uni = visitation_distribution(np.full((4, 3, 4), 0.25), np.full((4, 3), 1 / 3), np.full(4, 0.25), 0.9)
    np.testing.assert_allclose(uni, 1 / 12, atol=1e-15)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_visitation_matches_truncated_series(seed):
    T, _, pi = random_mdp(seed)
    gamma = 0.9
    mu0 = np.random.default_rng(seed).dirichlet(np.ones(5))
    P = np.einsum("sa,sat->st", pi, T)
    total, p_t, g = np.zeros(5), mu0.copy(), 1.0
    for _ in range(10_000):
        total += g * p_t
        p_t = p_t @ P
        g *= gamma
    series = (1 - gamma) * total[:, None] * pi
    d = visitation_distribution(T, pi, mu0, gamma)
    np.testing.assert_allclose(d, series, atol=1e-8)
    assert abs(d.sum() - 1) < 1e-10


def test_chain_instance_consistency():
    inst = chain_instance()
    np.testing.assert_allclose(inst.kernel.sum(axis=2), 1.0, atol=1e-12)
    np.testing.assert_allclose(inst.d_f, inst.f * inst.d + (1 - inst.f) * inst.d_mu)
    assert abs(inst.rho.sum() - 1) < 1e-10 and abs(inst.d.sum() - 1) < 1e-10


def test_fixed_point_below_target_value_on_data_average():
    """Penalised estimate does not overestimate the true target-environment value on average over D."""
    inst = chain_instance()
    q_hat = conservative_q(inst, 1.0)
    q_true = exact_policy_q(inst.target_kernel, inst.target_rewards, inst.policy, inst.gamma)
    assert (inst.d * q_hat).sum() <= (inst.d * q_true).sum()


def test_run_verification_small():
    checks = run_verification(monte_carlo_rollouts=20_000)
    assert len(checks) == 7
    assert all(c.passed for c in checks), [c for c in checks if not c.passed]
