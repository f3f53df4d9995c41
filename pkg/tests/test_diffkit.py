import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosbo import diffkit as dk
from cosbo.diffkit import Adam, Mlp, QFunction, StochasticPolicy, Tensor, param

from oracles import central_difference, flat_fd, relative_error

@pytest.mark.parametrize("name,op,ref,domain", [
    ("tanh", dk.tanh, np.tanh, (-3, 3)),
    ("exp", dk.exp, np.exp, (-3, 3)),
    ("log", dk.log, np.log, (0.1, 3)),
    ("square", dk.square, np.square, (-3, 3)),
    ("relu", dk.relu, lambda v: np.maximum(v, 0), (0.05, 3)),
])
def test_unary_primitives_match_finite_differences(name, op, ref, domain):
    rng = np.random.default_rng(1)
    x = rng.uniform(*domain, size=(4, 3))
    if name == "relu":
        x *= rng.choice([-1, 1], size=x.shape)
    t = param(x)
    dk.sum(op(t)).backward()
    fd = central_difference(lambda v: ref(v).sum(), x)
    assert relative_error(t.grad, fd) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_broadcasting_binary_ops(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, m)), rng.normal(size=m)
    ta, tb = param(a), param(b)
    loss = dk.sum(dk.mul(dk.add(ta, tb), dk.sub(ta, dk.mul(tb, 2.0))))
    loss.backward()
    fa = central_difference(lambda v: ((v + b) * (v - 2 * b)).sum(), a)
    fb = central_difference(lambda v: ((a + v) * (a - 2 * v)).sum(), b)
    assert relative_error(ta.grad, fa) < 1e-7
    assert relative_error(tb.grad, fb) < 1e-7


def test_minimum_routes_gradient_to_smaller_argument():
    a, b = param([[1.0], [5.0]]), param([[3.0], [2.0]])
    dk.sum(dk.minimum(a, b)).backward()
    np.testing.assert_array_equal(a.grad, [[1.0], [0.0]])
    np.testing.assert_array_equal(b.grad, [[0.0], [1.0]])


def test_minimum_tie_goes_to_first_argument():
    a, b = param([2.0]), param([2.0])
    dk.sum(dk.minimum(a, b)).backward()
    assert a.grad[0] == 1.0 and b.grad[0] == 0.0


def test_structural_ops_carry_gradient_unchanged():
    x = param(np.arange(12.0).reshape(4, 3))
    y = param(np.ones((4, 2)))
    z = dk.concat(dk.columns(x, 1, 3), y)
    loss = dk.sum(dk.mul(dk.rows(z, 1, 3), 2.0))
    loss.backward()
    expected = np.zeros((4, 3))
    expected[1:3, 1:] = 2.0
    np.testing.assert_array_equal(x.grad, expected)
    np.testing.assert_array_equal(y.grad[1:3], 2.0)
    np.testing.assert_array_equal(y.grad[[0, 3]], 0.0)


def test_shared_subexpression_accumulates():
    x = param(np.array([1.5, -0.5]))
    s = dk.square(x)
    dk.sum(dk.add(s, s)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.value)


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        param(np.ones(3)).backward()


def test_constants_get_no_gradient():
    c = Tensor(np.ones(2))
    x = param(np.ones(2))
    dk.sum(dk.mul(c, x)).backward()
    assert c.grad is None and not c.requires_grad


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_mlp_gradient_random_networks(activation):
    rng = np.random.default_rng(7)
    for _ in range(5):
        widths = [int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 3))]
        net = Mlp(widths, rng, activation)
        x = rng.normal(size=(6, widths[0]))
        t = rng.normal(size=(6, widths[-1]))
        loss, grads = dk.grad(lambda: dk.mean(dk.square(dk.sub(net(x), t))), net.params)
        fd = flat_fd(net.params, lambda: float(np.mean((net.forward(x) - t) ** 2)))
        assert relative_error(np.concatenate([g.ravel() for g in grads]), fd) < 1e-6


def test_graph_and_numpy_paths_agree():
    rng = np.random.default_rng(3)
    net = Mlp([3, 8, 8, 2], rng, ["tanh", "relu"])
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(net(x).value, net.forward(x))
    # single rows may take a different BLAS path, so allow an ulp or two
    np.testing.assert_allclose(net.forward(x[0]), net.forward(x)[0], rtol=1e-12)


def test_mlp_rejects_wrong_width():
    net = Mlp([3, 4, 1])
    with pytest.raises(ValueError, match="width"):
        net.forward(np.ones((2, 2)))


def test_frozen_call_leaves_parameters_untouched():
    net = Mlp([2, 4, 1])
    x = param(np.ones((1, 2)))
    dk.sum(net(x, frozen=True)).backward()
    assert all(p.grad is None for p in net.params)
    assert x.grad is not None


def test_soft_update_is_polyak_average():
    rng = np.random.default_rng(0)
    a, b = Mlp([2, 3, 1], rng), Mlp([2, 3, 1], rng)
    before = a.flat()
    dk.soft_update(a, b, 0.25)
    np.testing.assert_allclose(a.flat(), 0.75 * before + 0.25 * b.flat())
    dk.soft_update(a, b, 1.0)
    np.testing.assert_array_equal(a.flat(), b.flat())


@pytest.mark.parametrize("tau", [0.0, -0.1, 1.5])
def test_soft_update_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        dk.soft_update(Mlp([1, 1]), Mlp([1, 1]), tau)


def test_soft_update_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        dk.soft_update(Mlp([1, 2, 1]), Mlp([1, 3, 1]), 0.5)


def test_adam_first_step_moves_by_learning_rate():
    p = param(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    opt.step([np.array([3.0, -0.5])])
    np.testing.assert_allclose(p.value, [0.9, -1.9], atol=1e-7)


def test_adam_minimises_quadratic():
    p = param(np.array([4.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.step([2 * p.value])
    assert abs(p.value[0]) < 1e-2


# policy ------------------------------------------------------------------


def test_policy_actions_within_bound_and_logp_consistent():
    rng = np.random.default_rng(0)
    pol = StochasticPolicy(3, 2, 2.0, (16, 16), rng)
    s = rng.normal(size=(500, 3))
    a, logp = pol.sample(s, rng)
    assert np.all(np.abs(a) < 2.0)
    np.testing.assert_allclose(pol.log_prob(s, a), logp, atol=1e-6)


def test_policy_density_integrates_to_one():
    """Quadrature of the squashed density over the action interval."""
    rng = np.random.default_rng(4)
    pol = StochasticPolicy(2, 1, 2.0, (8,), rng)
    for s in rng.normal(size=(3, 2)):
        # integrate in pre-squash coordinates so the tails are resolved
        u = np.linspace(-12, 12, 200_001)
        a = 2.0 * np.tanh(u)
        ok = np.abs(np.tanh(u)) < 1 - 1e-9
        dens = np.exp(pol.log_prob(np.repeat(s[None], ok.sum(), 0), a[ok, None]))
        jac = 2.0 * (1 - np.tanh(u[ok]) ** 2)
        mass = np.trapezoid(dens * jac, u[ok])
        assert mass == pytest.approx(1.0, abs=2e-3)


def test_rsample_matches_numpy_sampler():
    rng = np.random.default_rng(2)
    pol = StochasticPolicy(3, 2, 1.5, (8, 8), rng)
    s = rng.normal(size=(7, 3))
    noise = rng.standard_normal((7, 2))
    a_t, logp_t = pol.rsample(s, noise)
    mu, log_std = pol.distribution(s)
    a, logp = pol.sample_with_noise(mu, log_std, noise)
    np.testing.assert_allclose(a_t.value, a, rtol=1e-12)
    np.testing.assert_allclose(logp_t.value, logp, rtol=1e-12)


def test_log_std_is_clamped():
    pol = StochasticPolicy(1, 1, 1.0, (4,))
    for raw in (-1e3, 1e3):
        ls = pol._squash_log_std(np.array([raw]))[0]
        assert dk.LOG_STD_MIN <= ls <= dk.LOG_STD_MAX


def test_rsample_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    pol = StochasticPolicy(2, 2, 2.0, (5,), rng)
    s = rng.normal(size=(4, 2))
    noise = rng.standard_normal((4, 2))
    weights = rng.normal(size=(4, 2))

    def numeric():
        mu, ls = pol.distribution(s)
        a, lp = pol.sample_with_noise(mu, ls, noise)
        return float((a * weights).sum() + 0.3 * lp.sum())

    def build():
        a, lp = pol.rsample(s, noise)
        return dk.add(dk.sum(dk.mul(a, weights)), dk.mul(dk.sum(lp), 0.3))

    _, grads = dk.grad(build, pol.params)
    assert relative_error(np.concatenate([g.ravel() for g in grads]), flat_fd(pol.params, numeric)) < 1e-6


def test_qfunction_twin_and_min():
    rng = np.random.default_rng(0)
    q = QFunction(3, 1, (8,), rng)
    s, a = rng.normal(size=(5, 3)), rng.normal(size=(5, 1))
    each = q.each(s, a)
    assert each.shape == (2, 5)
    np.testing.assert_array_equal(q.min_value(s, a), each.min(axis=0))
    graph = q(s, a)
    np.testing.assert_allclose(graph[1].value[:, 0], each[1])
    assert len(QFunction(3, 1, (8,), rng, twin=False).critics) == 1


def test_qfunction_soft_update_from():
    rng = np.random.default_rng(0)
    q = QFunction(2, 1, (4,), rng)
    t = q.copy()
    for p in q.params:
        p.value = p.value + 1.0
    t.soft_update_from(q, 0.5)
    for pt, pq in zip(t.params, q.params):
        np.testing.assert_allclose(pt.value, pq.value - 0.5)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    pol = StochasticPolicy(3, 1, 2.0, (6, 6), rng)
    dk.save_checkpoint(tmp_path / "p.ckpt", pol)
    back = dk.load_checkpoint(tmp_path / "p.ckpt")
    assert isinstance(back, StochasticPolicy) and back.action_bound == 2.0
    np.testing.assert_array_equal(back.trunk.flat(), pol.trunk.flat())
    net = Mlp([2, 3, 1], rng, "tanh")
    dk.save_checkpoint(tmp_path / "m.ckpt", net)
    m = dk.load_checkpoint(tmp_path / "m.ckpt")
    assert isinstance(m, Mlp) and m.activations == ["tanh"]
    np.testing.assert_array_equal(m.flat(), net.flat())


def test_checkpoint_rejects_bad_header(tmp_path):
    (tmp_path / "x.ckpt").write_text("garbage\n")
    with pytest.raises(ValueError, match="header"):
        dk.load_checkpoint(tmp_path / "x.ckpt")


def test_load_flat_validates_size():
    net = Mlp([2, 2])
    with pytest.raises(ValueError, match="parameters"):
        net.load_flat(np.zeros(net.n_params() + 1))


def test_sample_action_single_state():
    pol = StochasticPolicy(3, 1, 2.0, (4,))
    a, lp = dk.sample_action(pol, np.zeros(3), np.random.default_rng(0))
    assert a.shape == (1,) and math.isfinite(lp)


def test_forward_examples():
    net = Mlp([3, 4, 2])
    for p in net.params:
        p.value[...] = 0.0
    net.biases[-1].value[:] = [1.5, -2.0]
    np.testing.assert_array_equal(net.forward(np.array([9.0, -1.0, 4.0])), [1.5, -2.0])
    lin = Mlp([1, 1])
    lin.weights[0].value[...] = 2.0
    lin.biases[0].value[...] = 0.0
    assert lin.forward(np.array([3.0]))[0] == 6.0
    assert lin.n_params() == 2 and Mlp([3, 4, 2]).n_params() == 3 * 4 + 4 + 4 * 2 + 2


def test_adam_zero_gradient_is_a_no_op():
    p = param(np.array([0.3, -0.7]))
    Adam([p], lr=0.5).step([np.zeros(2)])
    np.testing.assert_array_equal(p.value, [0.3, -0.7])
