"""Acceptance criteria, one test each.

Every test appends a PASS/FAIL line to ``RESULTS``; conftest prints them in
the terminal summary. The experiment criteria share one medium-quality
dataset and one set of sweep runs, each run trained once per session.
Set ``COSBO_ACCEPTANCE_DIR`` to keep the runs somewhere inspectable.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from cosbo.core import TrainConfig, conservative_q_loss, init_agent, policy_loss
from cosbo.datakit import RandomPolicy, collect_dataset, sample_batch
from cosbo.envkit import IDENTITY, make_env
from cosbo.harness import ExperimentConfig, generate_dataset, load_dataset, run_training
from cosbo.harness.cli import main
from cosbo.harness.report import build_report
from cosbo.oracle import (BETA_GRID, chain_instance, check_beta_zero, check_monte_carlo, check_pushed_down,
                          conservative_q)
from cosbo.rolloutkit import SimulatorSource

from oracles import cql_reference, flat_fd, relative_error

RESULTS: list[str] = []
SEEDS = [0, 1, 2, 3, 4]


def record(n: int, ok: bool, detail: str, seconds: float, limit: float | None) -> None:
    ok = ok and (limit is None or seconds < limit)
    budget = f"{seconds:.1f}s" + (f" of {limit:.0f}s" if limit is not None else ", no time limit")
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {detail} [{budget}]"
    RESULTS.append(line)
    print(line)


def trend(ok: bool, seconds: float, limit: float, detail: str) -> None:
    """Empirical trends are measured, not guaranteed: a missed trend within budget is an expected failure."""
    assert seconds < limit, f"over the {limit:.0f}s budget"
    if not ok:
        pytest.xfail(f"trend not reproduced: {detail}")


# analytic and exact checks ------------------------------------------------------------------------------


def test_criterion_1_gradients_match_finite_differences():
    t0 = time.perf_counter()
    env = make_env("pendulum")
    data = collect_dataset(env, RandomPolicy(env), 1000, seed=11)
    sim = SimulatorSource("pendulum", tier="medium")
    worst, count = 0.0, 0
    for k in range(100):
        rng = np.random.default_rng(k)
        cfg = TrainConfig(hidden=int(rng.integers(3, 5)), beta=float(rng.uniform(0.1, 2)),
                          f=float(rng.uniform(0.2, 1)),
                          entropy_weight=float(rng.uniform(0.05, 0.5)))
        crit, actor = init_agent(cfg, 3, 1, 2.0, rng)
        real = sample_batch(data, 4, rng)
        if k % 2 == 0:
            synth = sim.generate(real, actor.policy, 1, rng)
            loss = lambda: conservative_q_loss(crit.critic, crit.target, actor.policy, real, synth, cfg,
                                               np.random.default_rng(k))
            params = crit.critic.params
            analytic = lambda: loss()[1]
            scalar = lambda: loss()[0].loss
        else:
            states = real.states
            loss = lambda: policy_loss(actor.policy, crit.critic, states, cfg.entropy_weight,
                                       np.random.default_rng(k))
            params = actor.policy.params
            analytic = lambda: loss()[1]
            scalar = lambda: loss()[0]
        grad = np.concatenate([g.ravel() for g in analytic()])
        worst = max(worst, relative_error(grad, flat_fd(params, scalar)))
        count += 1
    seconds = time.perf_counter() - t0
    record(1, worst < 1e-4 and count >= 100, f"max relative FD error {worst:.2e} over {count} networks",
           seconds, 10)
    assert worst < 1e-4 and count >= 100 and seconds < 10


def test_criterion_2_monte_carlo_and_beta_zero():
    t0 = time.perf_counter()
    inst = chain_instance()
    mc_ok, mc_detail = check_monte_carlo(inst, 1_000_000)
    zero_ok, zero_detail = check_beta_zero(inst)
    seconds = time.perf_counter() - t0
    record(2, mc_ok and zero_ok, f"{mc_detail}; {zero_detail}", seconds, 30)
    assert mc_ok and zero_ok and seconds < 30


def test_criterion_3_penalty_monotone_and_pushes_down():
    t0 = time.perf_counter()
    inst = chain_instance()
    means = [float((inst.rho * conservative_q(inst, b)).sum()) for b in BETA_GRID]
    monotone = all(b <= a for a, b in zip(means, means[1:]))
    down_ok, down_detail = check_pushed_down(inst)
    seconds = time.perf_counter() - t0
    detail = "E_rho[Q] " + " >= ".join(f"{m:.3f}" for m in means) + f"; {down_detail}"
    record(3, monotone and down_ok, detail, seconds, 10)
    assert monotone and down_ok and seconds < 10


def test_criterion_4_cql_reduction_and_identity_simulator():
    t0 = time.perf_counter()
    env = make_env("pendulum")
    data = collect_dataset(env, RandomPolicy(env), 2000, seed=5)
    worst = 0.0
    for seed in range(20):
        cfg = TrainConfig(source="none", f=1.0, beta=1.3, gamma=0.97, entropy_weight=0.2, hidden=16)
        rng = np.random.default_rng(seed)
        crit, actor = init_agent(cfg, 3, 1, 2.0, rng)
        for p in crit.target.params:
            p.value = p.value + 0.05 * rng.normal(size=p.value.shape)
        batch = sample_batch(data, 64, rng)
        info, grads = conservative_q_loss(crit.critic, crit.target, actor.policy, batch, None, cfg,
                                          np.random.default_rng(1000 + seed))
        ref_loss, ref_grads = cql_reference(crit.critic.critics, crit.target.critics, actor.policy.trunk, 2.0,
                                            batch, 1.3, 0.97, 0.2, np.random.default_rng(1000 + seed))
        worst = max(worst, abs(info.loss - ref_loss),
                    *(np.abs(g - r).max() for g, r in zip(grads, ref_grads)))
    synth = SimulatorSource("pendulum", specs=[IDENTITY]).generate(data.data, actor.policy, 1,
                                                                   np.random.default_rng(0))
    exact = np.array_equal(synth.next_states, data.data.next_states)
    seconds = time.perf_counter() - t0
    record(4, worst < 1e-10 and exact,
           f"max |loss or gradient difference| vs reference {worst:.1e}; identity next states exact: {exact}",
           seconds, 60)
    assert worst < 1e-10 and exact and seconds < 60


# experiments --------------------------------------------------------------------------------------------


class Runs:
    """Dataset plus lazily trained (scenario, seed) runs with their training time."""

    def __init__(self, root: Path):
        self.root = root
        self.cfg = ExperimentConfig()
        path = root / "data.txt"
        t0 = time.perf_counter()
        if path.exists():
            self.dataset, self.anchors = load_dataset(path)
        else:
            root.mkdir(parents=True, exist_ok=True)
            self.dataset, self.anchors = generate_dataset(self.cfg, path)
        self.data_seconds = time.perf_counter() - t0
        self.finals: dict[tuple[str, int], float] = {}
        self.seconds: dict[tuple[str, int], float] = {}

    def final(self, scenario: str, seed: int) -> float:
        key = (scenario, seed)
        if key not in self.finals:
            t0 = time.perf_counter()
            report = run_training(self.cfg.for_run(scenario, seed), self.dataset, self.anchors,
                                  self.root / "sweep" / scenario / f"seed{seed}")
            self.seconds[key] = time.perf_counter() - t0
            self.finals[key] = report["final"]["return_mean"]
        return self.finals[key]

    def arm(self, scenario: str) -> np.ndarray:
        return np.array([self.final(scenario, s) for s in SEEDS])

    def cost(self, *scenarios: str) -> float:
        return sum(v for (sc, _), v in self.seconds.items() if sc in scenarios)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = os.environ.get("COSBO_ACCEPTANCE_DIR")
    r = Runs(Path(root) if root else tmp_path_factory.mktemp("acceptance"))
    yield r
    if r.finals:
        build_report(r.root / "sweep")


def fmt(xs) -> str:
    return "[" + ", ".join(f"{x:.1f}" for x in xs) + "]"


def test_criterion_5_simulator_beats_offline_only(runs):
    offline = runs.arm("offline-only")
    sim = runs.arm("sim-medium")
    behavior = runs.anchors["behavior"]
    wins = int(np.sum(sim >= offline))
    ok = wins >= 4 and bool(np.all(sim >= behavior))
    seconds = runs.data_seconds + runs.cost("offline-only", "sim-medium")
    detail = f"sim-medium {fmt(sim)} vs offline-only {fmt(offline)}: {wins}/5 wins; behaviour {behavior:.1f}"
    record(5, ok, detail, seconds, 30 * 60)
    trend(ok, seconds, 30 * 60, detail)


def test_criterion_6_concat_baseline_below_simulator(runs):
    concat = runs.arm("concat-baseline")
    sim = runs.arm("sim-medium")
    ok = concat.mean() < sim.mean()
    seconds = runs.cost("concat-baseline")
    detail = f"concat-baseline mean {concat.mean():.1f} vs sim-medium mean {sim.mean():.1f}"
    record(6, ok, detail + " (sim-medium runs shared with criterion 5)", seconds, 30 * 60)
    trend(ok, seconds, 30 * 60, detail)


def test_criterion_7_degrades_with_mismatch(runs):
    means = [runs.arm(s).mean() for s in ("sim-medium", "sim-very", "sim-extreme")]
    inversions = sum(b > a for a, b in zip(means, means[1:]))
    random = runs.anchors["random"]
    ok = inversions <= 1 and means[-1] > random
    seconds = runs.cost("sim-very", "sim-extreme")
    detail = f"medium/very/extreme means {fmt(means)}, {inversions} inversion(s); random {random:.1f}"
    record(7, ok, detail, seconds, 45 * 60)
    trend(ok, seconds, 45 * 60, detail)


def test_criterion_8_rerun_is_byte_identical(runs, tmp_path):
    t0 = time.perf_counter()
    runs.cfg.save(tmp_path / "exp.ini")
    blobs = []
    for name in ("first", "second"):
        code = main(["train", "--config", str(tmp_path / "exp.ini"), "--scenario", "offline-only", "--seed", "0",
                     "--dataset", str(runs.root / "data.txt"), "--out", str(tmp_path / name)])
        assert code == 0
        blobs.append((tmp_path / name / "offline-only" / "seed0" / "metrics.csv").read_bytes())
    same = blobs[0] == blobs[1]
    seconds = time.perf_counter() - t0
    record(8, same, f"cosbo train offline-only seed 0 twice: metrics.csv identical = {same}", seconds, None)
    assert same
