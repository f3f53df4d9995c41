"""Dataset generation, single training runs and scenario sweeps."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from ..core import TrainConfig, evaluate, train, train_online
from ..datakit import (NoisyPolicy, OfflineDataset, RandomPolicy, Transitions, collect_dataset, episode_returns,
                       load, save)
from ..diffkit import save_checkpoint
from ..envkit import make_env
from ..rolloutkit import SimulatorSource
from .config import CONCAT_TIER, ExperimentConfig
from .metrics import write_metrics

log = logging.getLogger(__name__)

REPORT_VERSION = "cosbo-report v1"
ANCHOR_EPISODES = 20
ANCHOR_SEED = 30_000


def output_root(cli_out: str | None, cfg: ExperimentConfig) -> Path:
    if cli_out:
        return Path(cli_out)
    env_root = os.environ.get("COSBO_OUT")
    return Path(env_root) if env_root else Path(cfg.harness.out)


def anchors_path(dataset_path) -> Path:
    return Path(str(dataset_path) + ".anchors.json")


def make_behavior(cfg: ExperimentConfig, progress=None):
    """Behaviour policy named by ``data.behavior`` plus locally measured return anchors.

    The medium policy is the first online-training snapshot whose return
    reaches halfway between the random and final expert returns, acting
    with Gaussian action noise of ``data.noise``.
    """
    env = make_env(cfg.env_kind)
    random_policy = RandomPolicy(env)
    anchors = {"random": float(episode_returns(env, random_policy, ANCHOR_EPISODES, ANCHOR_SEED).mean())}
    kind = cfg.data.behavior
    if kind == "random":
        return random_policy, anchors
    if kind not in ("medium", "expert"):
        raise ValueError(f"data.behavior: unknown behaviour {kind!r}")
    # library-default SAC, so the data does not depend on offline training overrides
    online_cfg = TrainConfig(seed=cfg.data.seed, env_kind=cfg.env_kind, hidden=cfg.core.hidden)
    online = train_online(online_cfg, cfg.data.expert_steps,
                          eval_every=max(cfg.data.expert_steps // 20, 1), eval_episodes=10, progress=progress)
    expert = online.policy
    anchors["expert"] = evaluate(expert, cfg.env_kind, ANCHOR_EPISODES, ANCHOR_SEED)[0]
    if kind == "expert":
        chosen, label = expert, "expert"
        anchors["checkpoint_step"] = online.checkpoints[-1][0]
    else:
        threshold = anchors["random"] + 0.5 * (anchors["expert"] - anchors["random"])
        step, _, chosen = next(((t, ev, p) for t, ev, p in online.checkpoints if ev >= threshold),
                               online.checkpoints[-1])
        anchors["checkpoint_step"] = step
        anchors["medium_threshold"] = threshold
        label = "medium"
    noise = cfg.data.noise * env.action_bound
    behavior = NoisyPolicy(chosen, noise, label)
    anchors["behavior"] = float(episode_returns(env, behavior, ANCHOR_EPISODES, ANCHOR_SEED).mean())
    return behavior, anchors


def generate_dataset(cfg: ExperimentConfig, path=None, progress=None) -> tuple[OfflineDataset, dict]:
    behavior, anchors = make_behavior(cfg, progress)
    env = make_env(cfg.env_kind)
    dataset = collect_dataset(env, behavior, cfg.data.n_transitions, cfg.data.seed)
    anchors["dataset_mean_episode_return"] = dataset.meta["mean_episode_return"]
    anchors["behavior_description"] = dataset.behavior
    if path is not None:
        save(dataset, path)
        anchors_path(path).write_text(json.dumps(anchors, indent=2, sort_keys=True) + "\n")
    return dataset, anchors


def load_dataset(path) -> tuple[OfflineDataset, dict]:
    dataset = load(path)
    ap = anchors_path(path)
    anchors = json.loads(ap.read_text()) if ap.exists() else {}
    return dataset, anchors


def concat_dataset(dataset: OfflineDataset, seed: int) -> OfflineDataset:
    """Dataset plus one medium-tier simulator transition per recorded transition, all tagged real."""
    source = SimulatorSource(dataset.env_kind, tier=CONCAT_TIER)
    rng = np.random.default_rng(seed)
    synth = source.generate(dataset.data, policy=None, horizon=1, rng=rng, schedule="dataset_first")
    merged = Transitions.concatenate([dataset.data, synth.retag("real")], source="real")
    return OfflineDataset(merged, dataset.env_kind, dataset.behavior + " + simulator transitions", dataset.seed,
                          {"concatenated": len(synth)})


def normalized_score(value: float, anchors: dict) -> float | None:
    if "random" not in anchors or "expert" not in anchors or anchors["expert"] == anchors["random"]:
        return None
    return 100.0 * (value - anchors["random"]) / (anchors["expert"] - anchors["random"])


def run_training(cfg: ExperimentConfig, dataset: OfflineDataset, anchors: dict, out_dir,
                 iterations: int | None = None, progress=None) -> dict:
    """Train one (scenario, seed) and write metrics.csv, policy.ckpt and report.json into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = cfg.harness
    iterations = iterations or h.iterations
    if h.scenario == "concat-baseline":
        dataset = concat_dataset(dataset, cfg.core.seed)
    t0 = time.perf_counter()
    result = train(cfg.core, dataset, iterations, eval_every=h.eval_every, eval_episodes=h.eval_episodes,
                   eval_seed=h.eval_seed, record_time=h.timing == "wall", progress=progress)
    final_mean, final_std, returns = evaluate(result.policy, cfg.env_kind, h.final_episodes, h.eval_seed + 1)
    wall = time.perf_counter() - t0
    write_metrics(result.metrics, out_dir / "metrics.csv")
    save_checkpoint(out_dir / "policy.ckpt", result.policy)
    echo = cfg.to_sections()
    echo["harness"]["iterations"] = iterations
    report = {
        "format_version": REPORT_VERSION,
        "package_version": __version__,
        "scenario": h.scenario,
        "seed": cfg.core.seed,
        "config": echo,
        "dataset": {"size": len(dataset), "behavior": dataset.behavior},
        "anchors": anchors,
        "metrics": result.metrics,
        "final": {"return_mean": final_mean, "return_std": final_std, "returns": returns.tolist(),
                  "normalized_score": normalized_score(final_mean, anchors),
                  "normalized_score_note": "artifact-defined: 0 = uniform-random policy, 100 = local expert"},
        "wall_clock_s": wall,
    }
    if result.source is not None and hasattr(result.source, "preset_counts"):
        report["preset_counts"] = dict(zip(result.source.preset_names, result.source.preset_counts.tolist()))
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def _sweep_job(args):
    cfg, scenario, seed, dataset_path, out_root, iterations = args
    dataset, anchors = load_dataset(dataset_path)
    run_cfg = cfg.for_run(scenario, seed)
    out = Path(out_root) / scenario / f"seed{seed}"
    log.info("run %s seed %d -> %s", scenario, seed, out)
    report = run_training(run_cfg, dataset, anchors, out, iterations)
    return scenario, seed, report["final"]["return_mean"]


def run_sweep(cfg: ExperimentConfig, scenarios: list[str], seeds: list[int], dataset_path, out_root,
              iterations: int | None = None, jobs: int = 1) -> list[tuple[str, int, float]]:
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    manifest = {"scenarios": scenarios, "seeds": seeds, "dataset": str(dataset_path)}
    (out_root / "sweep.json").write_text(json.dumps(manifest, indent=2) + "\n")
    tasks = [(cfg, sc, sd, str(dataset_path), str(out_root), iterations) for sc in scenarios for sd in seeds]
    if jobs <= 1:
        return [_sweep_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_sweep_job, tasks))
