"""Command line entry point.

    cosbo gen-data --config exp.ini
    cosbo train    --config exp.ini --scenario sim-medium --seed 0
    cosbo sweep    --config exp.ini --scenarios offline-only,sim-medium
    cosbo report   --sweep-dir runs
    cosbo eval     --checkpoint runs/sim-medium/seed0/policy.ckpt
    cosbo verify
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import SCENARIOS, ConfigError, ExperimentConfig, load_config
from .runner import generate_dataset, load_dataset, output_root, run_sweep, run_training

log = logging.getLogger("cosbo")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.core = cfg.core.replace(seed=args.seed)
    return cfg


def _dataset_path(args, cfg) -> Path:
    return Path(args.dataset or cfg.data.path)


def _ensure_dataset(path: Path, cfg: ExperimentConfig):
    if not path.exists():
        log.info("dataset %s missing; generating it", path)
        path.parent.mkdir(parents=True, exist_ok=True)
        generate_dataset(cfg, path)
    return load_dataset(path)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    path = Path(args.out or cfg.data.path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset, anchors = generate_dataset(cfg, path)
    print(f"wrote {len(dataset)} transitions to {path}")
    print(f"behaviour return {anchors['behavior']:.1f}  random {anchors['random']:.1f}"
          + (f"  expert {anchors['expert']:.1f}" if "expert" in anchors else ""))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args).for_run(args.scenario)
    dataset, anchors = _ensure_dataset(_dataset_path(args, cfg), cfg)
    out = output_root(args.out, cfg) / cfg.harness.scenario / f"seed{cfg.core.seed}"
    report = run_training(cfg, dataset, anchors, out, args.iters,
                          progress=lambda row: log.info("iter %d  eval %.1f", row["iter"], row["eval_return_mean"]))
    final = report["final"]
    print(f"{cfg.harness.scenario} seed {cfg.core.seed}: final return {final['return_mean']:.2f} "
          f"± {final['return_std']:.2f} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    scenarios = args.scenarios.split(",") if args.scenarios else list(SCENARIOS)
    for s in scenarios:
        if s not in SCENARIOS:
            raise ConfigError(f"--scenarios: unknown scenario {s!r}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.harness.seed_list
    path = _dataset_path(args, cfg)
    _ensure_dataset(path, cfg)
    out = output_root(args.out, cfg)
    for scenario, seed, ret in run_sweep(cfg, scenarios, seeds, path, out, args.iters, args.jobs):
        print(f"{scenario:<16} seed {seed}: {ret:.2f}")
    return 0


def cmd_report(args) -> int:
    from .report import build_report, format_table

    outputs = build_report(args.sweep_dir, args.out, figure=not args.no_figure)
    print(format_table(outputs["rows"]))
    print(f"table: {outputs['table']}")
    if "figure" in outputs:
        print(f"figure: {outputs['figure']}")
    return 0


def cmd_eval(args) -> int:
    from ..core import evaluate
    from ..diffkit import StochasticPolicy, load_checkpoint

    policy = load_checkpoint(args.checkpoint)
    if not isinstance(policy, StochasticPolicy):
        raise ValueError(f"{args.checkpoint}: not a policy checkpoint")
    mean, std, _ = evaluate(policy, args.env, args.episodes, args.seed if args.seed is not None else 10_000)
    print(f"return {mean:.2f} ± {std:.2f} over {args.episodes} episodes")
    return 0


def cmd_verify(args) -> int:
    from ..oracle import run_verification

    checks = run_verification(args.rollouts)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail} ({c.seconds:.2f}s)")
    return 0 if all(c.passed for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosbo", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="experiment .ini file (defaults apply when omitted)")
        p.add_argument("--out", help="output location (overrides the config and $COSBO_OUT)")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="train a behaviour policy and record an offline dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one scenario for one seed")
    common(p)
    p.add_argument("--scenario", choices=sorted(SCENARIOS))
    p.add_argument("--iters", type=int)
    p.add_argument("--dataset")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="train several scenarios across seeds")
    common(p, seed=False)
    p.add_argument("--scenarios", help="comma-separated scenario names")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--iters", type=int)
    p.add_argument("--dataset")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="comparison table and figure for a sweep directory")
    p.add_argument("--sweep-dir", required=True)
    p.add_argument("--out")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("eval", help="evaluate a saved policy in the unperturbed environment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", default="pendulum")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the exact tabular checks")
    p.add_argument("--rollouts", type=int, default=1_000_000)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"cosbo {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
