"""Command-line surface.

Subcommands: pretrain, finetune, evaluate, oracle-check, gradcheck,
merge-metrics, report. The SQRL_LOG environment variable sets log verbosity
(DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .core import RngStream
from .envs import generate_assumption_mdp, tabular_from_json_dict
from .nn import Mlp, SquaredErrorLoss, grad_check
from .oracle import verify_theorem
from .runner import (emit_metrics, evaluate, finetune, load_checkpoint,
                     merge_metrics, pretrain, save_checkpoint)

log = logging.getLogger("sqrl")


def _setup_logging() -> None:
    level = os.environ.get("SQRL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "baseline", None):
        config.baseline = args.baseline
    if getattr(args, "eps_safe", None) is not None:
        config.eps_safe = args.eps_safe
    if getattr(args, "gamma_safe", None) is not None:
        config.gamma_safe = args.gamma_safe
    if getattr(args, "out", None):
        config.out_dir = args.out
    return config


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        config = ExperimentConfig.load(args.config)
    else:
        config = ExperimentConfig()
    return _apply_overrides(config, args)


def _seeds(args, config: ExperimentConfig) -> list[int]:
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return list(config.seeds)


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    if args.steps is not None:
        config.n_pre = max(1, args.steps // config.n_off)
    config.validate()
    out = Path(config.out_dir)
    for seed in _seeds(args, config):
        log.info("pretrain seed=%d baseline=%s", seed, config.baseline)
        artifacts, result = pretrain(config, seed)
        emit_metrics(result.records, out / f"pretrain-{config.baseline}-seed{seed}.jsonl",
                     config=config, seed=seed, extra={"audit": result.audit})
        ckpt = save_checkpoint(artifacts, out / f"checkpoint-{config.baseline}-seed{seed}.json")
        print(f"pretrain seed {seed}: {len(result.records)} episodes, checkpoint {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    config = _load_config(args)
    if args.steps is not None:
        config.n_target = args.steps
    config.validate()
    out = Path(config.out_dir)
    for seed in _seeds(args, config):
        artifacts = load_checkpoint(args.checkpoint)
        # checkpoint config governs the networks; CLI/config flags govern the run
        artifacts.config = config
        log.info("finetune seed=%d baseline=%s", seed, config.baseline)
        artifacts, result = finetune(config, artifacts, seed)
        emit_metrics(result.records, out / f"finetune-{config.baseline}-seed{seed}.jsonl",
                     config=config, seed=seed, extra={"audit": result.audit})
        ckpt = save_checkpoint(artifacts, out / f"finetuned-{config.baseline}-seed{seed}.json")
        print(f"finetune seed {seed}: {len(result.records)} episodes, "
              f"failures {result.records[-1].cumulative_failures if result.records else 0}, "
              f"checkpoint {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    artifacts = load_checkpoint(args.checkpoint)
    artifacts.config = config
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else config.seeds[0]
    rows, summary = evaluate(config, artifacts, seed, eps_safe=args.eps_safe,
                             n_episodes=args.episodes, action_noise=args.noise,
                             use_mask=not args.no_mask)
    tag = f"eps{summary['eps_safe']}-seed{seed}"
    with open(out / f"eval-{tag}.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    with open(out / f"eval-{tag}.summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_oracle_check(args) -> int:
    eps = args.eps_safe if args.eps_safe is not None else 0.1
    gamma_safe = args.gamma_safe if args.gamma_safe is not None else 0.7
    rng = RngStream(args.seed if args.seed is not None else 0)
    tasks = []
    if args.mdp:
        with open(args.mdp) as fh:
            tasks.append(("file:" + args.mdp, tabular_from_json_dict(json.load(fh))))
    else:
        for i in range(args.suite):
            n_states = 4 + int(rng.integers(0, 17))
            n_actions = 2 + int(rng.integers(0, 3))
            task = generate_assumption_mdp(n_states, n_actions, eps_min=max(0.21, eps),
                                           seed=rng.split(1)[0])
            tasks.append((f"random-{i}", task))
    failures = 0
    for name, task in tasks:
        policy = rng.uniform(0.05, 1.0, size=(task.n_states, task.n_actions))
        policy = policy / policy.sum(axis=1, keepdims=True)
        report = verify_theorem(task, policy, gamma_safe, eps)
        ok = (not report.applicable) or report.bound_holds
        status = "PASS" if ok else "FAIL"
        if not ok:
            failures += 1
        print(f"{status} {name}: assumptions={'pass' if report.assumptions.all_pass else 'fail'} "
              f"applicable={report.applicable} value={report.failure_value:.6f} "
              f"eps={eps} margin={report.margin:.6f}")
    if failures:
        print(f"{failures} bound violations", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    rng = RngStream(args.seed if args.seed is not None else 0)
    roles = {
        "policy": ([2, 16, 16, 4], "identity"),
        "critic1": ([4, 16, 16, 1], "identity"),
        "critic2": ([4, 16, 16, 1], "identity"),
        "safety_critic": ([4, 16, 16, 1], "sigmoid"),
    }
    failed = 0
    for name, (sizes, act) in roles.items():
        worst = 0.0
        for _ in range(args.trials):
            net = Mlp(sizes, act, rng)
            x = rng.standard_normal((5, sizes[0]))
            targets = rng.standard_normal((5, sizes[-1]))
            report = grad_check(net, SquaredErrorLoss(x, targets), tolerance=1e-4)
            worst = max(worst, report.worst_rel_error)
            if not report.passed:
                failed += 1
        print(f"{'PASS' if worst < 1e-4 else 'FAIL'} {name}: "
              f"worst relative error {worst:.3e} over {args.trials} trials")
    return 1 if failed else 0


def cmd_merge_metrics(args) -> int:
    out = merge_metrics(args.inputs, args.out)
    print(f"merged {len(args.inputs)} files into {out}")
    return 0


def cmd_report(args) -> int:
    from .plots import render_report

    written = render_report(args.metrics, args.out, labels=args.labels, phase=args.phase)
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sqrl",
        description="Safety-critic RL: pre-train, fine-tune with masked actions, "
                    "verify the safety bound, and render reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, checkpoint=False):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="single seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--baseline", choices=("sqrl", "sac", "risk-sensitive"))
        p.add_argument("--eps-safe", type=float, dest="eps_safe")
        p.add_argument("--gamma-safe", type=float, dest="gamma_safe")
        p.add_argument("--steps", type=int, help="phase step-count override")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("pretrain", help="run the pre-training phase")
    add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint")
    add_common(p, checkpoint=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="frozen-policy evaluation with path classes")
    add_common(p, checkpoint=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--noise", type=float, help="action-noise override")
    p.add_argument("--no-mask", action="store_true", help="evaluate the raw policy")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle-check", help="verify the masking safety bound exactly")
    p.add_argument("--mdp", help="tabular MDP JSON document")
    p.add_argument("--suite", type=int, default=20,
                   help="number of generated MDPs when --mdp is absent")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps-safe", type=float, dest="eps_safe")
    p.add_argument("--gamma-safe", type=float, dest="gamma_safe")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("merge-metrics", help="concatenate per-seed metrics files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge_metrics)

    p = sub.add_parser("report", help="render figures and a summary table from metrics")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--phase", default="finetune")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
