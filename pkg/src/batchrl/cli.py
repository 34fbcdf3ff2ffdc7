"""Command-line entry points.

Precedence for train settings: explicit flags, then ``--config`` file values,
then built-in defaults. ``--logdir`` falls back to ``$BATCHRL_LOGDIR``.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from batchrl import checkpoint, envs
from batchrl.agent import EVAL, BatchPPO
from batchrl.driver import (CHECKPOINT_FILE, Simulation, build_config, load_config, make_batch_env,
                            run_episodes, train)
from batchrl.errors import ContractViolation
from batchrl.ipc.process import default_worker_command

LOGDIR_ENV = "BATCHRL_LOGDIR"


class UsageError(Exception):
    pass


def _env_name(value: str) -> str:
    if value not in envs.REGISTRY:
        raise argparse.ArgumentTypeError(
            f"unknown environment {value!r}; registered: {', '.join(sorted(envs.REGISTRY))}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="batchrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, logdir=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--env", type=_env_name, help="environment name")
        p.add_argument("--num-envs", type=int, help="parallel environments")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--worker-command",
                       help="run environments in child processes launched with this command")
        if logdir:
            p.add_argument("--logdir", help=f"output directory (default ${LOGDIR_ENV})")

    p = sub.add_parser("train", help="train BatchPPO and write curve.csv and a checkpoint")
    common(p)
    p.add_argument("--total-env-steps", type=int)
    p.add_argument("--train-steps", type=int, help="env steps per training phase")
    p.add_argument("--eval-episodes", type=int, help="episodes per evaluation phase")
    p.add_argument("--workers", type=int, help="threads for in-process env stepping")

    p = sub.add_parser("eval", help="run mean-action episodes from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help=f"checkpoint file (default <logdir>/{CHECKPOINT_FILE})")
    p.add_argument("--episodes", type=int, default=10)

    p = sub.add_parser("bench-env", help="batch_step throughput, in-process vs external processes")
    common(p, logdir=False)
    p.add_argument("--steps", type=int, default=200, help="batch steps per measurement")
    p.add_argument("--json", action="store_true", help="print results as JSON")

    p = sub.add_parser("inspect-checkpoint", help="list arrays stored in a checkpoint")
    p.add_argument("path")
    return parser


def resolve_config(args) -> dict:
    values: dict = {}
    if args.config:
        try:
            values.update(load_config(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for key in ("env", "num_envs", "seed", "worker_command", "logdir", "total_env_steps",
                "train_steps", "eval_episodes", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    if "logdir" not in values and os.environ.get(LOGDIR_ENV):
        values["logdir"] = os.environ[LOGDIR_ENV]
    if "env" in values and values["env"] not in envs.REGISTRY:
        raise UsageError(f"unknown environment {values['env']!r}; "
                         f"registered: {', '.join(sorted(envs.REGISTRY))}")
    try:
        return {"values": values, "config": build_config(values)}
    except (ContractViolation, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    resolved = resolve_config(args)
    cfg = resolved["config"]
    if "logdir" not in resolved["values"]:
        raise UsageError(f"--logdir is required (or set ${LOGDIR_ENV})")
    records = train(cfg)
    evals = [r for r in records if r.phase == EVAL]
    if evals:
        print(f"final eval return {evals[-1].mean_return:.4f} after {evals[-1].env_step} env steps")
    print(f"wrote {os.path.join(cfg.logdir, 'curve.csv')}")
    return 0


def cmd_eval(args) -> int:
    resolved = resolve_config(args)
    cfg = resolved["config"]
    path = args.checkpoint
    if path is None:
        if "logdir" not in resolved["values"]:
            raise UsageError("give --checkpoint or --logdir")
        path = os.path.join(cfg.logdir, CHECKPOINT_FILE)
    if args.episodes < 1:
        raise UsageError("--episodes must be positive")
    benv = make_batch_env(cfg.env, cfg.num_envs, cfg.seed, cfg.worker_command, cfg.workers)
    try:
        agent = BatchPPO.from_checkpoint(path, benv.spec, cfg.num_envs, cfg.ppo)
        returns = np.array(run_episodes(Simulation(benv, agent), args.episodes, EVAL))
    finally:
        benv.close()
    p25, p50, p75 = np.percentile(returns, [25, 50, 75])
    print(f"episodes {len(returns)}  mean {returns.mean():.4f}  "
          f"p25 {p25:.4f}  median {p50:.4f}  p75 {p75:.4f}  "
          f"min {returns.min():.4f}  max {returns.max():.4f}")
    return 0


def _throughput(benv, steps: int, seed: int) -> float:
    r = np.random.default_rng(seed)
    spec = benv.spec
    actions = r.uniform(spec.action_low, spec.action_high,
                        size=(steps, len(benv), spec.act_dim)).astype(np.float32)
    benv.reset()
    start = time.perf_counter()
    for k in range(steps):
        result = benv.step(actions[k])
        done = np.flatnonzero(result.dones)
        if done.size:
            benv.reset(done)
    return steps * len(benv) / (time.perf_counter() - start)


class _Serial:
    """Hides the split send/receive interface so BatchEnv steps members one at a time."""

    def __init__(self, handle):
        self.handle = handle
        self.spec = handle.spec

    def reset(self, seed=None):
        return self.handle.reset(seed)

    def step(self, action):
        return self.handle.step(action)

    def close(self):
        self.handle.close()


def cmd_bench(args) -> int:
    from batchrl.envs import BatchEnv
    from batchrl.ipc import spawn_many

    resolved = resolve_config(args)
    cfg = resolved["config"]
    worker = cfg.worker_command or default_worker_command()
    seeds = [cfg.seed + i for i in range(cfg.num_envs)]
    results = {"env": cfg.env, "num_envs": cfg.num_envs, "steps": args.steps}

    local = make_batch_env(cfg.env, cfg.num_envs, cfg.seed)
    results["in_process"] = _throughput(local, args.steps, cfg.seed)
    local.close()

    handles = spawn_many(worker, cfg.env, seeds)
    try:
        results["external_serial"] = _throughput(BatchEnv([_Serial(h) for h in handles]), args.steps, cfg.seed)
        results["external_parallel"] = _throughput(BatchEnv(handles), args.steps, cfg.seed)
    finally:
        for h in handles:
            h.close()

    if args.json:
        print(json.dumps(results))
    else:
        print(f"{cfg.env} x{cfg.num_envs}, {args.steps} batch steps")
        for key in ("in_process", "external_serial", "external_parallel"):
            print(f"  {key.replace('_', ' '):<18} {results[key]:12.1f} steps/sec")
    return 0


def cmd_inspect(args) -> int:
    arrays = checkpoint.load(args.path)
    width = max((len(k) for k in arrays), default=0)
    for name, arr in arrays.items():
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        print(f"{name:<{width}}  {shape}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench-env": cmd_bench, "inspect-checkpoint": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"batchrl: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"batchrl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
