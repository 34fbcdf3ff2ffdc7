"""The fused simulation step and the alternating train/eval loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from batchrl import envs
from batchrl.agent import EVAL, TRAIN, BatchPPO, PpoConfig, UpdateMetrics
from batchrl.envs.core import BatchEnv
from batchrl.errors import ContractViolation

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("env_step", "phase", "mean_return", "episodes", "wall_seconds")
UPDATE_COLUMNS = ("step", "update_index", "mean_return", "policy_loss", "value_loss",
                  "observed_kl", "beta")
CURVE_FILE = "curve.csv"
UPDATES_FILE = "updates.csv"
CHECKPOINT_FILE = "checkpoint.brlc"


@dataclass
class StepMetrics:
    env_steps: int
    finished_returns: list[float]
    update: UpdateMetrics | None = None


class Simulation:
    """Holds the current observation batch between fused simulation steps."""

    def __init__(self, benv: BatchEnv, agent: BatchPPO):
        if len(benv) != agent.num_agents:
            raise ContractViolation(f"batch of {len(benv)} envs but agent expects {agent.num_agents}")
        if benv.spec.obs_dim != agent.spec.obs_dim or benv.spec.act_dim != agent.spec.act_dim:
            raise ContractViolation("environment and agent disagree on observation/action sizes")
        self.benv = benv
        self.agent = agent
        self.obs: np.ndarray | None = None
        self.pending: list[int] = []
        self.returns = np.zeros(len(benv), dtype=np.float64)
        self.env_steps = 0

    def simulate(self, log: bool = False, reset: bool = False, mode: str = TRAIN,
                 seeds: Sequence[int] | None = None) -> StepMetrics | None:
        """One tick: begin new episodes, act, step every env, record, end finished episodes.

        With ``reset`` all in-flight episodes are discarded (never pooled) and
        every environment restarts, reseeded from ``seeds`` when given.
        """
        agent, benv = self.agent, self.benv
        n = len(benv)
        if reset or self.obs is None:
            agent.abort_episodes()
            self.obs = benv.reset(seeds=seeds)
            self.returns[:] = 0.0
            started = list(range(n))
        else:
            started = self.pending
            if started:
                self.obs[started] = benv.reset(started)
                self.returns[started] = 0.0
        agent.begin_episodes(started)

        actions = agent.perform(self.obs, mode)
        result = benv.step(actions)
        agent.experience(self.obs, actions, result.rewards, result.dones, result.obs)
        self.returns += result.rewards
        done = np.flatnonzero(result.dones).tolist()
        finished = [float(self.returns[i]) for i in done]
        n_updates = len(agent.updates)
        agent.end_episodes(done)
        self.obs = result.obs
        self.pending = done
        self.env_steps += n
        if not log:
            return None
        update = agent.updates[-1] if len(agent.updates) > n_updates else None
        return StepMetrics(n, finished, update)


def run_episodes(sim: Simulation, episodes: int, mode: str = EVAL,
                 seeds: Sequence[int] | None = None) -> list[float]:
    """Restart every env and run until ``episodes`` episodes finish; returns their returns."""
    returns: list[float] = []
    first = True
    while len(returns) < episodes:
        metrics = sim.simulate(log=True, reset=first, mode=mode, seeds=seeds if first else None)
        first = False
        returns.extend(metrics.finished_returns)
    return returns[:episodes]


@dataclass
class TrainConfig:
    env: str = "lq1d"
    num_envs: int = 10
    seed: int = 0
    total_env_steps: int = 300_000
    train_steps: int = 5_000
    eval_episodes: int = 10
    logdir: str = "logdir"
    worker_command: str | None = None
    workers: int = 1
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def __post_init__(self):
        if self.env not in envs.REGISTRY:
            raise ContractViolation(
                f"unknown environment {self.env!r}; registered: {', '.join(sorted(envs.REGISTRY))}")
        if self.num_envs < 1 or self.train_steps < 1 or self.eval_episodes < 1 or self.workers < 1:
            raise ContractViolation("num_envs, train_steps, eval_episodes and workers must be positive")
        if self.total_env_steps < 0:
            raise ContractViolation("total_env_steps must be non-negative")


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(float(value)) if "e" in value.lower() else int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def build_config(values: dict[str, object]) -> TrainConfig:
    """Assemble a TrainConfig from string or typed values keyed by field name."""
    train_defaults = TrainConfig.__dataclass_fields__
    ppo_defaults = PpoConfig()
    train_kwargs, ppo_kwargs = {}, {}
    for key, value in values.items():
        if key in train_defaults and key != "ppo":
            default = train_defaults[key].default
            like = default if default is not None else ""
            if isinstance(value, str):
                value = None if key == "worker_command" and not value else _coerce(value, like)
            train_kwargs[key] = value
        elif hasattr(ppo_defaults, key):
            if isinstance(value, str):
                value = _coerce(value, getattr(ppo_defaults, key))
            ppo_kwargs[key] = value
        else:
            raise ContractViolation(f"unknown config key {key!r}")
    return TrainConfig(**train_kwargs, ppo=PpoConfig(**ppo_kwargs))


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        if f.name == "ppo":
            continue
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'' if value is None else value}")
    for f in fields(cfg.ppo):
        value = getattr(cfg.ppo, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def make_batch_env(name: str, num_envs: int, seed: int, worker_command: str | Sequence[str] | None = None,
                   workers: int = 1, external: bool = False) -> BatchEnv:
    """Environment i gets seed ``seed + i``; workers run as child processes when requested."""
    seeds = [seed + i for i in range(num_envs)]
    if external or worker_command is not None:
        from batchrl.ipc import spawn_many
        return BatchEnv(spawn_many(worker_command, name, seeds))
    return BatchEnv([envs.make(name, s) for s in seeds], workers=workers)


def agent_seed(seed: int) -> list[int]:
    return [seed, 0x5EED]


EVAL_STREAM = 0xE7A1


def phase_seeds(seed: int, num_envs: int, phase: int | None) -> list[int]:
    """Per-env reset seeds for a train phase, or the fixed eval set when ``phase`` is None.

    Every eval phase replays the same episodes so successive evaluations are
    directly comparable; each train phase draws fresh ones.
    """
    key = [seed, EVAL_STREAM] if phase is None else [seed, phase]
    state = np.random.SeedSequence(key).generate_state(num_envs, dtype=np.uint64)
    return [int(v) for v in state]


@dataclass
class CurveRecord:
    env_step: int
    phase: str
    mean_return: float
    episodes: int
    wall_seconds: float

    def row(self) -> list:
        return [self.env_step, self.phase, repr(float(self.mean_return)), self.episodes,
                f"{self.wall_seconds:.3f}"]


def train(cfg: TrainConfig) -> list[CurveRecord]:
    """Alternate train and eval phases, logging curve and update CSVs under ``cfg.logdir``."""
    logdir = Path(cfg.logdir)
    try:
        logdir.mkdir(parents=True, exist_ok=True)
        curve_f = open(logdir / CURVE_FILE, "w", newline="")
        updates_f = open(logdir / UPDATES_FILE, "w", newline="")
    except OSError as exc:
        raise RuntimeError(f"cannot write to logdir {logdir}: {exc}") from exc
    (logdir / "config.txt").write_text(config_to_text(cfg))

    records: list[CurveRecord] = []
    start = time.monotonic()
    benv = None
    with curve_f, updates_f:
        curve = csv.writer(curve_f)
        curve.writerow(CURVE_COLUMNS)
        updates = csv.writer(updates_f)
        updates.writerow(UPDATE_COLUMNS)
        curve_f.flush()
        updates_f.flush()
        if cfg.total_env_steps == 0:
            return records
        benv = make_batch_env(cfg.env, cfg.num_envs, cfg.seed, cfg.worker_command, cfg.workers)
        try:
            agent = BatchPPO(benv.spec, cfg.num_envs, cfg.ppo, seed=agent_seed(cfg.seed))
            sim = Simulation(benv, agent)
            train_steps = 0
            phase = 0
            eval_seeds = phase_seeds(cfg.seed, cfg.num_envs, None)

            def emit(record: CurveRecord):
                records.append(record)
                curve.writerow(record.row())
                curve_f.flush()
                log.info("%s step=%d return=%.3f episodes=%d", record.phase, record.env_step,
                         record.mean_return, record.episodes)

            while train_steps < cfg.total_env_steps:
                budget = min(cfg.train_steps, cfg.total_env_steps - train_steps)
                returns: list[float] = []
                seeds = phase_seeds(cfg.seed, cfg.num_envs, phase)
                phase += 1
                for k in range(math.ceil(budget / cfg.num_envs)):
                    metrics = sim.simulate(log=True, reset=(k == 0), mode=TRAIN,
                                           seeds=seeds if k == 0 else None)
                    train_steps += metrics.env_steps
                    returns.extend(metrics.finished_returns)
                    if metrics.update is not None:
                        u = metrics.update
                        updates.writerow([train_steps, u.update_index, repr(u.mean_return),
                                          repr(u.policy_loss), repr(u.value_loss),
                                          repr(u.observed_kl), repr(u.beta_after)])
                        updates_f.flush()
                emit(CurveRecord(train_steps, TRAIN, float(np.mean(returns)) if returns else math.nan,
                                 len(returns), time.monotonic() - start))
                eval_returns = run_episodes(sim, cfg.eval_episodes, EVAL, eval_seeds)
                emit(CurveRecord(train_steps, EVAL, float(np.mean(eval_returns)), len(eval_returns),
                                 time.monotonic() - start))
            agent.save(logdir / CHECKPOINT_FILE)
        finally:
            benv.close()
    return records


def read_curve(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
