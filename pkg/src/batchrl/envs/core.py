"""Environment contract and the lock-step batch wrapper."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from batchrl.errors import BatchStepError, ContractViolation


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int

    def __post_init__(self):
        low = np.asarray(self.action_low, dtype=np.float32).reshape(-1)
        high = np.asarray(self.action_high, dtype=np.float32).reshape(-1)
        if self.obs_dim < 1 or self.act_dim < 1 or self.max_episode_steps < 1:
            raise ContractViolation("obs_dim, act_dim and max_episode_steps must be positive")
        if low.shape != (self.act_dim,) or high.shape != (self.act_dim,):
            raise ContractViolation("action bounds must have act_dim entries")
        if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high)) and np.all(low < high)):
            raise ContractViolation("action bounds must be finite with low < high")
        object.__setattr__(self, "action_low", low)
        object.__setattr__(self, "action_high", high)

    def __eq__(self, other):
        if not isinstance(other, EnvSpec):
            return NotImplemented
        return (self.obs_dim == other.obs_dim and self.act_dim == other.act_dim
                and self.max_episode_steps == other.max_episode_steps
                and np.array_equal(self.action_low, other.action_low)
                and np.array_equal(self.action_high, other.action_high))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    reward: np.float32
    done: bool


@dataclass(frozen=True)
class BatchStepResult:
    obs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        n = self.obs.shape[0]
        if self.rewards.shape != (n,) or self.dones.shape != (n,):
            raise ContractViolation("batch fields disagree on leading dimension")


class Env:
    """Base class for native environments.

    Subclasses set ``spec`` and implement ``_reset`` and ``_step``; this class
    handles seeding, action clipping, the step limit and 32-bit conversion.
    """

    spec: EnvSpec

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.needs_reset = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.needs_reset = False
        return np.asarray(self._reset(), dtype=np.float32)

    def step(self, action) -> StepResult:
        if self.needs_reset:
            raise ContractViolation("step called on an environment that needs reset")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.spec.act_dim,):
            raise ContractViolation(f"action shape {action.shape}, expected ({self.spec.act_dim},)")
        if not np.all(np.isfinite(action)):
            raise ContractViolation("action contains non-finite values")
        action = np.clip(action, self.spec.action_low, self.spec.action_high)
        obs, reward, terminal = self._step(action)
        self.steps += 1
        done = bool(terminal) or self.steps >= self.spec.max_episode_steps
        self.needs_reset = done
        return StepResult(np.asarray(obs, dtype=np.float32), np.float32(reward), done)

    def close(self) -> None:
        pass

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


def _is_split(env) -> bool:
    return hasattr(env, "send_step") and hasattr(env, "receive")


class BatchEnv:
    """N environments with matching specs, advanced together one tick at a time.

    Members that expose ``send_step``/``send_reset``/``receive`` (external
    processes) get every request issued before any reply is awaited. Plain
    in-process members run sequentially, or on a thread pool when
    ``workers > 1``. Either way ``step`` returns only after every member
    has stepped, with rows ordered by member index.
    """

    def __init__(self, envs: Sequence, workers: int = 1):
        if not envs:
            raise ContractViolation("a batch needs at least one environment")
        spec = envs[0].spec
        for i, env in enumerate(envs):
            if env.spec != spec:
                raise ContractViolation(f"environment {i} spec differs from environment 0")
        self.envs = list(envs)
        self.spec = spec
        self._split = all(_is_split(e) for e in self.envs)
        self._pool = ThreadPoolExecutor(workers) if workers > 1 and not self._split else None
        self.needs_reset = np.ones(len(self.envs), dtype=bool)

    def __len__(self) -> int:
        return len(self.envs)

    def __getitem__(self, index: int):
        return self.envs[index]

    def _run(self, indices: Sequence[int], send, call):
        """Apply one request per index; returns results in index order."""
        results = [None] * len(indices)
        if self._split:
            sent = []
            try:
                for k, i in enumerate(indices):
                    send(k, i)
                    sent.append(k)
            except Exception as exc:
                self._drain(indices, sent)
                raise BatchStepError(indices[len(sent)], exc) from exc
            failure = None
            for k in sent:
                try:
                    results[k] = self.envs[indices[k]].receive()
                except Exception as exc:
                    if failure is None:
                        failure = BatchStepError(indices[k], exc)
            if failure is not None:
                raise failure from failure.cause
            return results

        def guarded(k):
            try:
                return call(k, indices[k])
            except Exception as exc:
                raise BatchStepError(indices[k], exc) from exc

        if self._pool is not None:
            futures = [self._pool.submit(guarded, k) for k in range(len(indices))]
            return [f.result() for f in futures]
        return [guarded(k) for k in range(len(indices))]

    def _drain(self, indices, sent):
        for k in sent:
            try:
                self.envs[indices[k]].receive()
            except Exception:
                pass

    def step(self, actions) -> BatchStepResult:
        actions = np.asarray(actions, dtype=np.float32)
        n = len(self.envs)
        if actions.shape != (n, self.spec.act_dim):
            raise ContractViolation(f"actions shape {actions.shape}, expected {(n, self.spec.act_dim)}")
        waiting = np.flatnonzero(self.needs_reset)
        if waiting.size:
            raise ContractViolation(f"environments {waiting.tolist()} need reset before stepping")
        indices = list(range(n))
        results = self._run(
            indices,
            send=lambda k, i: self.envs[i].send_step(actions[i]),
            call=lambda k, i: self.envs[i].step(actions[i]),
        )
        obs = np.stack([r.obs for r in results]).astype(np.float32)
        rewards = np.array([r.reward for r in results], dtype=np.float32)
        dones = np.array([r.done for r in results], dtype=bool)
        self.needs_reset |= dones
        return BatchStepResult(obs, rewards, dones)

    def reset(self, indices: Sequence[int] | None = None, seeds: Sequence[int] | None = None) -> np.ndarray:
        """Reset the named members (all when ``indices`` is None); returns their observations."""
        n = len(self.envs)
        indices = list(range(n)) if indices is None else [int(i) for i in indices]
        if len(set(indices)) != len(indices):
            raise ContractViolation(f"duplicate reset indices {indices}")
        for i in indices:
            if not 0 <= i < n:
                raise ContractViolation(f"reset index {i} out of range for batch of {n}")
        if seeds is not None and len(seeds) != len(indices):
            raise ContractViolation("need one seed per reset index")
        if not indices:
            return np.zeros((0, self.spec.obs_dim), dtype=np.float32)

        def seed_for(k):
            return None if seeds is None else int(seeds[k])

        results = self._run(
            indices,
            send=lambda k, i: self.envs[i].send_reset(seed_for(k)),
            call=lambda k, i: self.envs[i].reset(seed_for(k)),
        )
        self.needs_reset[indices] = False
        return np.stack(results).astype(np.float32)

    def close(self) -> None:
        for env in self.envs:
            env.close()
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
