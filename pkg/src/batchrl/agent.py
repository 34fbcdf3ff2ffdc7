"""BatchPPO: KL-penalized policy optimization over a batch of agents.

The agent follows a four-call protocol driven once per environment tick:
``begin_episodes`` for agents starting fresh, ``perform`` to pick actions,
``experience`` to record the resulting transitions and ``end_episodes`` for
agents whose episode finished. Completed episodes are pooled; once the pool
holds ``episodes_per_update`` episodes the agent runs one update and
discards them.

The policy network outputs a tanh-bounded mean in normalized action units
[-1, 1]; a free log-std vector sets the diagonal covariance. Actions handed
to the environment are rescaled to the environment's bounds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from batchrl import checkpoint, dist_math, normalizer
from batchrl.dist_math import DiagGaussian
from batchrl.envs.core import EnvSpec
from batchrl.errors import ContractViolation, UpdateError
from batchrl.nn import AdamState, MlpParams, adam_step, backward, forward, init_mlp

TRAIN = "train"
EVAL = "eval"

BETA_MIN = 1e-4
BETA_MAX = 1e4
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0


@dataclass
class PpoConfig:
    gamma: float = 0.99
    episodes_per_update: int = 25
    update_epochs: int = 25
    policy_lr: float = 1e-4
    value_lr: float = 1e-3
    kl_target: float = 0.01
    kl_init_penalty: float = 1.0
    kl_cutoff_factor: float = 2.0
    kl_cutoff_coef: float = 1000.0
    beta_adapt_factor: float = 2.0
    beta_tolerance: float = 1.5
    hidden: tuple[int, ...] = (200, 100)
    init_log_std: float = -0.7
    init_mean_scale: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma <= 1.0:
            raise ContractViolation(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.episodes_per_update < 1 or self.update_epochs < 1:
            raise ContractViolation("episodes_per_update and update_epochs must be >= 1")
        positive = ("policy_lr", "value_lr", "kl_target", "kl_init_penalty", "kl_cutoff_coef",
                    "beta_adapt_factor", "beta_tolerance", "init_mean_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive")
        if self.kl_cutoff_factor <= 1:
            raise ContractViolation("kl_cutoff_factor must exceed 1")
        if any(h < 1 for h in self.hidden):
            raise ContractViolation("hidden layer sizes must be positive")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def adapt_beta(beta: float, observed_kl: float, cfg: PpoConfig) -> float:
    if beta <= 0:
        raise ContractViolation("beta must be positive")
    if observed_kl > cfg.beta_tolerance * cfg.kl_target:
        beta = beta * cfg.beta_adapt_factor
    elif observed_kl < cfg.kl_target / cfg.beta_tolerance:
        beta = beta / cfg.beta_adapt_factor
    return min(max(beta, BETA_MIN), BETA_MAX)


@dataclass
class PolicyBatch:
    """Flattened transitions of one update, with behavior-policy statistics."""

    obs: np.ndarray
    actions: np.ndarray
    behavior_mean: np.ndarray
    behavior_log_std: np.ndarray
    advantages: np.ndarray

    def astype(self, dtype) -> "PolicyBatch":
        return PolicyBatch(*(np.asarray(v, dtype=dtype) for v in asdict(self).values()))


@dataclass
class LossInfo:
    loss: float
    surrogate: float
    mean_kl: float
    max_ratio_dev: float


def policy_loss_and_grads(params: MlpParams, log_std: np.ndarray, batch: PolicyBatch,
                          beta: float, cfg: PpoConfig) -> tuple[LossInfo, MlpParams, np.ndarray]:
    """Penalized surrogate and its gradients w.r.t. network weights and log-std.

    loss = -mean(ratio * adv) + beta * mean(KL) + coef * max(0, mean(KL) - factor * target)**2
    with ratio = pi_theta(a|x) / pi'(a|x) and KL = KL(pi' || pi_theta).
    """
    mean, tape = forward(params, batch.obs)
    n = mean.shape[0]
    dtype = mean.dtype
    current = DiagGaussian(mean, log_std)
    behavior = DiagGaussian(batch.behavior_mean, batch.behavior_log_std)
    ratio = np.exp(dist_math.log_prob(current, batch.actions) - dist_math.log_prob(behavior, batch.actions))
    kls = dist_math.kl(behavior, current)
    mean_kl = kls.mean()
    surrogate = -np.mean(ratio * batch.advantages)
    overshoot = max(mean_kl - cfg.kl_cutoff_factor * cfg.kl_target, 0.0)
    loss = surrogate + beta * mean_kl + cfg.kl_cutoff_coef * overshoot ** 2

    inv_var = np.exp(-2.0 * log_std)
    diff = batch.actions - mean
    # d surrogate / d (mean, log_std), through ratio = exp(logp - logp_behavior)
    weight = (-(ratio * batch.advantages) / n)[:, None]
    d_mean = weight * diff * inv_var
    d_log_std = np.sum(weight * (diff * diff * inv_var - 1.0), axis=0)
    # d mean(KL) / d (mean, log_std)
    kl_scale = beta + 2.0 * cfg.kl_cutoff_coef * overshoot
    mean_gap = mean - batch.behavior_mean
    d_mean = d_mean + (kl_scale / n) * mean_gap * inv_var
    behavior_var = np.exp(2.0 * batch.behavior_log_std)
    d_log_std = d_log_std + (kl_scale / n) * np.sum(
        1.0 - (behavior_var + mean_gap * mean_gap) * inv_var, axis=0)

    grads = backward(params, tape, d_mean.astype(dtype, copy=False))
    info = LossInfo(float(loss), float(surrogate), float(mean_kl),
                    float(np.max(np.abs(ratio - 1.0))) if n else 0.0)
    return info, grads, d_log_std.astype(log_std.dtype, copy=False)


def value_loss_and_grads(params: MlpParams, obs: np.ndarray, targets: np.ndarray) -> tuple[float, MlpParams]:
    values, tape = forward(params, obs)
    err = values[:, 0] - targets
    loss = float(np.mean(err * err))
    grads = backward(params, tape, (2.0 / len(targets)) * err[:, None])
    return loss, grads


def whiten(x: np.ndarray) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    centered = x64 - x64.mean()
    std = centered.std()
    if std > 0:
        centered = centered / std
    return centered.astype(x.dtype)


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    raw_reward: float
    done: bool
    behavior_mean: np.ndarray
    behavior_log_std: np.ndarray


@dataclass
class Episode:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    raw_rewards: np.ndarray
    behavior_mean: np.ndarray
    behavior_log_std: np.ndarray

    @classmethod
    def from_transitions(cls, steps: Sequence[Transition]) -> "Episode":
        return cls(
            np.stack([t.obs for t in steps]),
            np.stack([t.action for t in steps]),
            np.array([t.reward for t in steps], dtype=np.float32),
            np.array([t.raw_reward for t in steps], dtype=np.float32),
            np.stack([t.behavior_mean for t in steps]),
            np.stack([t.behavior_log_std for t in steps]),
        )

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def raw_return(self) -> float:
        return float(np.sum(self.raw_rewards, dtype=np.float64))


class EpisodeStore:
    def __init__(self, num_agents: int):
        self.num_agents = num_agents
        self.in_flight: dict[int, list[Transition]] = {}
        self.modes: dict[int, str | None] = {}
        self.pool: list[Episode] = []
        self.completed = 0

    def begin(self, index: int) -> None:
        if not 0 <= index < self.num_agents:
            raise ContractViolation(f"agent index {index} out of range")
        if index in self.in_flight:
            raise ContractViolation(f"agent {index} already has an episode in flight")
        self.in_flight[index] = []
        self.modes[index] = None

    def end(self, index: int) -> tuple[list[Transition], str | None]:
        if index not in self.in_flight:
            raise ContractViolation(f"agent {index} has no episode in flight")
        self.modes.setdefault(index, None)
        return self.in_flight.pop(index), self.modes.pop(index)


@dataclass
class UpdateMetrics:
    update_index: int
    episodes: int
    transitions: int
    mean_return: float
    policy_loss: float
    value_loss: float
    observed_kl: float
    beta_before: float
    beta_after: float
    initial_max_ratio_dev: float
    initial_mean_kl: float


class BatchPPO:
    def __init__(self, spec: EnvSpec, num_agents: int, config: PpoConfig | None = None,
                 seed: int | None = None):
        if num_agents < 1:
            raise ContractViolation("need at least one agent")
        self.spec = spec
        self.num_agents = num_agents
        self.config = cfg = config or PpoConfig()
        init_rng, sample_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
        self.rng = sample_rng
        self.policy = init_mlp(init_rng, spec.obs_dim, cfg.hidden, "tanh", spec.act_dim,
                               out_scale=cfg.init_mean_scale)
        self.value = init_mlp(init_rng, spec.obs_dim, cfg.hidden, "linear", 1)
        self.log_std = np.full(spec.act_dim, cfg.init_log_std, dtype=np.float32)
        self.policy_opt = AdamState.zeros_like([*self.policy.arrays(), self.log_std])
        self.value_opt = AdamState.zeros_like(self.value.arrays())
        self.beta = float(cfg.kl_init_penalty)
        self.obs_stats = normalizer.StreamingStats.empty(spec.obs_dim)
        self.reward_stats = normalizer.StreamingStats.empty(1)
        self.store = EpisodeStore(num_agents)
        self.updates: list[UpdateMetrics] = []
        self._cache: dict | None = None
        self._low = spec.action_low.astype(np.float32)
        self._span = (spec.action_high - spec.action_low).astype(np.float32)

    # -- episode protocol ---------------------------------------------

    def begin_episodes(self, agent_indices: Sequence[int]) -> None:
        indices = [int(i) for i in agent_indices]
        if len(set(indices)) != len(indices):
            raise ContractViolation(f"duplicate agent indices {indices}")
        for i in indices:
            if i in self.store.in_flight:
                raise ContractViolation(f"agent {i} already has an episode in flight")
        for i in indices:
            self.store.begin(i)

    def policy_mean(self, obs_norm: np.ndarray) -> np.ndarray:
        return forward(self.policy, obs_norm)[0]

    def to_env_action(self, normalized: np.ndarray) -> np.ndarray:
        return self._low + (normalized + 1.0) * 0.5 * self._span

    def perform(self, obs, mode: str = TRAIN, rng: np.random.Generator | None = None) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float32)
        if obs.shape != (self.num_agents, self.spec.obs_dim):
            raise ContractViolation(f"observation batch {obs.shape}, expected "
                                    f"{(self.num_agents, self.spec.obs_dim)}")
        if mode not in (TRAIN, EVAL):
            raise ContractViolation(f"unknown mode {mode!r}")
        if mode == TRAIN:
            self.obs_stats = normalizer.update(self.obs_stats, obs)
        obs_norm = normalizer.normalize_obs(self.obs_stats, obs)
        mean = self.policy_mean(obs_norm)
        log_std = np.broadcast_to(self.log_std, mean.shape).copy()
        if mode == TRAIN:
            action = dist_math.sample(DiagGaussian(mean, log_std), rng or self.rng)
        else:
            action = mean.copy()
        self._cache = dict(obs=obs_norm, mean=mean, log_std=log_std, action=action, mode=mode)
        return self.to_env_action(action)

    def experience(self, obs, action, reward, done, next_obs) -> None:
        if self._cache is None:
            raise ContractViolation("experience called without a preceding perform")
        n = self.num_agents
        action = np.asarray(action)
        reward = np.asarray(reward, dtype=np.float32).reshape(-1)
        done = np.asarray(done, dtype=bool).reshape(-1)
        if action.shape != (n, self.spec.act_dim) or reward.shape != (n,) or done.shape != (n,):
            raise ContractViolation("experience batch shapes do not match the agent count")
        if np.asarray(next_obs).shape != (n, self.spec.obs_dim):
            raise ContractViolation("next_obs shape does not match the agent count")
        cache, self._cache = self._cache, None
        if cache["mode"] == TRAIN:
            self.reward_stats = normalizer.update(self.reward_stats, reward)
        scaled = normalizer.normalize_reward(self.reward_stats, reward)
        for i in range(n):
            steps = self.store.in_flight.get(i)
            if steps is None:
                raise ContractViolation(f"agent {i} has no episode in flight")
            if self.store.modes[i] is None:
                self.store.modes[i] = cache["mode"]
            elif self.store.modes[i] != cache["mode"]:
                raise ContractViolation(f"agent {i} switched mode mid-episode")
            steps.append(Transition(cache["obs"][i], cache["action"][i], float(scaled[i]),
                                    float(reward[i]), bool(done[i]), cache["mean"][i],
                                    cache["log_std"][i]))

    def end_episodes(self, agent_indices: Sequence[int]) -> bool:
        indices = [int(i) for i in agent_indices]
        for i in indices:
            if i not in self.store.in_flight:
                raise ContractViolation(f"agent {i} has no episode in flight")
        for i in indices:
            steps, mode = self.store.end(i)
            if mode == TRAIN and steps:
                self.store.pool.append(Episode.from_transitions(steps))
                self.store.completed += 1
        if len(self.store.pool) >= self.config.episodes_per_update:
            pool, self.store.pool = self.store.pool, []
            self.run_update(pool)
            return True
        return False

    def abort_episodes(self, agent_indices: Sequence[int] | None = None) -> None:
        """Drop in-flight episodes without pooling them."""
        indices = list(self.store.in_flight) if agent_indices is None else agent_indices
        for i in indices:
            self.store.end(int(i))
        self._cache = None

    # -- learning -------------------------------------------------------

    def prepare_batch(self, pool: Sequence[Episode]) -> tuple[PolicyBatch, np.ndarray]:
        """Flatten episodes; advantages are whitened ``R_t - V(x_t)`` under the current value net."""
        returns = np.concatenate(
            [dist_math.discounted_returns(ep.rewards, self.config.gamma) for ep in pool]).astype(np.float32)
        obs = np.concatenate([ep.obs for ep in pool])
        values = forward(self.value, obs)[0][:, 0]
        batch = PolicyBatch(
            obs=obs,
            actions=np.concatenate([ep.actions for ep in pool]),
            behavior_mean=np.concatenate([ep.behavior_mean for ep in pool]),
            behavior_log_std=np.concatenate([ep.behavior_log_std for ep in pool]),
            advantages=whiten(returns - values),
        )
        return batch, returns

    def run_update(self, pool: Sequence[Episode]) -> UpdateMetrics:
        if not pool:
            raise ContractViolation("cannot update on an empty pool")
        cfg = self.config
        batch, returns = self.prepare_batch(pool)

        beta_before = self.beta
        initial = None
        info = None
        for _ in range(cfg.update_epochs):
            info, grads, g_log_std = policy_loss_and_grads(self.policy, self.log_std, batch, self.beta, cfg)
            if initial is None:
                initial = info
            if not np.isfinite(info.loss):
                raise UpdateError("non-finite policy loss", asdict(info) | {"beta": self.beta})
            self.policy_opt, arrays = adam_step(
                self.policy_opt, [*self.policy.arrays(), self.log_std],
                [*grads.arrays(), g_log_std], cfg.policy_lr)
            self.policy = self.policy.with_arrays(arrays[:-1])
            self.log_std = np.clip(arrays[-1], LOG_STD_MIN, LOG_STD_MAX).astype(np.float32)

        current = DiagGaussian(self.policy_mean(batch.obs), self.log_std)
        observed_kl = float(np.mean(dist_math.kl(
            DiagGaussian(batch.behavior_mean, batch.behavior_log_std), current)))

        value_loss = 0.0
        for _ in range(cfg.update_epochs):
            value_loss, grads = value_loss_and_grads(self.value, batch.obs, returns)
            if not np.isfinite(value_loss):
                raise UpdateError("non-finite value loss", {"value_loss": value_loss})
            self.value_opt, arrays = adam_step(self.value_opt, self.value.arrays(), grads.arrays(),
                                               cfg.value_lr)
            self.value = self.value.with_arrays(arrays)

        self.beta = adapt_beta(self.beta, observed_kl, cfg)
        metrics = UpdateMetrics(
            update_index=len(self.updates),
            episodes=len(pool),
            transitions=int(returns.shape[0]),
            mean_return=float(np.mean([ep.raw_return for ep in pool])),
            policy_loss=info.loss,
            value_loss=value_loss,
            observed_kl=observed_kl,
            beta_before=beta_before,
            beta_after=self.beta,
            initial_max_ratio_dev=initial.max_ratio_dev,
            initial_mean_kl=initial.mean_kl,
        )
        self.updates.append(metrics)
        return metrics

    # -- persistence ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, net in (("policy", self.policy), ("value", self.value)):
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{prefix}/w{k}"] = w
                out[f"{prefix}/b{k}"] = b
        out["policy/log_std"] = self.log_std
        for prefix, stats in (("obs_stats", self.obs_stats), ("reward_stats", self.reward_stats)):
            out[f"{prefix}/count"] = np.array(stats.count)
            out[f"{prefix}/mean"] = stats.mean
            out[f"{prefix}/m2"] = stats.m2
        out["beta"] = np.array(self.beta)
        return out

    def save(self, path) -> None:
        checkpoint.save(path, self.state_arrays())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        def net(prefix, head):
            layers = len([k for k in arrays if k.startswith(f"{prefix}/w")])
            if not layers:
                raise ContractViolation(f"checkpoint has no {prefix} network")
            return MlpParams([arrays[f"{prefix}/w{k}"] for k in range(layers)],
                             [arrays[f"{prefix}/b{k}"] for k in range(layers)], head)

        policy = net("policy", "tanh")
        if policy.in_dim != self.spec.obs_dim or policy.out_dim != self.spec.act_dim:
            raise ContractViolation("checkpoint policy does not match the environment spec")
        self.policy = policy
        self.value = net("value", "linear")
        self.log_std = arrays["policy/log_std"].astype(np.float32)
        for prefix in ("obs_stats", "reward_stats"):
            stats = normalizer.StreamingStats(float(arrays[f"{prefix}/count"]),
                                              arrays[f"{prefix}/mean"].astype(np.float64),
                                              arrays[f"{prefix}/m2"].astype(np.float64))
            setattr(self, prefix, stats)
        self.beta = float(arrays["beta"])
        self.policy_opt = AdamState.zeros_like([*self.policy.arrays(), self.log_std])
        self.value_opt = AdamState.zeros_like(self.value.arrays())

    @classmethod
    def from_checkpoint(cls, path, spec: EnvSpec, num_agents: int,
                        config: PpoConfig | None = None) -> "BatchPPO":
        agent = cls(spec, num_agents, config)
        agent.load_arrays(checkpoint.load(path))
        return agent
