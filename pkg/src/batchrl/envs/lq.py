from __future__ import annotations

import numpy as np

from batchrl.envs.core import Env, EnvSpec


class LinearQuadratic1D(Env):
    """Scalar linear system ``s' = 0.9 s + 0.1 a + 0.01 noise`` with quadratic cost.

    The state is observed directly and starts uniform in [-1, 1]. Reward is
    ``-(s**2 + 0.1 a**2)`` evaluated at the pre-step state.
    """

    decay = 0.9
    gain = 0.1
    noise_scale = 0.01
    action_cost = 0.1

    def __init__(self, seed: int | None = None, max_episode_steps: int = 100, noise: bool = True):
        super().__init__(seed)
        self.spec = EnvSpec(1, 1, np.array([-2.0]), np.array([2.0]), max_episode_steps)
        self.noise = noise
        self.state = 0.0

    def _reset(self):
        self.state = float(self.rng.uniform(-1.0, 1.0))
        return np.array([self.state])

    def _step(self, action):
        a = float(action[0])
        s = self.state
        reward = -(s * s + self.action_cost * a * a)
        nu = float(self.rng.standard_normal()) if self.noise else 0.0
        self.state = self.decay * s + self.gain * a + self.noise_scale * nu
        return np.array([self.state]), reward, False


def linear_feedback_return(gain: float, episodes: int = 200, seed: int = 0,
                           max_episode_steps: int = 100) -> float:
    """Mean undiscounted return of the policy ``a = gain * s``."""
    env = LinearQuadratic1D(seed=seed, max_episode_steps=max_episode_steps)
    total = 0.0
    for _ in range(episodes):
        obs = env.reset()
        done = False
        while not done:
            result = env.step(np.array([gain * float(obs[0])]))
            total += float(result.reward)
            obs, done = result.obs, result.done
    return total / episodes
