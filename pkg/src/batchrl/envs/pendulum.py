from __future__ import annotations

import numpy as np

from batchrl.envs.core import Env, EnvSpec


def angle_normalize(x: float) -> float:
    return ((x + np.pi) % (2 * np.pi)) - np.pi


class Pendulum(Env):
    """Torque-limited pendulum swing-up.

    Angle 0 is upright. Observations are ``(cos phi, sin phi, phi_dot)``;
    reward is ``-(phi**2 + 0.1 phi_dot**2 + 0.001 torque**2)`` with phi
    wrapped to [-pi, pi).
    """

    g = 10.0
    m = 1.0
    l = 1.0
    dt = 0.05
    max_speed = 8.0
    max_torque = 2.0

    def __init__(self, seed: int | None = None, max_episode_steps: int = 200):
        super().__init__(seed)
        self.spec = EnvSpec(3, 1, np.array([-self.max_torque]), np.array([self.max_torque]),
                            max_episode_steps)
        self.angle = 0.0
        self.velocity = 0.0

    def _obs(self):
        return np.array([np.cos(self.angle), np.sin(self.angle), self.velocity])

    def _reset(self):
        self.angle = float(self.rng.uniform(-np.pi, np.pi))
        self.velocity = float(self.rng.uniform(-1.0, 1.0))
        return self._obs()

    def _step(self, action):
        u = float(action[0])
        th, thdot = self.angle, self.velocity
        reward = -(angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)
        accel = 3 * self.g / (2 * self.l) * np.sin(th) + 3.0 / (self.m * self.l ** 2) * u
        thdot = float(np.clip(thdot + accel * self.dt, -self.max_speed, self.max_speed))
        self.angle = th + thdot * self.dt
        self.velocity = thdot
        return self._obs(), reward, False
