"""Diagonal Gaussian policy math and discounted returns.

All functions broadcast over leading axes: the last axis is the action
dimension. Results keep the floating dtype of the inputs, so the same code
serves the float32 training path and float64 test oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from batchrl.errors import ContractViolation

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean)
        log_std = np.asarray(self.log_std)
        if mean.ndim == 0 or mean.shape[-1] < 1:
            raise ContractViolation("mean needs a non-empty action axis")
        if log_std.shape[-1:] != mean.shape[-1:]:
            raise ContractViolation(
                f"mean and log_std disagree on action dim: {mean.shape} vs {log_std.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def _check_dim(name: str, x: np.ndarray, dim: int) -> None:
    if x.shape[-1:] != (dim,):
        raise ContractViolation(f"{name} has shape {x.shape}, expected last axis {dim}")


def log_prob(d: DiagGaussian, action) -> np.ndarray:
    action = np.asarray(action)
    _check_dim("action", action, d.dim)
    z = (action - d.mean) * np.exp(-d.log_std)
    return np.sum(-d.log_std - HALF_LOG_2PI - 0.5 * z * z, axis=-1)


def kl(p: DiagGaussian, q: DiagGaussian) -> np.ndarray:
    """KL(p || q) in closed form, summed over the action axis."""
    if p.dim != q.dim:
        raise ContractViolation(f"dimension mismatch: {p.dim} vs {q.dim}")
    var_p = np.exp(2.0 * p.log_std)
    var_q = np.exp(2.0 * q.log_std)
    diff = p.mean - q.mean
    terms = q.log_std - p.log_std + (var_p + diff * diff) / (2.0 * var_q) - 0.5
    return np.sum(terms, axis=-1)


def sample(d: DiagGaussian, rng: np.random.Generator) -> np.ndarray:
    shape = np.broadcast_shapes(d.mean.shape, d.log_std.shape)
    z = rng.standard_normal(shape)
    dtype = np.result_type(d.mean, d.log_std)
    return (d.mean + np.exp(d.log_std) * z).astype(dtype, copy=False)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """Reverse scan of ``out[t] = rewards[t] + gamma * out[t + 1]``."""
    rewards = np.asarray(rewards)
    if rewards.ndim != 1 or rewards.shape[0] == 0:
        raise ContractViolation("rewards must be a non-empty vector")
    if not 0.0 <= gamma <= 1.0:
        raise ContractViolation(f"gamma must lie in [0, 1], got {gamma}")
    dtype = rewards.dtype if rewards.dtype.kind == "f" else np.float64
    out = np.empty(rewards.shape[0], dtype=dtype)
    g = dtype.type(gamma)
    acc = dtype.type(0.0)
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + g * acc
        out[t] = acc
    return out
