"""Streaming mean/variance statistics used to normalize observations and rewards."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from batchrl.errors import ContractViolation

STD_FLOOR = 1e-6
OBS_CLIP = 10.0


@dataclass(frozen=True)
class StreamingStats:
    """Count, mean and sum of squared deviations, merged with Chan's formula.

    Aggregates are kept in float64; normalized outputs are float32.
    """

    count: float
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "StreamingStats":
        return cls(0.0, np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def variance(self) -> np.ndarray:
        if self.count <= 0:
            return np.zeros_like(self.m2)
        return self.m2 / self.count

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def update(s: StreamingStats, batch) -> StreamingStats:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[:, None]
    if batch.ndim != 2 or batch.shape[1] != s.dim:
        raise ContractViolation(f"batch shape {batch.shape} does not match stats dim {s.dim}")
    n = batch.shape[0]
    if n == 0:
        return s
    if not np.all(np.isfinite(batch)):
        raise ContractViolation("batch contains non-finite values")
    b_mean = batch.mean(axis=0)
    b_m2 = np.sum((batch - b_mean) ** 2, axis=0)
    total = s.count + n
    delta = b_mean - s.mean
    mean = s.mean + delta * (n / total)
    m2 = s.m2 + b_m2 + delta * delta * (s.count * n / total)
    return StreamingStats(total, mean, m2)


def normalize_obs(s: StreamingStats, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if s.count < 2:
        return x
    std = np.maximum(s.std, STD_FLOOR)
    out = np.clip((x - s.mean) / std, -OBS_CLIP, OBS_CLIP)
    return out.astype(np.float32)


def normalize_reward(s: StreamingStats, r) -> np.ndarray:
    """Scale rewards by the running std; rewards are never re-centered."""
    r = np.asarray(r, dtype=np.float32)
    if s.count < 2:
        return r
    std = max(float(s.std[0]), STD_FLOOR)
    return (r / std).astype(np.float32)
