"""Native environments and the name registry."""

from __future__ import annotations

from batchrl.envs.core import BatchEnv, BatchStepResult, Env, EnvSpec, StepResult
from batchrl.envs.lq import LinearQuadratic1D
from batchrl.envs.pendulum import Pendulum

REGISTRY = {
    "lq1d": LinearQuadratic1D,
    "pendulum": Pendulum,
}


def make(name: str, seed: int | None = None, **kwargs) -> Env:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; registered: {', '.join(sorted(REGISTRY))}") from None
    return cls(seed=seed, **kwargs)


__all__ = ["REGISTRY", "make", "BatchEnv", "BatchStepResult", "Env", "EnvSpec", "StepResult",
           "LinearQuadratic1D", "Pendulum"]
