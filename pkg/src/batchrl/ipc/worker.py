"""Environment worker: hosts one native environment and serves frames on stdin/stdout.

Usage: ``python -m batchrl.ipc.worker --env <name> --seed <n> [--delay-ms <ms>]``
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from batchrl import envs
from batchrl.envs.core import Env, EnvSpec
from batchrl.ipc import protocol as wire

F32_MAX = float(np.finfo(np.float32).max)


class Echo(Env):
    """Returns the action as the next observation. Used for wire round-trip checks."""

    def __init__(self, seed: int | None = None, dim: int = 3):
        super().__init__(seed)
        bound = np.full(dim, F32_MAX)
        self.spec = EnvSpec(dim, dim, -bound, bound, 1_000_000)

    def _reset(self):
        return self.rng.uniform(-1.0, 1.0, size=self.spec.obs_dim)

    def _step(self, action):
        return action, 0.0, False


WORKER_ENVS = {**envs.REGISTRY, "echo": Echo}


def serve(env: Env, stdin, stdout, delay: float = 0.0) -> int:
    """Answer frames until CLOSE or end of input. Returns the exit code."""
    while True:
        try:
            payload = wire.read_frame(stdin)
        except EOFError:
            return 0
        except wire.ProtocolError as exc:
            # The length prefix is unusable, so framing cannot be recovered.
            wire.write_message(stdout, wire.RemoteException(str(exc)))
            return 1
        try:
            msg = wire.decode_payload(payload)
            if isinstance(msg, wire.Close):
                env.close()
                return 0
            if isinstance(msg, wire.SpecRequest):
                s = env.spec
                reply = wire.SpecReply(s.obs_dim, s.act_dim, s.max_episode_steps,
                                       s.action_low, s.action_high)
            elif isinstance(msg, wire.Reset):
                reply = wire.Obs(env.reset(msg.seed))
            elif isinstance(msg, wire.Step):
                if delay:
                    time.sleep(delay)
                result = env.step(msg.action)
                reply = wire.StepReply(result.obs, result.reward, result.done)
            else:
                raise wire.ProtocolError(f"workers do not accept {type(msg).__name__} frames")
        except Exception as exc:
            reply = wire.RemoteException(f"{type(exc).__name__}: {exc}")
        try:
            wire.write_message(stdout, reply)
        except BrokenPipeError:
            return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="batchrl-worker")
    parser.add_argument("--env", required=True, choices=sorted(WORKER_ENVS))
    parser.add_argument("--seed", type=int, required=True)
    parser.add_argument("--delay-ms", type=float, default=0.0,
                        help="sleep this long before answering each STEP")
    args = parser.parse_args(argv)
    env = WORKER_ENVS[args.env](seed=args.seed)
    return serve(env, sys.stdin.buffer, sys.stdout.buffer, args.delay_ms / 1000.0)


if __name__ == "__main__":
    sys.exit(main())
