"""Supervision of one environment worker process over its stdin/stdout pipes."""

from __future__ import annotations

import os
import selectors
import shlex
import subprocess
import sys
import time
from typing import Sequence

import numpy as np

from batchrl.envs.core import EnvSpec, StepResult
from batchrl.errors import ContractViolation
from batchrl.ipc import protocol as wire

IDLE = "idle"
AWAITING = "awaiting_reply"
DEAD = "dead"

SPAWN_TIMEOUT = 30.0
REPLY_TIMEOUT = 60.0
CLOSE_TIMEOUT = 5.0


def default_worker_command() -> list[str]:
    return [sys.executable, "-m", "batchrl.ipc.worker"]


class SpawnError(RuntimeError):
    pass


class TransportError(RuntimeError):
    """The worker died, timed out, or sent an undecodable frame."""


class RemoteEnvError(RuntimeError):
    """The worker answered with an EXCEPTION frame."""


class EnvProcHandle:
    """One environment living in a child process.

    At most one request is in flight. ``send_step``/``send_reset`` return
    immediately and ``receive`` blocks for the reply, so a caller holding
    many handles can issue every request before collecting any reply.
    ``reset``/``step`` are the blocking pairings, which lets a handle stand
    in for an in-process environment inside :class:`~batchrl.envs.BatchEnv`.
    """

    def __init__(self, proc: subprocess.Popen, reply_timeout: float = REPLY_TIMEOUT):
        self.proc = proc
        self.reply_timeout = reply_timeout
        self.state = IDLE
        self.spec: EnvSpec | None = None
        self._buf = bytearray()
        self._selector = selectors.DefaultSelector()
        self._selector.register(proc.stdout, selectors.EVENT_READ)

    @property
    def pid(self) -> int:
        return self.proc.pid

    # -- request side -------------------------------------------------

    def _send(self, msg: wire.Message) -> None:
        if self.state == DEAD:
            raise TransportError("worker is dead")
        if self.state != IDLE:
            raise ContractViolation("a request is already in flight on this handle")
        try:
            os.write(self.proc.stdin.fileno(), wire.encode(msg))
        except OSError as exc:
            self._die()
            raise TransportError(f"worker pipe closed: {exc}") from exc
        self.state = AWAITING

    def send_step(self, action) -> None:
        self._send(wire.Step(np.asarray(action, dtype=np.float32)))

    def send_reset(self, seed: int | None = None) -> None:
        self._send(wire.Reset(seed))

    def send_spec(self) -> None:
        self._send(wire.SpecRequest())

    # -- reply side ---------------------------------------------------

    def _read_exact(self, n: int, deadline: float) -> bytes:
        fd = self.proc.stdout.fileno()
        while len(self._buf) < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or not self._selector.select(remaining):
                raise TransportError("timed out waiting for worker reply")
            chunk = os.read(fd, 65536)
            if not chunk:
                raise TransportError(f"worker exited (code {self.proc.poll()})")
            self._buf += chunk
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def receive(self, timeout: float | None = None):
        """Block for the reply to the in-flight request.

        Returns a :class:`StepResult` for STEP, an observation array for
        RESET and an :class:`EnvSpec` for SPEC.
        """
        if self.state == DEAD:
            raise TransportError("worker is dead")
        if self.state != AWAITING:
            raise ContractViolation("receive called with no request in flight")
        deadline = time.monotonic() + (self.reply_timeout if timeout is None else timeout)
        try:
            (length,) = wire.HEADER.unpack(self._read_exact(wire.HEADER.size, deadline))
            if length == 0 or length > wire.MAX_FRAME:
                raise wire.ProtocolError(f"bad frame length {length}")
            msg = wire.decode_payload(self._read_exact(length, deadline))
        except (TransportError, wire.ProtocolError) as exc:
            self._die()
            if isinstance(exc, TransportError):
                raise
            raise TransportError(f"malformed frame from worker: {exc}") from exc
        self.state = IDLE
        if isinstance(msg, wire.RemoteException):
            raise RemoteEnvError(msg.message)
        if isinstance(msg, wire.StepReply):
            return StepResult(msg.obs, msg.reward, msg.done)
        if isinstance(msg, wire.Obs):
            return msg.obs
        if isinstance(msg, wire.SpecReply):
            if msg.version != wire.PROTOCOL_VERSION:
                self._die()
                raise TransportError(f"worker speaks protocol {msg.version}, "
                                     f"expected {wire.PROTOCOL_VERSION}")
            return EnvSpec(msg.obs_dim, msg.act_dim, msg.action_low, msg.action_high,
                           msg.max_episode_steps)
        self._die()
        raise TransportError(f"unexpected {type(msg).__name__} frame from worker")

    # -- blocking conveniences ------------------------------------------

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.send_reset(seed)
        return self.receive()

    def step(self, action) -> StepResult:
        self.send_step(action)
        return self.receive()

    # -- lifecycle ------------------------------------------------------

    def _die(self) -> None:
        self.state = DEAD
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()
        self._release()

    def _release(self) -> None:
        for stream in (self.proc.stdin, self.proc.stdout):
            if stream is not None and not stream.closed:
                try:
                    stream.close()
                except OSError:
                    pass
        try:
            self._selector.close()
        except (OSError, ValueError):
            pass

    def close(self) -> None:
        """Ask the worker to exit; kill it after a grace period. Idempotent."""
        if self.state == DEAD:
            return
        self.state = DEAD
        try:
            os.write(self.proc.stdin.fileno(), wire.encode(wire.Close()))
        except (OSError, ValueError):
            pass
        try:
            self.proc.wait(timeout=CLOSE_TIMEOUT)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()
        self._release()

    def __del__(self):
        if getattr(self, "state", DEAD) != DEAD and self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()


def spawn(worker_command: str | Sequence[str] | None, env_name: str, seed: int,
          timeout: float = SPAWN_TIMEOUT, reply_timeout: float = REPLY_TIMEOUT) -> EnvProcHandle:
    """Launch ``<worker> --env <name> --seed <n>`` and complete the SPEC handshake."""
    if worker_command is None:
        cmd = default_worker_command()
    elif isinstance(worker_command, str):
        cmd = shlex.split(worker_command)
    else:
        cmd = list(worker_command)
    cmd += ["--env", env_name, "--seed", str(int(seed))]
    try:
        proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0)
    except OSError as exc:
        raise SpawnError(f"could not launch {cmd[0]!r}: {exc}") from exc
    handle = EnvProcHandle(proc, reply_timeout)
    try:
        handle.send_spec()
        handle.spec = handle.receive(timeout=timeout)
    except (TransportError, RemoteEnvError, ContractViolation) as exc:
        handle._die()
        raise SpawnError(f"handshake with {cmd[0]!r} for env {env_name!r} failed: {exc}") from exc
    return handle


def spawn_many(worker_command, env_name: str, seeds: Sequence[int], **kwargs) -> list[EnvProcHandle]:
    handles: list[EnvProcHandle] = []
    try:
        for seed in seeds:
            handles.append(spawn(worker_command, env_name, seed, **kwargs))
    except BaseException:
        for h in handles:
            h.close()
        raise
    return handles
