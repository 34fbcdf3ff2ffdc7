"""External-process environments: wire protocol, process handles, worker."""

from batchrl.ipc.process import (EnvProcHandle, RemoteEnvError, SpawnError, TransportError,
                                 default_worker_command, spawn, spawn_many)

__all__ = ["EnvProcHandle", "RemoteEnvError", "SpawnError", "TransportError",
           "default_worker_command", "spawn", "spawn_many"]
