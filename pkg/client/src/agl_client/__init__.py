"""Client SDK for the agl environment service.

Speaks the newline-delimited JSON protocol and nothing else; the
server side may be a local subprocess, a remote TCP endpoint, or any
pair of streams.
"""

from agl_client.client import (
    ClientError,
    EnvClient,
    EpisodeResult,
    LocalServer,
    ServiceError,
    SessionHandle,
    StepResult,
    TrajectoryWriter,
    TransportError,
    run_episode,
)

__version__ = "0.1.0"

__all__ = [
    "ClientError",
    "EnvClient",
    "EpisodeResult",
    "LocalServer",
    "ServiceError",
    "SessionHandle",
    "StepResult",
    "TrajectoryWriter",
    "TransportError",
    "run_episode",
    "__version__",
]
