"""Build-and-run substrates: simulated, local host, container."""

from vulnrepro.executor.base import (
    CLEAN,
    COMPILE_ERROR,
    CRASH,
    FETCH_ERROR,
    SUCCESS,
    BuildOutcome,
    BuildRequest,
    CommitInfo,
    ExecutionBackend,
    RunOutcome,
    classify_crash,
)
from vulnrepro.executor.container import ContainerBackend
from vulnrepro.executor.local import LocalBackend
from vulnrepro.executor.sim import SimulatedBackend

__all__ = [
    "CLEAN",
    "COMPILE_ERROR",
    "CRASH",
    "FETCH_ERROR",
    "SUCCESS",
    "BuildOutcome",
    "BuildRequest",
    "CommitInfo",
    "ContainerBackend",
    "ExecutionBackend",
    "LocalBackend",
    "RunOutcome",
    "SimulatedBackend",
    "classify_crash",
]
