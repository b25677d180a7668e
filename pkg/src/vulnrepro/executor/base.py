from __future__ import annotations

import hashlib
import re
import signal
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from vulnrepro.buildspec import BuildSpec
from vulnrepro.ingest import DependencyPin, IssueRecord

SUCCESS = "success"
COMPILE_ERROR = "compile_error"
FETCH_ERROR = "fetch_error"

CRASH = "crash"
CLEAN = "clean"


@dataclass(frozen=True)
class BuildRequest:
    spec: BuildSpec
    main_pin: DependencyPin
    workspace_id: str
    pins: tuple[DependencyPin, ...] = ()
    applied_rules: tuple[str, ...] = ()
    run_command: tuple[str, ...] = ()
    context_dir: Path | None = None
    patches: tuple[tuple[str, str], ...] = ()  # (srcmap path, unified diff)
    sanitizer: str = "address"


@dataclass(frozen=True)
class BuildOutcome:
    status: str
    artifact_id: str | None = None
    log: str = ""
    url: str | None = None
    duration: float = 0.0
    checked_out: Mapping[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == SUCCESS


@dataclass(frozen=True)
class RunOutcome:
    status: str
    exit_code: int
    duration: float = 0.0
    crash_type: str | None = None
    stderr: str = ""

    @property
    def crashed(self) -> bool:
        return self.status == CRASH


@dataclass(frozen=True)
class CommitInfo:
    commit: str
    timestamp: datetime
    parents: tuple[str, ...] = ()

    @property
    def is_merge(self) -> bool:
        return len(self.parents) > 1


class ExecutionBackend:
    """Build-and-run substrate.

    Subclasses implement ``build`` and ``run_poc``; history queries and
    prebuilt downloads are optional capabilities.
    """

    name = "abstract"
    supports_prebuilt = False

    def build(self, req: BuildRequest) -> BuildOutcome:
        raise NotImplementedError

    def run_poc(self, artifact_id: str, poc: bytes) -> RunOutcome:
        raise NotImplementedError

    def fetch_prebuilt(self, issue: IssueRecord, which: str) -> str | None:
        return None

    def commit_history(self, url: str) -> list[CommitInfo]:
        raise NotImplementedError(f"{self.name} backend cannot read history")

    def commit_diff(self, url: str, commit: str) -> str:
        raise NotImplementedError(f"{self.name} backend cannot read diffs")

    def tip(self, url: str) -> CommitInfo:
        return self.commit_history(url)[-1]


def to_utc(value) -> datetime:
    if isinstance(value, datetime):
        return value if value.tzinfo else value.replace(tzinfo=timezone.utc)
    if isinstance(value, (int, float)):
        return datetime.fromtimestamp(value, tz=timezone.utc)
    from vulnrepro.ingest import parse_timestamp

    return parse_timestamp(value)


def poc_digest(poc: bytes) -> str:
    return "sha256:" + hashlib.sha256(poc).hexdigest()


# -- crash classification ---------------------------------------------------

_SANITIZER_RE = re.compile(
    r"ERROR: (?P<tool>AddressSanitizer|MemorySanitizer|ThreadSanitizer|LeakSanitizer|"
    r"UndefinedBehaviorSanitizer|libFuzzer): (?P<what>.+)"
)
_UBSAN_RE = re.compile(r"runtime error: ")

_PHRASES = (
    ("attempting double-free", "double-free"),
    ("attempting free on address which was not malloc", "bad-free"),
    ("SEGV on unknown address", "unknown-address"),
    ("detected memory leaks", "memory-leak"),
    ("use-of-uninitialized-value", "use-of-uninitialized-value"),
    ("deadly signal", "deadly-signal"),
    ("out-of-memory", "out-of-memory"),
    ("timeout", "timeout"),
)

SANITIZER_MARKERS = ("==ERROR: ", "SUMMARY: AddressSanitizer", "SUMMARY: UndefinedBehaviorSanitizer",
                     "SUMMARY: MemorySanitizer", "runtime error: ")


def classify_crash(stderr: str, returncode: int) -> str | None:
    """Crash class from sanitizer output or termination signal; None if clean."""
    m = _SANITIZER_RE.search(stderr)
    if m:
        what = m.group("what")
        for phrase, label in _PHRASES:
            if phrase in what:
                return label
        return what.split()[0].rstrip(":")
    if _UBSAN_RE.search(stderr):
        return "undefined-behavior"
    if returncode < 0:
        try:
            return f"signal-{signal.Signals(-returncode).name}"
        except ValueError:
            return f"signal-{-returncode}"
    if any(marker in stderr for marker in SANITIZER_MARKERS):
        return "unknown"
    return None


def step_header(n: int, total: int, directive_text: str) -> str:
    first = directive_text.strip().split("\n", 1)[0]
    return f"Step {n}/{total} : {first}"


def srcmap_path_for(name: str) -> str:
    return f"/src/{name}"


def pins_by_path(pins: Sequence[DependencyPin]) -> dict[str, str]:
    return {p.path: p.revision for p in pins}
