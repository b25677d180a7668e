"""Find the earliest commit in the report-to-verification window that stops the crash."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from vulnrepro.buildspec import resolve_commit_by_timestamp
from vulnrepro.corpus import Corpus
from vulnrepro.errors import NoCandidates, NoCommitBefore, NonMonotone, RuleApplicationError, RunTimeout
from vulnrepro.executor.base import CLEAN, CRASH, CommitInfo, ExecutionBackend, to_utc
from vulnrepro.ingest import DependencyPin, IssueRecord, SrcMap
from vulnrepro.reproducer import build_revision
from vulnrepro.resources import RuleStore

log = logging.getLogger(__name__)

BUILD_FAILED = "build_failed"
OUTCOMES = (CRASH, CLEAN, BUILD_FAILED)

LOCATED = "Located"
UNRESOLVED = "Unresolved"

MAX_LINEAR_STEPS = 10


@dataclass(frozen=True)
class CommitRange:
    candidates: tuple[CommitInfo, ...]
    low_anchor: str
    high_anchor: str

    def __post_init__(self):
        times = [c.timestamp for c in self.candidates]
        if times != sorted(times):
            raise ValueError("candidates must ascend by timestamp")

    def __len__(self):
        return len(self.candidates)

    def index(self, commit: str) -> int:
        for i, c in enumerate(self.candidates):
            if c.commit == commit:
                return i
        raise KeyError(commit)


@dataclass
class BisectionState:
    known_crashing: int
    known_clean: int
    probed: dict[int, str] = field(default_factory=dict)
    steps_used: int = 0


@dataclass
class FixResult:
    status: str
    fix_commit: str | None = None
    reason: str = ""
    probes: int = 0
    build_failures: int = 0
    transcript: list[dict[str, Any]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def located(self) -> bool:
        return self.status == LOCATED

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FixResult":
        return cls(**dict(d))


def _as_commit(entry) -> CommitInfo:
    if isinstance(entry, CommitInfo):
        return entry
    commit, ts, *rest = entry
    return CommitInfo(commit, to_utc(ts), tuple(rest[0]) if rest else ())


def commit_window(
    history: Iterable,
    after: datetime,
    until: datetime,
    low_anchor: str,
    high_anchor: str,
) -> CommitRange:
    """Commits with ``after < timestamp <= until``, cut after ``high_anchor`` if present."""
    after, until = to_utc(after), to_utc(until)
    commits = sorted((_as_commit(e) for e in history), key=lambda c: c.timestamp)
    picked = [c for c in commits if after < c.timestamp <= until and c.commit != low_anchor]
    for i, c in enumerate(picked):
        if c.commit == high_anchor:
            picked = picked[: i + 1]
            break
    if not picked:
        raise NoCandidates(f"no commits in ({after.isoformat()}, {until.isoformat()}]")
    return CommitRange(tuple(picked), low_anchor, high_anchor)


def enumerate_candidates(history: Iterable, issue: IssueRecord) -> CommitRange:
    """Timestamp-ordered candidates between report and verification.

    Commits from any branch qualify; ordering is by time, not topology.
    """
    if issue.report_time is None or issue.verify_time is None:
        raise NoCandidates(f"issue {issue.local_id} lacks report or verify time")
    return commit_window(history, issue.report_time, issue.verify_time,
                         issue.vulnerable_ref.main_revision, issue.verified_ref.main_revision)


def align_dependencies(
    candidate: CommitInfo,
    dep_histories: Mapping[str, tuple[DependencyPin, Sequence[CommitInfo]]],
) -> list[DependencyPin]:
    """Pin each dependency to its latest commit no later than the candidate."""
    pins = []
    for path in sorted(dep_histories):
        template, history = dep_histories[path]
        rev = resolve_commit_by_timestamp([(c.commit, c.timestamp) for c in history], candidate.timestamp)
        pins.append(replace(template, revision=rev))
    return pins


def _check_monotone(probed: Mapping[int, str]) -> None:
    crashes = [i for i, r in probed.items() if r == CRASH]
    cleans = [i for i, r in probed.items() if r == CLEAN]
    if crashes and cleans and min(cleans) < max(crashes):
        raise NonMonotone(f"clean at {min(cleans)} below crash at {max(crashes)}", probed)


def bisect_fix(
    rng: CommitRange,
    probe: Callable[[CommitInfo], str],
    max_linear: int = MAX_LINEAR_STEPS,
    known: Mapping[int, str] | None = None,
) -> FixResult:
    """Binary search for the first clean candidate after a crashing one.

    The low anchor counts as crashing (index -1). An unbuildable midpoint
    is replaced by the nearest buildable neighbour, probing mid+1, mid-1,
    mid+2, ... inside the open interval for at most ``max_linear`` steps.
    """
    n = len(rng.candidates)
    state = BisectionState(-1, n, dict(known or {}))
    _check_monotone(state.probed)
    transcript: list[dict[str, Any]] = []

    def run(i: int) -> str:
        if i not in state.probed:
            outcome = probe(rng.candidates[i])
            if outcome not in OUTCOMES:
                raise ValueError(f"probe returned {outcome!r}")
            state.probed[i] = outcome
            transcript.append({"index": i, "commit": rng.candidates[i].commit, "outcome": outcome})
            _check_monotone(state.probed)
        return state.probed[i]

    def settle(mid: int) -> tuple[int, str] | None:
        outcome = run(mid)
        if outcome != BUILD_FAILED:
            return mid, outcome
        steps = 0
        k = 1
        lo, hi = state.known_crashing, state.known_clean
        while steps < max_linear and (mid + k < hi or mid - k > lo):
            for j in (mid + k, mid - k):
                if lo < j < hi and steps < max_linear:
                    steps += 1
                    outcome = run(j)
                    if outcome != BUILD_FAILED:
                        state.steps_used += steps
                        return j, outcome
            k += 1
        state.steps_used += steps
        return None

    def result(status, commit=None, reason=""):
        fresh = {t["index"] for t in transcript}
        return FixResult(
            status, commit, reason,
            probes=len(fresh),
            build_failures=sum(1 for i in fresh if state.probed[i] == BUILD_FAILED),
            transcript=transcript,
        )

    if n == 0:
        return result(UNRESOLVED, reason="empty range")

    for i, outcome in sorted(state.probed.items()):
        if outcome == CRASH:
            state.known_crashing = max(state.known_crashing, i)
        elif outcome == CLEAN:
            state.known_clean = min(state.known_clean, i)

    if state.known_clean == n:
        found = settle(n - 1)
        if found is None:
            return result(UNRESOLVED, reason="unbuildable region")
        j, outcome = found
        if outcome == CRASH:
            reason = "fixed anchor still crashes" if j == n - 1 else "no buildable clean candidate"
            return result(UNRESOLVED, reason=reason)
        state.known_clean = j

    while state.known_clean - state.known_crashing > 1:
        mid = (state.known_crashing + state.known_clean) // 2
        found = settle(mid)
        if found is None:
            return result(UNRESOLVED, reason="unbuildable region")
        j, outcome = found
        if outcome == CRASH:
            state.known_crashing = j
        else:
            state.known_clean = j
    return result(LOCATED, rng.candidates[state.known_clean].commit)


def dependency_histories(
    srcmap: SrcMap, backend: ExecutionBackend
) -> tuple[dict[str, tuple[DependencyPin, list[CommitInfo]]], list[DependencyPin], list[str]]:
    """Histories for every dependency; those without one stay at their srcmap pin."""
    histories, fixed, warnings = {}, [], []
    for dep in srcmap.dependencies:
        try:
            history = backend.commit_history(dep.url)
        except (KeyError, NotImplementedError, RuntimeError) as exc:
            warnings.append(f"no history for {dep.path}; keeping {dep.revision}: {exc}")
            fixed.append(dep)
            continue
        if not history:
            fixed.append(dep)
            continue
        histories[dep.path] = (dep, history)
    return histories, fixed, warnings


class RevisionProber:
    """Builds a main-project commit with time-aligned dependencies and runs the PoC.

    A fetch failure that survives the rule retry, a timeout, or a missing
    dependency commit are all inconclusive and reported as build failures.
    """

    def __init__(self, issue: IssueRecord, main: DependencyPin, backend: ExecutionBackend,
                 store: RuleStore, corpus: Corpus,
                 dep_histories: Mapping[str, tuple[DependencyPin, Sequence[CommitInfo]]],
                 fixed_pins: Sequence[DependencyPin] = (), poc: bytes | None = None):
        self.issue = issue
        self.main = main
        self.backend = backend
        self.store = store
        self.corpus = corpus
        self.dep_histories = dep_histories
        self.fixed_pins = list(fixed_pins)
        self.poc = corpus.poc(issue) if poc is None else poc
        self.records: dict[str, dict[str, Any]] = {}

    def __call__(self, candidate: CommitInfo) -> str:
        record: dict[str, Any] = {"commit": candidate.commit}
        self.records[candidate.commit] = record
        try:
            deps = align_dependencies(candidate, self.dep_histories) + self.fixed_pins
        except NoCommitBefore as exc:
            record.update(outcome=BUILD_FAILED, detail=str(exc))
            return BUILD_FAILED
        main = replace(self.main, revision=candidate.commit)
        record["pins"] = {p.path: p.revision for p in deps}
        try:
            attempt = build_revision(self.issue, [main, *deps], main, self.backend, self.store, self.corpus,
                                     f"{self.issue.local_id}-probe-{candidate.commit[:12]}")
        except RuleApplicationError as exc:
            record.update(outcome=BUILD_FAILED, detail=str(exc))
            return BUILD_FAILED
        record["applied_rules"] = attempt.applied_rules
        if not attempt.outcome.ok:
            record.update(outcome=BUILD_FAILED, detail=attempt.outcome.status)
            return BUILD_FAILED
        try:
            run = self.backend.run_poc(attempt.outcome.artifact_id, self.poc)
        except RunTimeout as exc:
            record.update(outcome=BUILD_FAILED, detail=f"inconclusive: {exc}")
            return BUILD_FAILED
        outcome = CRASH if run.crashed else CLEAN
        record.update(outcome=outcome, crash_type=run.crash_type)
        return outcome


def is_ancestor(history: Sequence[CommitInfo], ancestor: str, descendant: str) -> bool:
    parents = {c.commit: c.parents for c in history}
    seen, stack = set(), [descendant]
    while stack:
        c = stack.pop()
        if c == ancestor:
            return True
        if c in seen:
            continue
        seen.add(c)
        stack.extend(parents.get(c, ()))
    return False


def merge_transcript(result: FixResult, prober: RevisionProber) -> None:
    for entry in result.transcript:
        extra = prober.records.get(entry["commit"], {})
        entry.update({k: v for k, v in extra.items() if k not in entry})


def locate_fix(
    issue: IssueRecord,
    backend: ExecutionBackend,
    store: RuleStore,
    corpus: Corpus,
    *,
    max_linear: int = MAX_LINEAR_STEPS,
    transcript_path: str | Path | None = None,
) -> FixResult:
    """Enumerate candidates, probe them with aligned dependencies, bisect."""
    _, fix_map = corpus.srcmaps(issue)
    main = fix_map.main
    history = backend.commit_history(main.url)
    try:
        rng = enumerate_candidates(history, issue)
    except NoCandidates as exc:
        return FixResult(UNRESOLVED, reason=str(exc))
    deps, fixed, warnings = dependency_histories(fix_map, backend)
    prober = RevisionProber(issue, main, backend, store, corpus, deps, fixed)
    try:
        result = bisect_fix(rng, prober, max_linear)
    except NonMonotone as exc:
        result = FixResult(UNRESOLVED, reason=f"non-monotone: {exc}",
                           transcript=[{"index": i, "commit": rng.candidates[i].commit, "outcome": o}
                                       for i, o in sorted(exc.probed.items())])
    merge_transcript(result, prober)
    result.warnings.extend(warnings)
    if result.located and not is_ancestor(history, result.fix_commit, rng.high_anchor):
        msg = f"{result.fix_commit} is not an ancestor of {rng.high_anchor}; it may sit on another branch"
        log.warning("issue %s: %s", issue.local_id, msg)
        result.warnings.append(msg)
    if transcript_path is not None:
        Path(transcript_path).write_text(json.dumps(result.transcript, indent=2) + "\n")
    return result
