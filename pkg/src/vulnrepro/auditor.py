"""Re-check issues marked fixed whose PoC may still crash."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import PurePosixPath
from typing import Any, Iterable, Mapping

from vulnrepro.corpus import Corpus
from vulnrepro.dataset import touched_files
from vulnrepro.errors import NoCandidates, NonMonotone, RuleApplicationError, RunTimeout
from vulnrepro.executor.base import CLEAN, CRASH, CommitInfo, ExecutionBackend
from vulnrepro.fixlocator import (
    BUILD_FAILED,
    MAX_LINEAR_STEPS,
    FixResult,
    RevisionProber,
    bisect_fix,
    commit_window,
    dependency_histories,
    merge_transcript,
)
from vulnrepro.ingest import IssueRecord
from vulnrepro.reproducer import build_revision
from vulnrepro.resources import RuleStore

CONFIRMED_FIXED = "ConfirmedFixed"
POTENTIAL_ZERO_DAY = "PotentialZeroDay"
BROKEN_REPORT = "BrokenReport"
NEEDS_MANUAL_REVIEW = "NeedsManualReview"
CATEGORIES = (CONFIRMED_FIXED, POTENTIAL_ZERO_DAY, BROKEN_REPORT, NEEDS_MANUAL_REVIEW)

search_true_fix = bisect_fix

_REPORT_PATH_RE = re.compile(r"([\w./+-]+\.(?:c|cc|cpp|cxx|h|hh|hpp|hxx|inc|rs|go|m|mm))(?::\d+)?")


@dataclass
class AuditVerdict:
    local_id: int
    category: str
    located: str | None = None
    needs_manual_review: bool = False
    latest: str | None = None
    reason: str = ""
    evidence: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown audit category {self.category!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AuditVerdict":
        return cls(**dict(d))


def report_files(report_text: str | None) -> set[str]:
    """Basenames of source files mentioned in a sanitizer report."""
    if not report_text:
        return set()
    return {PurePosixPath(m.group(1)).name for m in _REPORT_PATH_RE.finditer(report_text)}


def diff_mentions_report(diff: str, report_text: str | None) -> bool:
    named = report_files(report_text)
    return any(PurePosixPath(p).name in named for p in touched_files(diff))


def _probe_recorded_fix(issue, backend, store, corpus, poc, evidence) -> str:
    artifact = backend.fetch_prebuilt(issue, "fix") if backend.supports_prebuilt else None
    source = "prebuilt"
    if artifact is None:
        source = "rebuilt"
        _, fix_map = corpus.srcmaps(issue)
        try:
            attempt = build_revision(issue, fix_map.pins, fix_map.main, backend, store, corpus,
                                     f"{issue.local_id}-audit-fix")
        except RuleApplicationError as exc:
            evidence.append({"stage": "recorded-fix", "outcome": BUILD_FAILED, "detail": str(exc)})
            return BUILD_FAILED
        if not attempt.outcome.ok:
            evidence.append({"stage": "recorded-fix", "outcome": BUILD_FAILED, "detail": attempt.outcome.status})
            return BUILD_FAILED
        artifact = attempt.outcome.artifact_id
    try:
        run = backend.run_poc(artifact, poc)
    except RunTimeout as exc:
        evidence.append({"stage": "recorded-fix", "source": source, "outcome": BUILD_FAILED, "detail": str(exc)})
        return BUILD_FAILED
    outcome = CRASH if run.crashed else CLEAN
    evidence.append({"stage": "recorded-fix", "source": source, "outcome": outcome, "crash_type": run.crash_type})
    return outcome


def audit_issue(
    issue: IssueRecord,
    latest: CommitInfo | None,
    backend: ExecutionBackend,
    store: RuleStore,
    corpus: Corpus,
    *,
    max_linear: int = MAX_LINEAR_STEPS,
) -> AuditVerdict:
    """Classify a possibly false-positive fix.

    The recorded fix is probed first (a prebuilt binary when available).
    If it still crashes, the latest main-project commit decides: a crash
    there is a potential zero-day, a clean run triggers a search for the
    commit that actually stopped the crash. ``latest`` defaults to the
    default-branch tip.
    """
    evidence: list[dict[str, Any]] = []
    poc = corpus.poc(issue)
    if _probe_recorded_fix(issue, backend, store, corpus, poc, evidence) == CLEAN:
        return AuditVerdict(issue.local_id, CONFIRMED_FIXED, reason="recorded fix is clean", evidence=evidence)

    _, fix_map = corpus.srcmaps(issue)
    main = fix_map.main
    history = backend.commit_history(main.url)
    if latest is None:
        latest = backend.tip(main.url)
    deps, fixed, _ = dependency_histories(fix_map, backend)
    prober = RevisionProber(issue, main, backend, store, corpus, deps, fixed, poc)

    head = prober(latest)
    evidence.append({"stage": "latest", **prober.records[latest.commit]})
    verdict = dict(local_id=issue.local_id, latest=latest.commit, evidence=evidence)
    if head == CRASH:
        return AuditVerdict(category=POTENTIAL_ZERO_DAY, reason="latest revision still crashes", **verdict)
    if head == BUILD_FAILED:
        return AuditVerdict(category=NEEDS_MANUAL_REVIEW, reason="latest revision unbuildable", **verdict)

    recorded = next((c for c in history if c.commit == main.revision), None)
    after = recorded.timestamp if recorded else issue.verify_time
    try:
        rng = commit_window(history, after, latest.timestamp, main.revision, latest.commit)
    except NoCandidates as exc:
        return AuditVerdict(category=NEEDS_MANUAL_REVIEW, reason=str(exc), **verdict)
    known = {i: CLEAN for i, c in enumerate(rng.candidates) if c.commit == latest.commit}
    try:
        result: FixResult = search_true_fix(rng, prober, max_linear, known=known)
    except NonMonotone as exc:
        return AuditVerdict(category=NEEDS_MANUAL_REVIEW, reason=f"non-monotone: {exc}", **verdict)
    merge_transcript(result, prober)
    evidence.extend({"stage": "search", **t} for t in result.transcript)
    if not result.located:
        return AuditVerdict(category=NEEDS_MANUAL_REVIEW, reason=result.reason, **verdict)
    try:
        diff = backend.commit_diff(main.url, result.fix_commit)
    except (KeyError, NotImplementedError, RuntimeError):
        diff = ""
    unrelated = not diff_mentions_report(diff, issue.crash.report_text)
    return AuditVerdict(category=BROKEN_REPORT, located=result.fix_commit, needs_manual_review=unrelated,
                        reason="later commit stops the crash", **verdict)


def render_disclosure(issue: IssueRecord, verdict: AuditVerdict) -> str:
    """Plain-text advisory draft for a potential zero-day."""
    if verdict.category != POTENTIAL_ZERO_DAY:
        raise ValueError("disclosures are only drafted for potential zero-days")
    return "\n".join([
        f"Subject: [{issue.project}] PoC from issue {issue.local_id} still crashes the latest revision",
        "",
        f"Project:        {issue.project}",
        f"Issue:          {issue.local_id}",
        f"Crash type:     {issue.crash.crash_type}",
        f"Sanitizer:      {issue.crash.sanitizer}",
        f"Fuzz target:    {issue.crash.fuzzer}",
        f"Recorded fix:   {issue.verified_ref.main_revision}",
        f"Tested against: {verdict.latest}",
        f"Testcase:       {issue.poc.digest} ({issue.poc.size} bytes)",
        "",
        "The issue is marked fixed, yet the original testcase still triggers a",
        "sanitizer crash on the latest revision built with dependencies pinned",
        "to the same date. Please treat this as an open vulnerability.",
        "",
    ])


def summarize_audits(verdicts: Iterable[AuditVerdict]) -> tuple[dict[str, int], str]:
    """Counts per category plus a plain-text table."""
    verdicts = list(verdicts)
    counts = Counter(v.category for v in verdicts)
    table = {c: counts.get(c, 0) for c in CATEGORIES}
    table["BrokenReport (manual review)"] = sum(1 for v in verdicts if v.category == BROKEN_REPORT and v.needs_manual_review)
    table["total"] = len(verdicts)
    width = max(len(k) for k in table)
    return table, "\n".join(f"{k.ljust(width)}  {v}" for k, v in table.items())
