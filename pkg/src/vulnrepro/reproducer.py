"""Rebuild vulnerable and fixed revisions and check the PoC against both."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

from vulnrepro.buildspec import BuildSpec, pin_revisions, render_pin_log
from vulnrepro.corpus import Corpus
from vulnrepro.errors import BackendUnavailable, MissingSrcMap, RuleApplicationError, RunTimeout, VulnReproError
from vulnrepro.executor.base import FETCH_ERROR, BuildOutcome, BuildRequest, ExecutionBackend
from vulnrepro.ingest import DependencyPin, IssueRecord
from vulnrepro.resources import RuleStore, apply_rules, detect_broken_resources, matching_rules

log = logging.getLogger(__name__)

REPRODUCED = "Reproduced"
VERIFIED = "Verified"

BUILD_FAILED = "BuildFailed"
FETCH_FAILED = "FetchFailed"
VULN_NOT_REPRODUCED = "VulnNotReproduced"
FIXED_STILL_CRASHES = "FixedStillCrashes"
TIMEOUT = "Timeout"

NO_CRASH = "NoCrash"
CRASH = "Crash"
COMPILE_FAILED = "CompileFailed"


@dataclass(frozen=True)
class FailureClass:
    kind: str
    detail: str = ""


@dataclass
class StageRecord:
    name: str
    status: str
    applied_rules: list[str] = field(default_factory=list)
    pin_log: str = ""
    detail: str = ""
    crash_type: str | None = None
    duration: float = 0.0


@dataclass
class ReproductionReport:
    local_id: int
    vuln_outcome: str | FailureClass
    fix_outcome: str | FailureClass | None = None
    vuln_artifact: str | None = None
    fix_artifact: str | None = None
    applied_rules: list[str] = field(default_factory=list)
    elapsed: float = 0.0
    observed_crash_type: str | None = None
    crash_type_mismatch: bool = False
    stages: list[StageRecord] = field(default_factory=list)

    @property
    def reproduced(self) -> bool:
        return self.vuln_outcome == REPRODUCED

    @property
    def reproducible(self) -> bool:
        return self.vuln_outcome == REPRODUCED and self.fix_outcome == VERIFIED

    @property
    def failure(self) -> FailureClass | None:
        for outcome in (self.vuln_outcome, self.fix_outcome):
            if isinstance(outcome, FailureClass):
                return outcome
        return None

    def to_dict(self) -> dict[str, Any]:
        def enc(o):
            return asdict(o) if isinstance(o, FailureClass) else o

        d = asdict(self)
        d["vuln_outcome"] = enc(self.vuln_outcome)
        d["fix_outcome"] = enc(self.fix_outcome)
        d["reproducible"] = self.reproducible
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ReproductionReport":
        def dec(o):
            return FailureClass(**o) if isinstance(o, dict) else o

        d = dict(d)
        d.pop("reproducible", None)
        d["vuln_outcome"] = dec(d["vuln_outcome"])
        d["fix_outcome"] = dec(d.get("fix_outcome"))
        d["stages"] = [StageRecord(**s) for s in d.get("stages", [])]
        return cls(**d)


@dataclass
class BuildAttempt:
    outcome: BuildOutcome
    spec: BuildSpec
    applied_rules: list[str]
    pin_log: str
    retried: bool = False


def build_revision(
    issue: IssueRecord,
    pins: Sequence[DependencyPin],
    main_pin: DependencyPin,
    backend: ExecutionBackend,
    store: RuleStore,
    corpus: Corpus,
    workspace_id: str,
    *,
    eager_rules: bool = True,
    patches: tuple[tuple[str, str], ...] = (),
) -> BuildAttempt:
    """Pin, fix resources, build; on a fetch error retry once with new matching rules."""
    original = corpus.buildspec(issue.project)
    pinned, _ = pin_revisions(original, pins)
    pin_log = render_pin_log(original, pinned)
    spec, applied = apply_rules(pinned, store) if eager_rules else (pinned, [])

    def request(s: BuildSpec, rules: Sequence[str]) -> BuildRequest:
        return BuildRequest(
            spec=s,
            main_pin=main_pin,
            workspace_id=workspace_id,
            pins=tuple(pins),
            applied_rules=tuple(rules),
            run_command=issue.crash.run_command,
            context_dir=corpus.project_dir(issue.project),
            patches=patches,
            sanitizer=issue.crash.sanitizer,
        )

    outcome = backend.build(request(spec, applied))
    if outcome.status != FETCH_ERROR:
        return BuildAttempt(outcome, spec, applied, pin_log)

    broken = detect_broken_resources(outcome.log, spec)
    if not broken and outcome.url:
        broken = detect_broken_resources(f"fatal: unable to access '{outcome.url}'", spec)
    fresh = [r for r in matching_rules(store, broken) if r.rule_id not in applied]
    if not fresh:
        return BuildAttempt(outcome, spec, applied, pin_log)
    log.info("issue %s: retrying with rules %s", issue.local_id, [r.rule_id for r in fresh])
    spec, more = apply_rules(spec, RuleStore(tuple(fresh)))
    applied = applied + more
    outcome = backend.build(request(spec, applied))
    return BuildAttempt(outcome, spec, applied, pin_log, retried=True)


def _failure_for_build(attempt: BuildAttempt) -> FailureClass:
    outcome = attempt.outcome
    if outcome.status == FETCH_ERROR:
        broken = [b.url for b in detect_broken_resources(outcome.log, attempt.spec)] or [outcome.url]
        return FailureClass(FETCH_FAILED, f"{', '.join(map(str, broken))}: {outcome.log[-500:]}")
    return FailureClass(BUILD_FAILED, outcome.log[-500:])


def reproduce_issue(
    issue: IssueRecord,
    backend: ExecutionBackend,
    store: RuleStore,
    corpus: Corpus,
    *,
    eager_rules: bool = True,
) -> ReproductionReport:
    """Build the vulnerable revision, expect a crash; build the fixed one, expect none.

    The fixed revision is only attempted once the vulnerable one reproduced.
    Backend environment errors propagate; all other failures are recorded.
    """
    started = time.monotonic()
    report = ReproductionReport(issue.local_id, FailureClass(BUILD_FAILED, "not started"))
    try:
        vuln_map, fix_map = corpus.srcmaps(issue)
        poc = corpus.poc(issue)
    except (MissingSrcMap, FileNotFoundError, VulnReproError) as exc:
        report.vuln_outcome = FailureClass(BUILD_FAILED, f"{type(exc).__name__}: {exc}")
        report.elapsed = time.monotonic() - started
        return report

    def stage(which, srcmap):
        try:
            attempt = build_revision(issue, srcmap.pins, srcmap.main, backend, store, corpus,
                                     f"{issue.local_id}-{which}", eager_rules=eager_rules)
        except (BackendUnavailable, EnvironmentError):
            raise
        except RuleApplicationError as exc:
            report.stages.append(StageRecord(f"build-{which}", BUILD_FAILED, detail=str(exc)))
            return None, FailureClass(BUILD_FAILED, str(exc))
        for rid in attempt.applied_rules:
            if rid not in report.applied_rules:
                report.applied_rules.append(rid)
        out = attempt.outcome
        report.stages.append(StageRecord(f"build-{which}", out.status, attempt.applied_rules,
                                         attempt.pin_log, out.log[-500:] if not out.ok else "", None, out.duration))
        if not out.ok:
            return None, _failure_for_build(attempt)
        return out, None

    vuln_build, failure = stage("vul", vuln_map)
    if failure:
        report.vuln_outcome = failure
        report.elapsed = time.monotonic() - started
        return report
    report.vuln_artifact = vuln_build.artifact_id
    try:
        run = backend.run_poc(vuln_build.artifact_id, poc)
    except RunTimeout as exc:
        report.stages.append(StageRecord("run-vul", "timeout", detail=str(exc)))
        report.vuln_outcome = FailureClass(VULN_NOT_REPRODUCED, f"timeout: {exc}")
        report.elapsed = time.monotonic() - started
        return report
    report.stages.append(StageRecord("run-vul", run.status, crash_type=run.crash_type, duration=run.duration))
    if not run.crashed:
        report.vuln_outcome = FailureClass(VULN_NOT_REPRODUCED, f"exit {run.exit_code}, no crash")
        report.elapsed = time.monotonic() - started
        return report
    report.vuln_outcome = REPRODUCED
    report.observed_crash_type = run.crash_type
    report.crash_type_mismatch = bool(run.crash_type and run.crash_type != issue.crash.crash_type)

    fix_build, failure = stage("fix", fix_map)
    if failure:
        report.fix_outcome = failure
        report.elapsed = time.monotonic() - started
        return report
    report.fix_artifact = fix_build.artifact_id
    try:
        run = backend.run_poc(fix_build.artifact_id, poc)
    except RunTimeout as exc:
        report.stages.append(StageRecord("run-fix", "timeout", detail=str(exc)))
        report.fix_outcome = FailureClass(TIMEOUT, str(exc))
        report.elapsed = time.monotonic() - started
        return report
    report.stages.append(StageRecord("run-fix", run.status, crash_type=run.crash_type, duration=run.duration))
    if run.crashed:
        report.fix_outcome = FailureClass(FIXED_STILL_CRASHES, run.crash_type or "crash")
    else:
        report.fix_outcome = VERIFIED
    report.elapsed = time.monotonic() - started
    return report


def verify_candidate_patch(
    issue: IssueRecord,
    patch: str,
    backend: ExecutionBackend,
    corpus: Corpus,
    store: RuleStore | None = None,
) -> str:
    """Apply ``patch`` to the vulnerable tree, rebuild and rerun the PoC.

    Returns NoCrash, Crash or CompileFailed. A patch that does not apply
    raises PatchApplyError.
    """
    vuln_map, _ = corpus.srcmaps(issue)
    tag = hashlib.sha256(patch.encode()).hexdigest()[:12]
    attempt = build_revision(
        issue, vuln_map.pins, vuln_map.main, backend, store or RuleStore(), corpus,
        f"{issue.local_id}-patch-{tag}", patches=((vuln_map.main_path, patch),) if patch.strip() else (),
    )
    if not attempt.outcome.ok:
        return COMPILE_FAILED
    run = backend.run_poc(attempt.outcome.artifact_id, corpus.poc(issue))
    return CRASH if run.crashed else NO_CRASH
