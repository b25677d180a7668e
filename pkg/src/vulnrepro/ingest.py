"""Issue metadata and srcmap parsing, plus candidate selection."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping

from vulnrepro.errors import (
    MainProjectMissing,
    MissingPoC,
    ParseError,
    UnsupportedVcs,
)

POC_PLACEHOLDER = "@@"

REQUIRED_LABELS = frozenset({"Bug-Security", "Reproducible", "Verified"})

# srcmap "type" values -> canonical vcs kind
_VCS_KINDS = {"git": "git", "hg": "mercurial", "mercurial": "mercurial", "svn": "svn"}
_VCS_TAGS = {"git": "git", "mercurial": "hg", "svn": "svn"}

_URL_PATTERNS = {
    "git": re.compile(r"^([a-z][a-z0-9+.-]*://\S+|[\w.-]+@[\w.-]+:\S+|/\S+)$", re.I),
    "mercurial": re.compile(r"^([a-z][a-z0-9+.-]*://\S+|/\S+)$", re.I),
    "svn": re.compile(r"^((svn|svn\+ssh|https?|file)://\S+|/\S+)$", re.I),
}


@dataclass(frozen=True)
class DependencyPin:
    path: str
    vcs_kind: str
    url: str
    revision: str

    def __post_init__(self):
        if self.vcs_kind not in _URL_PATTERNS:
            raise UnsupportedVcs(self.vcs_kind)
        if not self.revision:
            raise ParseError("rev", f"empty revision for {self.path}")
        if not _URL_PATTERNS[self.vcs_kind].match(self.url):
            raise ParseError("url", f"{self.url!r} is not a valid {self.vcs_kind} locator")

    @property
    def name(self) -> str:
        return self.path.rstrip("/").rsplit("/", 1)[-1]


@dataclass(frozen=True)
class SrcMap:
    entries: dict[str, DependencyPin]
    main_path: str

    @property
    def main(self) -> DependencyPin:
        return self.entries[self.main_path]

    @property
    def dependencies(self) -> list[DependencyPin]:
        return [p for path, p in self.entries.items() if path != self.main_path]

    @property
    def pins(self) -> list[DependencyPin]:
        return list(self.entries.values())


@dataclass(frozen=True)
class CrashInfo:
    crash_type: str
    sanitizer: str
    fuzzer: str
    run_command: tuple[str, ...]
    report_text: str | None = None

    def __post_init__(self):
        n = sum(arg.count(POC_PLACEHOLDER) for arg in self.run_command)
        if n != 1:
            raise ParseError("crash.command", f"expected one {POC_PLACEHOLDER} placeholder, found {n}")

    def command_for(self, poc_path: str) -> list[str]:
        return [arg.replace(POC_PLACEHOLDER, poc_path) for arg in self.run_command]


@dataclass(frozen=True)
class RevisionRef:
    srcmap_locator: str
    main_revision: str


@dataclass(frozen=True)
class PocRef:
    digest: str
    size: int

    @property
    def hexdigest(self) -> str:
        return self.digest.split(":", 1)[1]


@dataclass(frozen=True)
class IssueRecord:
    local_id: int
    project: str
    labels: frozenset[str]
    crash: CrashInfo
    vulnerable_ref: RevisionRef
    verified_ref: RevisionRef
    report_time: datetime | None
    verify_time: datetime | None
    poc: PocRef

    @property
    def tags(self) -> tuple[str, str]:
        return f"{self.local_id}-vul", f"{self.local_id}-fix"


def _load(raw: str | bytes | Mapping[str, Any]) -> Mapping[str, Any]:
    if isinstance(raw, Mapping):
        return raw
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise ParseError("<document>", str(exc)) from None
    if not isinstance(doc, dict):
        raise ParseError("<document>", "expected an object")
    return doc


def _require(doc: Mapping[str, Any], key: str, kind, prefix: str = ""):
    name = prefix + key
    if key not in doc:
        raise ParseError(name, "missing")
    value = doc[key]
    if kind is int and isinstance(value, bool):
        raise ParseError(name, "expected int")
    if not isinstance(value, kind):
        raise ParseError(name, f"expected {getattr(kind, '__name__', kind)}")
    return value


def parse_timestamp(value: str | None, name: str = "timestamp") -> datetime | None:
    if value is None:
        return None
    if not isinstance(value, str):
        raise ParseError(name, "expected ISO-8601 string")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise ParseError(name, f"bad ISO-8601 timestamp {value!r}") from None
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime | None) -> str | None:
    if ts is None:
        return None
    ts = ts.astimezone(timezone.utc)
    fmt = "%Y-%m-%dT%H:%M:%S.%fZ" if ts.microsecond else "%Y-%m-%dT%H:%M:%SZ"
    return ts.strftime(fmt)


def _revision_ref(doc, key):
    ref = _require(doc, key, dict)
    return RevisionRef(
        srcmap_locator=_require(ref, "srcmap", str, key + "."),
        main_revision=_require(ref, "rev", str, key + "."),
    )


def parse_issue(raw: str | bytes | Mapping[str, Any]) -> IssueRecord:
    """Parse one issue document.

    Raises ParseError naming the first offending field, or MissingPoC when
    the record carries no PoC reference.
    """
    doc = _load(raw)
    local_id = _require(doc, "local_id", int)
    if local_id <= 0:
        raise ParseError("local_id", "must be positive")
    project = _require(doc, "project", str)
    labels = _require(doc, "labels", list)
    if not all(isinstance(label, str) for label in labels):
        raise ParseError("labels", "expected list of strings")

    crash_doc = _require(doc, "crash", dict)
    command = _require(crash_doc, "command", list, "crash.")
    if not all(isinstance(arg, str) for arg in command):
        raise ParseError("crash.command", "expected list of strings")
    report = crash_doc.get("report")
    if report is not None and not isinstance(report, str):
        raise ParseError("crash.report", "expected string")
    crash = CrashInfo(
        crash_type=_require(crash_doc, "type", str, "crash."),
        sanitizer=_require(crash_doc, "sanitizer", str, "crash."),
        fuzzer=_require(crash_doc, "fuzzer", str, "crash."),
        run_command=tuple(command),
        report_text=report,
    )

    report_time = parse_timestamp(doc.get("report_time"), "report_time")
    verify_time = parse_timestamp(doc.get("verify_time"), "verify_time")
    if report_time and verify_time and report_time > verify_time:
        raise ParseError("verify_time", "earlier than report_time")

    poc_doc = doc.get("poc")
    if not poc_doc:
        raise MissingPoC()
    if not isinstance(poc_doc, dict):
        raise ParseError("poc", "expected object")
    digest = _require(poc_doc, "digest", str, "poc.")
    if not re.fullmatch(r"sha256:[0-9a-f]{64}", digest):
        raise ParseError("poc.digest", "expected sha256:<64 hex digits>")
    size = _require(poc_doc, "bytes", int, "poc.")
    if size < 0:
        raise ParseError("poc.bytes", "must be non-negative")

    return IssueRecord(
        local_id=local_id,
        project=project,
        labels=frozenset(labels),
        crash=crash,
        vulnerable_ref=_revision_ref(doc, "vulnerable"),
        verified_ref=_revision_ref(doc, "verified"),
        report_time=report_time,
        verify_time=verify_time,
        poc=PocRef(digest, size),
    )


def serialize_issue(issue: IssueRecord) -> dict[str, Any]:
    crash: dict[str, Any] = {
        "type": issue.crash.crash_type,
        "sanitizer": issue.crash.sanitizer,
        "fuzzer": issue.crash.fuzzer,
        "command": list(issue.crash.run_command),
    }
    if issue.crash.report_text is not None:
        crash["report"] = issue.crash.report_text
    doc: dict[str, Any] = {
        "local_id": issue.local_id,
        "project": issue.project,
        "labels": sorted(issue.labels),
        "crash": crash,
        "vulnerable": {"srcmap": issue.vulnerable_ref.srcmap_locator, "rev": issue.vulnerable_ref.main_revision},
        "verified": {"srcmap": issue.verified_ref.srcmap_locator, "rev": issue.verified_ref.main_revision},
        "poc": {"digest": issue.poc.digest, "bytes": issue.poc.size},
    }
    if issue.report_time is not None:
        doc["report_time"] = format_timestamp(issue.report_time)
    if issue.verify_time is not None:
        doc["verify_time"] = format_timestamp(issue.verify_time)
    return doc


def canonical_issue(doc: Mapping[str, Any]) -> dict[str, Any]:
    """Normalized form of a raw issue document: sorted labels, UTC 'Z' times."""
    out = json.loads(json.dumps(doc))
    out["labels"] = sorted(set(out["labels"]))
    for key in ("report_time", "verify_time"):
        if out.get(key) is None:
            out.pop(key, None)
        else:
            out[key] = format_timestamp(parse_timestamp(out[key], key))
    if out["crash"].get("report") is None:
        out["crash"].pop("report", None)
    return out


def filter_candidates(issues: Iterable[IssueRecord]) -> list[IssueRecord]:
    """Keep labelled, verified issues whose vulnerable and fixed revisions differ."""
    return [
        issue
        for issue in issues
        if REQUIRED_LABELS <= issue.labels
        and issue.vulnerable_ref.main_revision != issue.verified_ref.main_revision
    ]


def fill_missing_times(issue: IssueRecord, commit_time) -> IssueRecord:
    """Default absent report/verify times to their revision's commit time.

    ``commit_time`` maps a main-project revision to a UTC datetime.
    """
    updates = {}
    if issue.report_time is None:
        updates["report_time"] = commit_time(issue.vulnerable_ref.main_revision)
    if issue.verify_time is None:
        updates["verify_time"] = commit_time(issue.verified_ref.main_revision)
    return replace(issue, **updates) if updates else issue


def parse_srcmap(raw: str | bytes | Mapping[str, Any], main_project: str) -> SrcMap:
    doc = _load(raw)
    entries: dict[str, DependencyPin] = {}
    for path, spec in doc.items():
        if not isinstance(spec, dict):
            raise ParseError(path, "expected {type, url, rev}")
        tag = _require(spec, "type", str, path + ".")
        if tag not in _VCS_KINDS:
            raise UnsupportedVcs(f"{path}: {tag}")
        entries[path] = DependencyPin(
            path=path,
            vcs_kind=_VCS_KINDS[tag],
            url=_require(spec, "url", str, path + "."),
            revision=_require(spec, "rev", str, path + "."),
        )
    main_path = _find_main(entries, main_project)
    return SrcMap(entries=entries, main_path=main_path)


def _find_main(entries: Mapping[str, DependencyPin], project: str) -> str:
    for exact in (True, False):
        for path, pin in entries.items():
            name = pin.name
            if name == project if exact else name.lower() == project.lower():
                return path
    raise MainProjectMissing(f"no srcmap entry for project {project!r}")


def serialize_srcmap(srcmap: SrcMap) -> dict[str, dict[str, str]]:
    return {
        path: {"type": _VCS_TAGS[pin.vcs_kind], "url": pin.url, "rev": pin.revision}
        for path, pin in srcmap.entries.items()
    }


def main_revision_consistent(ref: RevisionRef, srcmap: SrcMap) -> bool:
    return srcmap.main.revision == ref.main_revision


__all__ = [
    "POC_PLACEHOLDER",
    "REQUIRED_LABELS",
    "CrashInfo",
    "DependencyPin",
    "IssueRecord",
    "PocRef",
    "RevisionRef",
    "SrcMap",
    "canonical_issue",
    "fill_missing_times",
    "filter_candidates",
    "parse_issue",
    "parse_srcmap",
    "parse_timestamp",
    "format_timestamp",
    "serialize_issue",
    "serialize_srcmap",
]
