"""Bundles, patch records, deduplication, statistics and external comparison."""

from __future__ import annotations

import json
import re
import shutil
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from vulnrepro.buildspec import parse_buildspec, pin_revisions, render_pin_log
from vulnrepro.corpus import Corpus
from vulnrepro.errors import BundleIncomplete, EmptyStats, VulnReproError
from vulnrepro.executor.base import CLEAN, CRASH, BuildRequest, CommitInfo, ExecutionBackend
from vulnrepro.fixlocator import BUILD_FAILED, FixResult
from vulnrepro.ingest import IssueRecord, SrcMap, parse_srcmap, serialize_srcmap
from vulnrepro.reproducer import ReproductionReport
from vulnrepro.resources import RuleStore, apply_rules, dump_rules

SMALL_PATCH_LINES = 60

_HUNK_RE = re.compile(r"^@@ -\d+(?:,(\d+))? \+\d+(?:,(\d+))? @@")
_GIT_HEADER_RE = re.compile(r"^diff --git a/(.*) b/(.*)$")


# -- diff statistics ----------------------------------------------------------


@dataclass
class FileStat:
    path: str
    added: int = 0
    removed: int = 0
    binary: bool = False


def _strip_prefix(path: str) -> str:
    path = path.split("\t", 1)[0].strip()
    if path.startswith(("a/", "b/")):
        return path[2:]
    return path


def parse_diff(diff: str) -> list[FileStat]:
    """Per-file line counts from a unified diff.

    Hunk headers bound each hunk, so content lines that look like file
    headers are still counted. Binary files count with zero lines.
    """
    files: list[FileStat] = []
    current: FileStat | None = None
    fresh_header = False
    old_left = new_left = 0
    lines = diff.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        i += 1
        if (old_left > 0 or new_left > 0) and not line.startswith("diff --git "):
            if line.startswith("+"):
                current.added += 1
                new_left -= 1
            elif line.startswith("-"):
                current.removed += 1
                old_left -= 1
            elif not line.startswith("\\"):
                old_left -= 1
                new_left -= 1
            continue
        m = _GIT_HEADER_RE.match(line)
        h = _HUNK_RE.match(line)
        old_left = new_left = 0
        if m:
            current = FileStat(m.group(2))
            files.append(current)
            fresh_header = True
        elif line.startswith("--- ") and i < len(lines) and lines[i].startswith("+++ "):
            old, new = _strip_prefix(line[4:]), _strip_prefix(lines[i][4:])
            i += 1
            if not fresh_header:
                current = FileStat(old if new == "/dev/null" else new)
                files.append(current)
            fresh_header = False
        elif line.startswith(("Binary files ", "GIT binary patch")) and current is not None:
            current.binary = True
            fresh_header = False
        elif h and current is not None:
            old_left = int(h.group(1)) if h.group(1) is not None else 1
            new_left = int(h.group(2)) if h.group(2) is not None else 1
            fresh_header = False
    return files


def touched_files(diff: str) -> list[str]:
    return [f.path for f in parse_diff(diff)]


# -- records --------------------------------------------------------------------


@dataclass(frozen=True)
class PatchRecord:
    local_id: int
    fix_commit: str
    parent_count: int
    files_changed: int
    lines_added: int
    lines_removed: int
    touched_files: tuple[str, ...] = ()
    dup_group: int | None = None

    def __post_init__(self):
        if self.parent_count < 1:
            raise ValueError("parent_count must be at least 1")
        if self.lines_added < 0 or self.lines_removed < 0:
            raise ValueError("line counts must be non-negative")

    @property
    def is_merge(self) -> bool:
        return self.parent_count > 1

    @property
    def is_duplicate(self) -> bool:
        return self.dup_group is not None and self.dup_group != self.local_id

    @property
    def changed_lines(self) -> int:
        return self.lines_added + self.lines_removed

    @classmethod
    def from_diff(cls, local_id: int, fix_commit: str, parent_count: int, diff: str) -> "PatchRecord":
        stats = parse_diff(diff)
        return cls(
            local_id, fix_commit, parent_count,
            files_changed=len(stats),
            lines_added=sum(f.added for f in stats),
            lines_removed=sum(f.removed for f in stats),
            touched_files=tuple(f.path for f in stats),
        )


def dedup_patches(records: Iterable[PatchRecord]) -> list[PatchRecord]:
    """Mark records sharing a fix commit with the lowest local_id among them."""
    records = list(records)
    groups: dict[str, int] = {}
    for r in records:
        groups[r.fix_commit] = min(groups.get(r.fix_commit, r.local_id), r.local_id)
    return [replace(r, dup_group=groups[r.fix_commit]) for r in records]


def filter_for_stats(records: Iterable[PatchRecord]) -> list[PatchRecord]:
    """One representative per duplicate group, merges dropped."""
    records = list(records)
    if any(r.dup_group is None for r in records):
        records = dedup_patches(records)
    return [r for r in records if r.dup_group == r.local_id and not r.is_merge]


@dataclass(frozen=True)
class PatchStats:
    count: int
    files_mean: float
    files_median: float
    files_std: float
    added_mean: float
    added_median: float
    removed_mean: float
    removed_median: float
    single_file_fraction: float
    small_patch_fraction: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_table(self) -> str:
        rows = [
            ("patches", str(self.count)),
            ("files changed (mean)", f"{self.files_mean:.2f}"),
            ("files changed (median)", f"{self.files_median:g}"),
            ("files changed (std)", f"{self.files_std:.2f}"),
            ("lines added (mean)", f"{self.added_mean:.2f}"),
            ("lines added (median)", f"{self.added_median:g}"),
            ("lines removed (mean)", f"{self.removed_mean:.2f}"),
            ("lines removed (median)", f"{self.removed_median:g}"),
            ("single-file patches", f"{self.single_file_fraction:.1%}"),
            (f"patches under {SMALL_PATCH_LINES} lines", f"{self.small_patch_fraction:.1%}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def compute_patch_stats(records: Sequence[PatchRecord]) -> PatchStats:
    """Summary over filtered records; the std is the population deviation."""
    if not records:
        raise EmptyStats("no patch records")
    files = [r.files_changed for r in records]
    added = [r.lines_added for r in records]
    removed = [r.lines_removed for r in records]
    n = len(records)
    return PatchStats(
        count=n,
        files_mean=statistics.fmean(files),
        files_median=statistics.median(files),
        files_std=statistics.pstdev(files),
        added_mean=statistics.fmean(added),
        added_median=statistics.median(added),
        removed_mean=statistics.fmean(removed),
        removed_median=statistics.median(removed),
        single_file_fraction=sum(1 for f in files if f == 1) / n,
        small_patch_fraction=sum(1 for r in records if r.changed_lines < SMALL_PATCH_LINES) / n,
    )


# -- external comparison ----------------------------------------------------------

AGREE = "Agree"
DISAGREE = "Disagree"
THEIRS_MISSING = "TheirsMissing"
MERGE_PARENT = "MergeParentRelation"


@dataclass(frozen=True)
class ComparisonVerdict:
    local_id: int
    ours: str
    theirs: str | None
    bucket: str
    preferred: str | None = None


def _parent_map(histories) -> dict[str, tuple[str, ...]]:
    if isinstance(histories, Mapping):
        out = {}
        for key, value in histories.items():
            if isinstance(value, (list, tuple)) and value and isinstance(value[0], CommitInfo):
                out.update({c.commit: c.parents for c in value})
            else:
                out[key] = tuple(value)
        return out
    return {c.commit: c.parents for c in histories}


def compare_with_external(
    ours: Mapping[int, str],
    theirs: Mapping[int, str],
    histories: Mapping[str, Any] | Iterable[CommitInfo] = (),
) -> list[ComparisonVerdict]:
    """Bucket each located fix against another source's answer.

    ``histories`` is either commit -> parents, url -> [CommitInfo], or a
    flat iterable of CommitInfo.
    """
    parents = _parent_map(histories)
    verdicts = []
    for local_id in sorted(ours):
        mine, other = ours[local_id], theirs.get(local_id)
        if other is None:
            verdicts.append(ComparisonVerdict(local_id, mine, None, THEIRS_MISSING))
        elif mine == other:
            verdicts.append(ComparisonVerdict(local_id, mine, other, AGREE))
        elif len(parents.get(other, ())) > 1 and mine in parents[other]:
            verdicts.append(ComparisonVerdict(local_id, mine, other, MERGE_PARENT, mine))
        elif len(parents.get(mine, ())) > 1 and other in parents[mine]:
            verdicts.append(ComparisonVerdict(local_id, mine, other, MERGE_PARENT, other))
        else:
            verdicts.append(ComparisonVerdict(local_id, mine, other, DISAGREE))
    return verdicts


# -- bundles ------------------------------------------------------------------------

MANIFEST = "manifest.json"


@dataclass
class DatasetEntry:
    local_id: int
    project: str
    vuln_srcmap: str
    fix_commit: str | None
    poc_digest: str
    tags: tuple[str, str]
    bundle: str
    fix_unresolved: bool = False
    dup_group: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)


def _pinned_spec(corpus: Corpus, issue: IssueRecord, srcmap: SrcMap, store: RuleStore, applied: Sequence[str]):
    original = corpus.buildspec(issue.project)
    pinned, _ = pin_revisions(original, srcmap.pins)
    subset = RuleStore(tuple(r for r in store.rules if r.rule_id in set(applied)))
    spec, _ = apply_rules(pinned, subset)
    return original, pinned, spec


def emit_bundle(
    issue: IssueRecord,
    report: ReproductionReport,
    fix: FixResult | None,
    corpus: Corpus,
    store: RuleStore,
    out_root: str | Path,
    fix_diff: str | None = None,
    dup_group: int | None = None,
) -> DatasetEntry:
    """Write ``<out_root>/<local_id>/`` with everything needed to rebuild offline."""
    if not report.reproducible:
        raise BundleIncomplete(f"issue {issue.local_id} is not reproducible")
    if not report.vuln_artifact or not report.fix_artifact:
        raise BundleIncomplete(f"issue {issue.local_id} lacks a build artifact")
    if fix is not None and fix.located and fix_diff is None:
        raise BundleIncomplete(f"issue {issue.local_id}: located fix without a diff")
    try:
        poc = corpus.poc(issue)
        vuln_map, fix_map = corpus.srcmaps(issue)
    except (FileNotFoundError, VulnReproError) as exc:
        raise BundleIncomplete(f"issue {issue.local_id}: {exc}") from exc

    root = Path(out_root) / str(issue.local_id)
    tmp = root.with_name(root.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    vul_tag, fix_tag = issue.tags

    for which, srcmap in (("vul", vuln_map), ("fix", fix_map)):
        original, pinned, spec = _pinned_spec(corpus, issue, srcmap, store, report.applied_rules)
        (tmp / f"Dockerfile.{which}").write_text(spec.serialize())
        (tmp / f"pins.{which}.diff").write_text(render_pin_log(original, pinned))
        (tmp / f"srcmap.{which}.json").write_text(json.dumps(serialize_srcmap(srcmap), indent=2) + "\n")
    (tmp / "rules.txt").write_text(dump_rules(store))
    (tmp / "poc").write_bytes(poc)
    context = corpus.project_dir(issue.project)
    if context.is_dir():
        shutil.copytree(context, tmp / "context")
    located = fix is not None and fix.located
    if located:
        (tmp / "fix.diff").write_text(fix_diff)

    manifest = {
        "local_id": issue.local_id,
        "project": issue.project,
        "fix_commit": fix.fix_commit if located else None,
        "fix_unresolved": not located,
        "dup_group": dup_group if dup_group is not None else issue.local_id,
        "tags": [vul_tag, fix_tag],
        "poc": {"digest": issue.poc.digest, "bytes": issue.poc.size, "path": "poc"},
        "buildspec": {"vul": "Dockerfile.vul", "fix": "Dockerfile.fix"},
        "srcmap": {"vul": "srcmap.vul.json", "fix": "srcmap.fix.json"},
        "rules": "rules.txt",
        "applied_rules": list(report.applied_rules),
        "diff": "fix.diff" if located else None,
        "run_command": list(issue.crash.run_command),
        "sanitizer": issue.crash.sanitizer,
        "crash_type": issue.crash.crash_type,
    }
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    if root.exists():
        shutil.rmtree(root)
    tmp.rename(root)
    return DatasetEntry(issue.local_id, issue.project, issue.vulnerable_ref.srcmap_locator,
                        manifest["fix_commit"], issue.poc.digest, (vul_tag, fix_tag), str(root),
                        not located, manifest["dup_group"])


def replay_bundle(bundle: str | Path, backend: ExecutionBackend, run_id: str = "replay") -> dict[str, str]:
    """Rebuild both tags from a bundle and run its PoC; returns tag -> outcome."""
    bundle = Path(bundle)
    manifest = json.loads((bundle / MANIFEST).read_text())
    poc = (bundle / manifest["poc"]["path"]).read_bytes()
    context = bundle / "context"
    results = {}
    for which, tag in zip(("vul", "fix"), manifest["tags"]):
        spec = parse_buildspec((bundle / manifest["buildspec"][which]).read_bytes().decode(),
                               origin=manifest["buildspec"][which])
        srcmap = parse_srcmap((bundle / manifest["srcmap"][which]).read_text(), manifest["project"])
        req = BuildRequest(
            spec=spec, main_pin=srcmap.main, workspace_id=f"{tag}-{run_id}", pins=tuple(srcmap.pins),
            applied_rules=tuple(manifest["applied_rules"]), run_command=tuple(manifest["run_command"]),
            context_dir=context if context.is_dir() else None, sanitizer=manifest["sanitizer"],
        )
        outcome = backend.build(req)
        if not outcome.ok:
            results[tag] = BUILD_FAILED
            continue
        run = backend.run_poc(outcome.artifact_id, poc)
        results[tag] = CRASH if run.crashed else CLEAN
    return results
