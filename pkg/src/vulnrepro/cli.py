"""Command-line entry point: ``vulnrepro <subcommand> [options]``.

Settings resolve as flags, then ``VULNREPRO_*`` environment variables,
then a JSON config file (``--config`` or ``VULNREPRO_CONFIG``).
Results land under ``<out>/<subcommand>/``; an existing per-issue result
means the issue is skipped unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from vulnrepro.auditor import AuditVerdict, POTENTIAL_ZERO_DAY, audit_issue, render_disclosure, summarize_audits
from vulnrepro.corpus import Corpus
from vulnrepro.dataset import (
    PatchRecord,
    compare_with_external,
    compute_patch_stats,
    dedup_patches,
    emit_bundle,
    filter_for_stats,
)
from vulnrepro.errors import BackendUnavailable, EmptyStats, ParseError, VulnReproError
from vulnrepro.executor import ContainerBackend, ExecutionBackend, LocalBackend, SimulatedBackend
from vulnrepro.fixlocator import FixResult, locate_fix
from vulnrepro.ingest import IssueRecord, filter_candidates
from vulnrepro.reproducer import FIXED_STILL_CRASHES, ReproductionReport, reproduce_issue
from vulnrepro.resources import RuleStore, load_rules

log = logging.getLogger("vulnrepro")

ENV_PREFIX = "VULNREPRO_"
EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
BACKENDS = ("sim", "local", "container")
COMMANDS = ("ingest", "reproduce", "locate-fix", "audit", "stats", "emit", "compare")

DEFAULTS: dict[str, Any] = {
    "corpus": ".",
    "out": "results",
    "workspace": None,
    "backend": "local",
    "jobs": 1,
    "timeout": 60.0,
    "rules": None,
    "manifest": None,
    "mirrors": {},
    "docker": "docker",
}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    corpus: Path
    out: Path
    workspace: Path
    backend: str
    jobs: int
    timeout: float
    rules: Path | None
    manifest: Path | None = None
    mirrors: dict[str, str] = field(default_factory=dict)
    docker: str = "docker"

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.timeout <= 0:
            raise ConfigError("--timeout must be positive")


def _env_value(key: str, raw: str):
    if key == "jobs":
        return int(raw)
    if key == "timeout":
        return float(raw)
    if key == "mirrors":
        return json.loads(raw)
    return raw


def resolve_config(args: argparse.Namespace, environ: Mapping[str, str] = os.environ) -> RunConfig:
    """Merge flags over environment over config file over defaults."""
    merged = dict(DEFAULTS)
    config_path = args.config or environ.get(ENV_PREFIX + "CONFIG")
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(data)
    for key in DEFAULTS:
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            try:
                merged[key] = _env_value(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{ENV_PREFIX}{key.upper()}: {exc}") from exc
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    corpus = Path(merged["corpus"])
    if not (corpus / "issues").is_dir():
        raise ConfigError(f"{corpus} is not a corpus (no issues/ directory)")
    out = Path(merged["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output root {out}: {exc}") from exc
    return RunConfig(
        corpus=corpus,
        out=out,
        workspace=Path(merged["workspace"]) if merged["workspace"] else out / "workspace",
        backend=merged["backend"],
        jobs=int(merged["jobs"]),
        timeout=float(merged["timeout"]),
        rules=Path(merged["rules"]) if merged["rules"] else None,
        manifest=Path(merged["manifest"]) if merged["manifest"] else None,
        mirrors=dict(merged["mirrors"] or {}),
        docker=merged["docker"],
    )


def make_backend(cfg: RunConfig) -> ExecutionBackend:
    if cfg.backend == "sim":
        if cfg.manifest is None:
            raise ConfigError("the sim backend needs --manifest")
        try:
            return SimulatedBackend.from_file(cfg.manifest)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load manifest {cfg.manifest}: {exc}") from exc
    local = LocalBackend(cfg.workspace, mirrors=cfg.mirrors, timeout=cfg.timeout)
    if cfg.backend == "local":
        return local
    return ContainerBackend(cfg.workspace, docker=cfg.docker, timeout=cfg.timeout, history_source=local)


def load_store(cfg: RunConfig) -> RuleStore:
    if cfg.rules is None:
        return RuleStore()
    try:
        return load_rules(cfg.rules)
    except (OSError, ParseError) as exc:
        raise ConfigError(f"cannot load rules {cfg.rules}: {exc}") from exc


class OutputLock:
    """Advisory lock so only one process writes an output root at a time."""

    def __init__(self, root: Path):
        self.path = root / ".lock"
        self.handle = None

    def __enter__(self):
        self.handle = open(self.path, "w")
        try:
            fcntl.flock(self.handle, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            self.handle.close()
            raise ConfigError(f"{self.path.parent} is locked by another run") from None
        return self

    def __exit__(self, *exc):
        fcntl.flock(self.handle, fcntl.LOCK_UN)
        self.handle.close()


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _read_json(path: Path) -> Any | None:
    if not path.exists():
        return None
    return json.loads(path.read_text())


@dataclass
class JobResult:
    local_id: int
    ok: bool
    status: str
    skipped: bool = False


class Runner:
    def __init__(self, cfg: RunConfig, args: argparse.Namespace, out=None):
        self.cfg = cfg
        self.args = args
        self.stdout = out or sys.stdout
        self.corpus = Corpus(cfg.corpus)
        self._backend: ExecutionBackend | None = None
        self._store: RuleStore | None = None

    @property
    def backend(self) -> ExecutionBackend:
        if self._backend is None:
            self._backend = make_backend(self.cfg)
        return self._backend

    @property
    def store(self) -> RuleStore:
        if self._store is None:
            self._store = load_store(self.cfg)
        return self._store

    def result_path(self, command: str, local_id: int) -> Path:
        return self.cfg.out / command / f"{local_id}.json"

    def selected(self) -> list[IssueRecord]:
        issues = self.corpus.issues()
        if self.args.id:
            wanted = set(self.args.id)
            picked = [i for i in issues if i.local_id in wanted]
            missing = wanted - {i.local_id for i in picked}
            if missing:
                raise ConfigError(f"unknown issue id(s): {', '.join(map(str, sorted(missing)))}")
            return picked
        if not self.args.all:
            raise ConfigError("select issues with --id or --all")
        return filter_candidates(issues)

    def emit(self, res: JobResult, extra: Mapping[str, Any] | None = None) -> None:
        if self.args.porcelain:
            row = {"id": res.local_id, "ok": res.ok, "status": res.status, "skipped": res.skipped, **(extra or {})}
            print(json.dumps(row, sort_keys=True), file=self.stdout)
        else:
            flag = "skip" if res.skipped else ("ok" if res.ok else "FAIL")
            print(f"{res.local_id:>10}  {flag:<4}  {res.status}", file=self.stdout)

    def run_jobs(self, command: str, issues: Sequence[IssueRecord],
                 job: Callable[[IssueRecord], tuple[bool, str, Any]]) -> list[JobResult]:
        """Run ``job`` per issue on the worker pool, persisting results."""
        _ = self.backend, self.store

        def one(issue: IssueRecord) -> JobResult:
            path = self.result_path(command, issue.local_id)
            prior = _read_json(path)
            if prior is not None and not self.args.force:
                return JobResult(issue.local_id, prior["ok"], prior["status"], skipped=True)
            try:
                ok, status, payload = job(issue)
            except BackendUnavailable:
                raise
            except (VulnReproError, KeyError, OSError, RuntimeError, NotImplementedError) as exc:
                ok, status, payload = False, f"error: {type(exc).__name__}: {exc}", None
            _write_json(path, {"ok": ok, "status": status, "result": payload})
            return JobResult(issue.local_id, ok, status)

        with ThreadPoolExecutor(max_workers=self.cfg.jobs) as pool:
            results = list(pool.map(one, issues))
        for r in results:
            self.emit(r)
        return results

    def summarize(self, command: str, results: Sequence[JobResult]) -> int:
        failed = [r.local_id for r in results if not r.ok]
        summary = {"command": command, "total": len(results), "failed": failed,
                   "skipped": sum(1 for r in results if r.skipped)}
        if self.args.porcelain:
            print(json.dumps({"summary": summary}, sort_keys=True), file=self.stdout)
        else:
            print(f"{command}: {len(results) - len(failed)}/{len(results)} succeeded"
                  + (f"; failed: {', '.join(map(str, failed))}" if failed else ""), file=self.stdout)
        return EXIT_PARTIAL if failed else EXIT_OK

    # -- subcommands ----------------------------------------------------------------

    def cmd_ingest(self) -> int:
        rows, bad = [], []
        for path in self.corpus.issue_paths():
            try:
                issue = self.corpus.load_issue(int(path.stem))
            except (ParseError, ValueError) as exc:
                bad.append(path.name)
                self.emit(JobResult(-1, False, f"{path.name}: {exc}"))
                continue
            accepted = bool(filter_candidates([issue]))
            status = "candidate" if accepted else "filtered"
            rows.append({"id": issue.local_id, "project": issue.project, "status": status})
            self.emit(JobResult(issue.local_id, True, status))
        _write_json(self.cfg.out / "ingest" / "summary.json", {"issues": rows, "malformed": bad})
        return EXIT_PARTIAL if bad else EXIT_OK

    def reproduce_job(self, issue: IssueRecord):
        report = reproduce_issue(issue, self.backend, self.store, self.corpus)
        failure = report.failure
        status = "Reproducible" if report.reproducible else (failure.kind if failure else "unknown")
        return report.reproducible, status, report.to_dict()

    def cmd_reproduce(self) -> int:
        return self.summarize("reproduce", self.run_jobs("reproduce", self.selected(), self.reproduce_job))

    def load_report(self, issue: IssueRecord, create: bool = True) -> ReproductionReport | None:
        stored = _read_json(self.result_path("reproduce", issue.local_id))
        if stored is None:
            if not create:
                return None
            ok, status, payload = self.reproduce_job(issue)
            _write_json(self.result_path("reproduce", issue.local_id), {"ok": ok, "status": status, "result": payload})
            return ReproductionReport.from_dict(payload)
        if stored.get("result") is None:
            return None
        return ReproductionReport.from_dict(stored["result"])

    def locate_job(self, issue: IssueRecord):
        report = self.load_report(issue)
        if report is None or not report.reproduced:
            return False, "not reproduced", None
        transcript = self.cfg.out / "locate-fix" / f"{issue.local_id}.transcript.json"
        transcript.parent.mkdir(parents=True, exist_ok=True)
        result = locate_fix(issue, self.backend, self.store, self.corpus, transcript_path=transcript)
        status = f"Located {result.fix_commit}" if result.located else f"Unresolved: {result.reason}"
        return result.located, status, result.to_dict()

    def cmd_locate_fix(self) -> int:
        return self.summarize("locate-fix", self.run_jobs("locate-fix", self.selected(), self.locate_job))

    def audit_job(self, issue: IssueRecord):
        verdict = audit_issue(issue, None, self.backend, self.store, self.corpus)
        if verdict.category == POTENTIAL_ZERO_DAY:
            path = self.cfg.out / "audit" / f"{issue.local_id}.disclosure.txt"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(render_disclosure(issue, verdict))
        status = verdict.category + (f" {verdict.located}" if verdict.located else "")
        return True, status, verdict.to_dict()

    def cmd_audit(self) -> int:
        issues = self.selected()
        if not self.args.id:
            keep = []
            for issue in issues:
                report = self.load_report(issue, create=False)
                failure = report.failure if report else None
                if failure is not None and failure.kind == FIXED_STILL_CRASHES:
                    keep.append(issue)
            issues = keep
        results = self.run_jobs("audit", issues, self.audit_job)
        verdicts = []
        for r in results:
            stored = _read_json(self.result_path("audit", r.local_id))
            if stored and stored.get("result"):
                verdicts.append(AuditVerdict.from_dict(stored["result"]))
        counts, table = summarize_audits(verdicts)
        _write_json(self.cfg.out / "audit" / "summary.json", counts)
        if not self.args.porcelain:
            print(table, file=self.stdout)
        return self.summarize("audit", results)

    def located_fixes(self) -> dict[int, FixResult]:
        out = {}
        for issue in self.corpus.issues():
            stored = _read_json(self.result_path("locate-fix", issue.local_id))
            if stored and stored.get("result"):
                result = FixResult.from_dict(stored["result"])
                if result.located:
                    out[issue.local_id] = result
        return out

    def patch_record(self, issue: IssueRecord, fix: FixResult) -> PatchRecord:
        path = self.cfg.out / "stats" / "records" / f"{issue.local_id}.json"
        cached = _read_json(path)
        if cached is not None and not self.args.force:
            cached["touched_files"] = tuple(cached["touched_files"])
            cached["dup_group"] = None
            return PatchRecord(**cached)
        _, fix_map = self.corpus.srcmaps(issue)
        url = fix_map.main.url
        diff = self.backend.commit_diff(url, fix.fix_commit)
        parents = next((c.parents for c in self.backend.commit_history(url) if c.commit == fix.fix_commit), ())
        record = PatchRecord.from_diff(issue.local_id, fix.fix_commit, max(1, len(parents)), diff)
        data = {k: getattr(record, k) for k in ("local_id", "fix_commit", "parent_count", "files_changed",
                                                "lines_added", "lines_removed")}
        data["touched_files"] = list(record.touched_files)
        _write_json(path, data)
        return record

    def cmd_stats(self) -> int:
        fixes = self.located_fixes()
        records, failed = [], []
        for issue in self.corpus.issues():
            if issue.local_id in fixes:
                try:
                    records.append(self.patch_record(issue, fixes[issue.local_id]))
                except (VulnReproError, KeyError, RuntimeError, NotImplementedError) as exc:
                    log.warning("issue %s: %s", issue.local_id, exc)
                    failed.append(issue.local_id)
        grouped = dedup_patches(records)
        filtered = filter_for_stats(grouped)
        try:
            stats = compute_patch_stats(filtered)
        except EmptyStats as exc:
            print(f"stats: {exc}", file=sys.stderr)
            return EXIT_PARTIAL
        payload = {
            "records": len(grouped),
            "groups": len({r.dup_group for r in grouped}),
            "duplicates": sum(1 for r in grouped if r.is_duplicate),
            "merges_dropped": sum(1 for r in grouped if r.dup_group == r.local_id and r.is_merge),
            "filtered": len(filtered),
            "stats": stats.to_dict(),
            "dup_groups": {str(r.local_id): r.dup_group for r in grouped},
        }
        _write_json(self.cfg.out / "stats" / "stats.json", payload)
        (self.cfg.out / "stats" / "stats.txt").write_text(stats.to_table() + "\n")
        if self.args.porcelain:
            print(json.dumps(payload, sort_keys=True), file=self.stdout)
        else:
            print(stats.to_table(), file=self.stdout)
        return EXIT_PARTIAL if failed else EXIT_OK

    def emit_job(self, issue: IssueRecord):
        report = self.load_report(issue, create=False)
        if report is None or not report.reproducible:
            return False, "not reproducible", None
        stored = _read_json(self.result_path("locate-fix", issue.local_id))
        fix = FixResult.from_dict(stored["result"]) if stored and stored.get("result") else None
        diff = None
        if fix is not None and fix.located:
            _, fix_map = self.corpus.srcmaps(issue)
            diff = self.backend.commit_diff(fix_map.main.url, fix.fix_commit)
        groups = (_read_json(self.cfg.out / "stats" / "stats.json") or {}).get("dup_groups", {})
        entry = emit_bundle(issue, report, fix, self.corpus, self.store, self.cfg.out / "bundles", diff,
                            dup_group=groups.get(str(issue.local_id)))
        status = "bundle" + (" (fix unresolved)" if entry.fix_unresolved else "")
        return True, status, {"bundle": entry.bundle, "tags": list(entry.tags), "fix_commit": entry.fix_commit}

    def cmd_emit(self) -> int:
        return self.summarize("emit", self.run_jobs("emit", self.selected(), self.emit_job))

    def cmd_compare(self) -> int:
        if not self.args.external:
            raise ConfigError("compare needs --external <json map of local_id to commit>")
        try:
            theirs = {int(k): v for k, v in json.loads(Path(self.args.external).read_text()).items()}
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read {self.args.external}: {exc}") from exc
        fixes = self.located_fixes()
        ours = {i: f.fix_commit for i, f in fixes.items()}
        history = []
        urls = set()
        for issue in self.corpus.issues():
            if issue.local_id in ours:
                urls.add(self.corpus.srcmaps(issue)[1].main.url)
        for url in sorted(urls):
            try:
                history.extend(self.backend.commit_history(url))
            except (KeyError, NotImplementedError, RuntimeError) as exc:
                log.warning("no history for %s: %s", url, exc)
        verdicts = compare_with_external(ours, theirs, history)
        rows = [v.__dict__ for v in verdicts]
        _write_json(self.cfg.out / "compare" / "verdicts.json", rows)
        for v in verdicts:
            extra = {"bucket": v.bucket, "ours": v.ours, "theirs": v.theirs, "preferred": v.preferred}
            self.emit(JobResult(v.local_id, True, v.bucket + (f" -> {v.preferred}" if v.preferred else "")), extra)
        return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--corpus", help="corpus root (issues/, srcmaps/, pocs/, projects/)")
    common.add_argument("--workspace", help="scratch directory for builds")
    common.add_argument("--backend", choices=BACKENDS)
    common.add_argument("--jobs", type=int, help="worker count")
    common.add_argument("--timeout", type=float, help="PoC run timeout in seconds")
    common.add_argument("--rules", help="resource rule file")
    common.add_argument("--out", help="output root")
    common.add_argument("--manifest", help="scripted outcomes for the sim backend")
    common.add_argument("--mirrors", type=json.loads, help='JSON map of URL prefix to local mirror')
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--id", type=int, action="append", help="issue id (repeatable)")
    common.add_argument("--all", action="store_true", help="every candidate issue in the corpus")
    common.add_argument("--force", action="store_true", help="redo issues that already have results")
    common.add_argument("--porcelain", action="store_true", help="JSON lines on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vulnrepro", description="Rebuild, verify and bisect fuzzer-found vulnerabilities.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    helps = {
        "ingest": "parse and filter the corpus",
        "reproduce": "rebuild vulnerable and fixed revisions",
        "locate-fix": "bisect for the fixing commit",
        "audit": "re-check fixes whose PoC still crashes",
        "stats": "patch statistics over located fixes",
        "emit": "write reproduction bundles",
        "compare": "compare located fixes with another source",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "compare":
            p.add_argument("--external", help="JSON map of local_id to fix commit")
    return parser


def main(argv: Sequence[str] | None = None, environ: Mapping[str, str] = os.environ) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, environ)
        with OutputLock(cfg.out):
            runner = Runner(cfg, args)
            return getattr(runner, "cmd_" + args.command.replace("-", "_"))()
    except (ConfigError, BackendUnavailable, ParseError) as exc:
        print(f"vulnrepro: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
