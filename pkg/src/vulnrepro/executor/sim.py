"""Table-driven backend: scripted build and run outcomes, no processes.

Manifest layout (JSON)::

    {
      "dead_urls": ["https://ftp.example.org/pcre"],
      "builds": [
        {"revision": "r1", "pins": {"/src/zlib": "z1"} | "*", "rules": ["id"] | "*",
         "patch": "sha256:..." | "*" | null,
         "outcome": {"status": "success", "artifact": "a1"}
                  | {"status": "compile_error", "log": "..."}
                  | {"status": "fetch_error", "url": "..."},
         "checked_out": {...}, "duration": 12.5}
      ],
      "runs": {"a1": {"status": "crash", "crash_type": "heap-buffer-overflow"}
                     | {"status": "clean"} | {"status": "timeout"}},
      "prebuilt": {"7-fix": "a9"},
      "histories": {"<url>": [{"commit": "c1", "time": 1600000000, "parents": []}]},
      "diffs": {"c1": "diff --git ..."},
      "tips": {"<url>": "c9"}
    }

Build entries are tried in order; the first whose keys all match wins. A
request that matches nothing compiles to ``CompileError("unscripted")``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

from vulnrepro.buildspec import normalize_url
from vulnrepro.errors import RunTimeout
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
    pins_by_path,
    step_header,
    to_utc,
)


def pin_fingerprint(req: BuildRequest) -> str:
    deps = sorted((p.path, p.revision) for p in req.pins if p.path != req.main_pin.path)
    return ";".join(f"{path}={rev}" for path, rev in deps)


def rule_fingerprint(req: BuildRequest) -> str:
    return ",".join(sorted(set(req.applied_rules)))


def patch_fingerprint(req: BuildRequest) -> str | None:
    if not req.patches:
        return None
    h = hashlib.sha256()
    for path, diff in req.patches:
        h.update(path.encode() + b"\0" + diff.encode() + b"\0")
    return "sha256:" + h.hexdigest()


class SimulatedBackend(ExecutionBackend):
    name = "sim"

    def __init__(self, manifest: Mapping[str, Any]):
        self.manifest = manifest
        self._dead = {normalize_url(u) for u in manifest.get("dead_urls", [])}
        self._histories = {
            normalize_url(url): sorted(
                (CommitInfo(c["commit"], to_utc(c["time"]), tuple(c.get("parents", ()))) for c in entries),
                key=lambda c: c.timestamp,
            )
            for url, entries in manifest.get("histories", {}).items()
        }
        self.supports_prebuilt = bool(manifest.get("prebuilt"))

    @classmethod
    def from_file(cls, path: str | Path) -> "SimulatedBackend":
        return cls(json.loads(Path(path).read_text()))

    def key(self, req: BuildRequest) -> tuple[str, str, str]:
        return req.main_pin.revision, pin_fingerprint(req), rule_fingerprint(req)

    def _matches(self, entry: Mapping[str, Any], req: BuildRequest) -> bool:
        if entry.get("revision", "*") not in ("*", req.main_pin.revision):
            return False
        pins = entry.get("pins", "*")
        if pins != "*":
            deps = {p.path: p.revision for p in req.pins if p.path != req.main_pin.path}
            if isinstance(pins, str):
                if pins != pin_fingerprint(req):
                    return False
            elif deps != dict(pins):
                return False
        rules = entry.get("rules", "*")
        if rules != "*" and sorted(set(rules)) != sorted(set(req.applied_rules)):
            return False
        patch = entry.get("patch", "*")
        if patch != "*" and patch != patch_fingerprint(req):
            return False
        return True

    def build(self, req: BuildRequest) -> BuildOutcome:
        instructions = req.spec.instructions()
        for n, idx in enumerate(instructions, 1):
            for url in req.spec.directives[idx].urls:
                if normalize_url(url) in self._dead:
                    log = "\n".join([
                        step_header(n, len(instructions), req.spec.directives[idx].text),
                        f"fatal: unable to access '{url.rstrip('/')}/': The requested URL returned error: 404",
                    ])
                    return BuildOutcome(FETCH_ERROR, url=url, log=log)
        for entry in self.manifest.get("builds", []):
            if not self._matches(entry, req):
                continue
            out = entry["outcome"]
            duration = float(entry.get("duration", 0.0))
            status = out["status"]
            if status == SUCCESS:
                checked = dict(entry.get("checked_out") or pins_by_path((req.main_pin, *req.pins)))
                return BuildOutcome(SUCCESS, artifact_id=out["artifact"], duration=duration,
                                    checked_out=checked, log=out.get("log", ""))
            if status == FETCH_ERROR:
                return BuildOutcome(FETCH_ERROR, url=out.get("url"), log=out.get("log", ""), duration=duration)
            return BuildOutcome(COMPILE_ERROR, log=out.get("log", "compile failed"), duration=duration)
        return BuildOutcome(COMPILE_ERROR, log="unscripted")

    def run_poc(self, artifact_id: str, poc: bytes) -> RunOutcome:
        try:
            spec = self.manifest["runs"][artifact_id]
        except KeyError:
            raise KeyError(f"unknown artifact {artifact_id!r}") from None
        status = spec["status"]
        if status == "timeout":
            raise RunTimeout(spec.get("seconds", 60))
        if status == CRASH:
            return RunOutcome(CRASH, int(spec.get("exit_code", 1)), crash_type=spec.get("crash_type", "unknown"))
        return RunOutcome(CLEAN, int(spec.get("exit_code", 0)))

    def fetch_prebuilt(self, issue, which: str) -> str | None:
        return self.manifest.get("prebuilt", {}).get(f"{issue.local_id}-{which}")

    def commit_history(self, url: str) -> list[CommitInfo]:
        try:
            return list(self._histories[normalize_url(url)])
        except KeyError:
            raise KeyError(f"no history scripted for {url}") from None

    def commit_diff(self, url: str, commit: str) -> str:
        return self.manifest.get("diffs", {}).get(commit, "")

    def tip(self, url: str) -> CommitInfo:
        history = self.commit_history(url)
        tip = self.manifest.get("tips", {}).get(url)
        if tip:
            return next(c for c in history if c.commit == tip)
        return history[-1]
