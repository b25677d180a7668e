"""Offline issue corpus on disk.

Layout::

    <root>/issues/<local_id>.json      issue documents
    <root>/srcmaps/<name>.json         srcmap documents (issue refs name them)
    <root>/pocs/<sha256 hex>           PoC blobs, content addressed
    <root>/projects/<project>/         build context: Dockerfile, build.sh, ...
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path

from vulnrepro.buildspec import BuildSpec, parse_buildspec
from vulnrepro.errors import MissingSrcMap, ParseError, PocDigestMismatch
from vulnrepro.ingest import IssueRecord, SrcMap, parse_issue, parse_srcmap

log = logging.getLogger(__name__)


class Corpus:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def issue_paths(self) -> list[Path]:
        return sorted((self.root / "issues").glob("*.json"), key=lambda p: (len(p.stem), p.stem))

    def load_issue(self, local_id: int) -> IssueRecord:
        path = self.root / "issues" / f"{local_id}.json"
        if not path.exists():
            raise KeyError(f"issue {local_id} not in corpus")
        return parse_issue(path.read_text())

    def issues(self, strict: bool = False) -> list[IssueRecord]:
        """All parsable issues; malformed ones are logged and skipped unless strict."""
        out = []
        for path in self.issue_paths():
            try:
                out.append(parse_issue(path.read_text()))
            except ParseError as exc:
                if strict:
                    raise
                log.warning("skipping %s: %s", path.name, exc)
        ids = [i.local_id for i in out]
        if len(ids) != len(set(ids)):
            raise ParseError("local_id", "duplicate local_id in corpus")
        return out

    def srcmap_path(self, locator: str) -> Path:
        path = self.root / "srcmaps" / locator
        if path.suffix != ".json":
            path = path.with_name(path.name + ".json")
        return path

    def srcmap(self, locator: str, project: str) -> SrcMap:
        path = self.srcmap_path(locator)
        if not path.exists():
            raise MissingSrcMap(f"srcmap {locator!r} not found")
        return parse_srcmap(path.read_text(), project)

    def srcmaps(self, issue: IssueRecord) -> tuple[SrcMap, SrcMap]:
        return (
            self.srcmap(issue.vulnerable_ref.srcmap_locator, issue.project),
            self.srcmap(issue.verified_ref.srcmap_locator, issue.project),
        )

    def poc(self, issue: IssueRecord) -> bytes:
        path = self.root / "pocs" / issue.poc.hexdigest
        if not path.exists():
            raise FileNotFoundError(f"PoC blob {issue.poc.digest} missing")
        data = path.read_bytes()
        if hashlib.sha256(data).hexdigest() != issue.poc.hexdigest or len(data) != issue.poc.size:
            raise PocDigestMismatch(f"PoC blob for issue {issue.local_id} does not match {issue.poc.digest}")
        return data

    def project_dir(self, project: str) -> Path:
        return self.root / "projects" / project

    def buildspec(self, project: str) -> BuildSpec:
        path = self.project_dir(project) / "Dockerfile"
        return parse_buildspec(path.read_bytes().decode(), origin=f"projects/{project}/Dockerfile")

    def add_poc(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        target = self.root / "pocs" / digest
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        return "sha256:" + digest
