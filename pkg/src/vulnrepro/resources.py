"""Broken-resource detection and the persistent fix-up rule store."""

from __future__ import annotations

import fnmatch
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from vulnrepro.buildspec import BuildSpec, Directive, normalize_url, split_chain, urls_in
from vulnrepro.errors import ParseError, RuleApplicationError

log = logging.getLogger(__name__)

RULES_FORMAT_VERSION = 1

CORE = "core"
NON_CORE = "non_core"


@dataclass(frozen=True)
class ResourceRule:
    rule_id: str
    match: str
    classification: str
    action: str  # "replace" | "remove"
    new_url: str | None = None
    note: str = ""

    def __post_init__(self):
        if self.classification not in (CORE, NON_CORE):
            raise ValueError(f"{self.rule_id}: unknown classification {self.classification!r}")
        if self.action not in ("replace", "remove"):
            raise ValueError(f"{self.rule_id}: unknown action {self.action!r}")
        if self.action == "replace" and not self.new_url:
            raise ValueError(f"{self.rule_id}: replace needs a url")
        if self.classification == CORE and self.action != "replace":
            raise ValueError(f"{self.rule_id}: core resources can only be replaced")

    def matches(self, url: str) -> bool:
        return fnmatch.fnmatchcase(url, self.match)

    def to_line(self) -> str:
        action = f"replace {self.new_url}" if self.action == "replace" else "remove"
        parts = [self.rule_id, self.classification, self.match, action]
        if self.note:
            parts.append(f"# {self.note}")
        return " | ".join(parts)


@dataclass(frozen=True)
class RuleStore:
    rules: tuple[ResourceRule, ...] = ()
    path: Path | None = None

    def __post_init__(self):
        seen = set()
        for r in self.rules:
            if r.rule_id in seen:
                raise ValueError(f"duplicate rule id {r.rule_id!r}")
            seen.add(r.rule_id)

    def first_match(self, url: str, exclude: Iterable[str] = ()) -> ResourceRule | None:
        skip = set(exclude)
        for rule in self.rules:
            if rule.rule_id not in skip and rule.matches(url):
                return rule
        return None

    def with_rule(self, rule: ResourceRule) -> "RuleStore":
        return RuleStore(self.rules + (rule,), self.path)

    def __len__(self):
        return len(self.rules)


def parse_rules(text: str, path: Path | None = None) -> RuleStore:
    rules = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        note = ""
        if parts and parts[-1].startswith("#"):
            note = parts.pop().lstrip("#").strip()
        if len(parts) != 4:
            raise ParseError(message=f"expected 'id | class | glob | action', got {raw!r}", line=lineno)
        rule_id, classification, glob, action = parts
        if action == "remove":
            kind, new_url = "remove", None
        elif action.startswith("replace "):
            kind, new_url = "replace", action.split(None, 1)[1].strip()
        else:
            raise ParseError(message=f"unknown action {action!r}", line=lineno)
        try:
            rules.append(ResourceRule(rule_id, glob, classification, kind, new_url, note))
        except ValueError as exc:
            raise ParseError(message=str(exc), line=lineno) from None
    try:
        return RuleStore(tuple(rules), path)
    except ValueError as exc:
        raise ParseError(message=str(exc), line=0) from None


def dump_rules(store: RuleStore) -> str:
    lines = [f"# resource rules, format version {RULES_FORMAT_VERSION}"]
    lines += [r.to_line() for r in store.rules]
    return "\n".join(lines) + "\n"


def load_rules(path: str | Path) -> RuleStore:
    path = Path(path)
    if not path.exists():
        return RuleStore((), path)
    return parse_rules(path.read_text(), path)


def save_rules(store: RuleStore, path: str | Path | None = None) -> Path:
    target = Path(path or store.path)
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_text(dump_rules(store))
    tmp.replace(target)
    return target


# -- detection --------------------------------------------------------------


@dataclass(frozen=True)
class BrokenResource:
    url: str
    directive_index: int
    evidence: str

    def __post_init__(self):
        if not self.evidence:
            raise ValueError("evidence must be non-empty")


@dataclass(frozen=True)
class ErrorPattern:
    name: str
    regex: re.Pattern


def _p(name, pattern):
    return ErrorPattern(name, re.compile(pattern))


DEFAULT_PATTERNS: tuple[ErrorPattern, ...] = (
    _p("git-access", r"fatal: unable to access '(?P<url>[^']+)'"),
    _p("git-missing-repo", r"fatal: repository '(?P<url>[^']+)' (?:not found|does not exist)"),
    _p("git-not-a-repo", r"fatal: '(?P<url>[^']+)' does not appear to be a git repository"),
    _p("git-remote-hung-up", r"fatal: (?:the remote end hung up|Could not read from remote repository)"),
    _p("dns", r"Could not resolve host:? (?P<host>[\w.-]+)"),
    _p("dns-wget", r"unable to resolve host address ['‘]?(?P<host>[\w.-]+)"),
    _p("http-404-410", r"(?:ERROR|error:?) (?:404|410)\b|returned error: (?:404|410)\b|HTTP Error (?:404|410)"),
    _p("curl-failure", r"curl: \((?:6|7|22|28|35|56)\)"),
    _p("svn-connect", r"svn: E\d+: Unable to connect to a repository at URL '(?P<url>[^']+)'"),
    _p("svn-generic", r"svn: E(?:170013|175002|170000|670002)"),
    _p("hg-abort", r"abort: (?:HTTP Error \d+|error: .*|repository (?P<url>\S+) not found)"),
    _p("archive", r"gzip: stdin: not in gzip format|tar: Error is not recoverable|unzip:\s+cannot find zipfile"),
)

_STEP_HEADERS = (
    re.compile(r"^Step (?P<n>\d+)/\d+ : (?P<text>.*)$"),
    re.compile(r"^#\d+ \[(?:[\w.-]+ )?\s*(?P<n>\d+)/\d+\] (?P<text>.*)$"),
)


def _find_in_spec(spec: BuildSpec, url: str):
    key = normalize_url(url)
    for idx, d in enumerate(spec.directives):
        for u in d.urls:
            if normalize_url(u) == key:
                return idx, u
    return None


def _attribute(spec: BuildSpec, step_index: int | None, line: str, match: re.Match):
    """Map one error line to (directive_index, url) candidates."""
    groups = match.groupdict()
    if groups.get("url"):
        hit = _find_in_spec(spec, groups["url"])
        if hit:
            return [hit]
    if groups.get("host"):
        host = groups["host"].lower()
        hits = [
            (idx, u)
            for idx, d in enumerate(spec.directives)
            for u in d.urls
            if normalize_url(u).split("/", 1)[0] == host
        ]
        if hits:
            return hits
    if step_index is None:
        return []
    urls = spec.directives[step_index].urls
    if len(urls) == 1:
        return [(step_index, urls[0])]
    # several urls in the failing step: keep those whose last path part the error names
    named = [u for u in urls if normalize_url(u).rsplit("/", 1)[-1] in line]
    return [(step_index, u) for u in named]


def detect_broken_resources(
    build_log: str, spec: BuildSpec, patterns: Sequence[ErrorPattern] = DEFAULT_PATTERNS
) -> list[BrokenResource]:
    instructions = spec.instructions()
    found: dict[str, BrokenResource] = {}
    step_index = None
    for line in build_log.splitlines():
        for header in _STEP_HEADERS:
            m = header.match(line)
            if m:
                n = int(m.group("n"))
                step_index = instructions[n - 1] if 0 < n <= len(instructions) else None
                break
        else:
            for pat in patterns:
                m = pat.regex.search(line)
                if not m:
                    continue
                for idx, url in _attribute(spec, step_index, line, m):
                    key = normalize_url(url)
                    if key not in found:
                        found[key] = BrokenResource(url, idx, line.strip())
                break
    return list(found.values())


# -- application ------------------------------------------------------------


def _replace_url(text: str, old: str, new: str) -> str:
    return re.sub(re.escape(old) + r"""(?![^\s'"<>|;&()`])""", lambda _: new, text)


def _remove_command(d: Directive, idx: int, url: str, rule_id: str) -> Directive | None:
    """Drop the smallest command referencing ``url``; None drops the directive."""
    if d.kind != "run":
        return None
    body = d.body
    if any(ln.lstrip().startswith("#") for ln in body.split("\n")[1:]):
        raise RuleApplicationError(rule_id, idx, "comment lines inside continuation")
    try:
        spans, seps = split_chain(body)
    except ValueError as exc:
        raise RuleApplicationError(rule_id, idx, str(exc)) from None
    # a pipeline is removed as a unit
    groups, group_seps = [[spans[0]]], []
    for span, sep in zip(spans[1:], seps):
        if sep == "|":
            groups[-1].append(span)
        else:
            groups.append([span])
            group_seps.append(sep)
    spans = [(g[0][0], g[-1][1]) for g in groups]
    seps = group_seps
    hits = [i for i, (s, e) in enumerate(spans) if url in body[s:e]]
    if not hits:
        raise RuleApplicationError(rule_id, idx, "url not inside a simple command")
    if len(spans) == 1:
        return None
    k = hits[0]
    adjacent = ([seps[k - 1]] if k > 0 else []) + ([seps[k]] if k < len(seps) else [])
    if any(sep not in ("&&", ";") for sep in adjacent):
        raise RuleApplicationError(rule_id, idx, f"command joined by {adjacent}")
    if "\n" in body.rstrip("\n"):
        log.warning("rule %s edits multi-line directive %d; consider refining the rule", rule_id, idx)
    s, e = spans[k]
    if k == 0:
        nxt_start = spans[1][0]
        rest = body[nxt_start:]
        lead = body[: len(body) - len(body.lstrip(" \t"))]
        rest = re.sub(r"^(?:[ \t]|\\[ \t\r]*\n)*", "", rest)
        new_body = lead + rest
    else:
        sep_start = spans[k - 1][1]
        new_body = body[:sep_start] + body[e:]
        if k == len(spans) - 1:
            # dropped the tail command: keep the original line ending
            new_body = body[:sep_start].rstrip(" \t\\\n") + body[len(body.rstrip("\n")):]
    prefix = d.text[: len(d.text) - len(d.text.lstrip())] + d.text.lstrip()[: len(d.keyword)]
    return Directive(d.kind, prefix + new_body, d.line_span, d.edit)


def apply_rules(spec: BuildSpec, store: RuleStore) -> tuple[BuildSpec, list[str]]:
    """Rewrite or drop resources matched by the store, first match wins.

    Each rule fires at most once per directive per call.
    """
    if not store.rules:
        return spec, []
    applied: list[str] = []
    out: list[Directive] = []
    for idx, d in enumerate(spec.directives):
        used: set[str] = set()
        current: Directive | None = d
        changed = True
        while current is not None and changed:
            changed = False
            for url in urls_in(current.text):
                rule = store.first_match(url, exclude=used)
                if rule is None:
                    continue
                if rule.action == "replace":
                    if url == rule.new_url:
                        continue
                    current = Directive(current.kind, _replace_url(current.text, url, rule.new_url), current.line_span, current.edit)
                else:
                    current = _remove_command(current, idx, url, rule.rule_id)
                used.add(rule.rule_id)
                applied.append(rule.rule_id)
                changed = True
                break
        if current is not None:
            out.append(current)
    if not applied:
        return spec, []
    return spec.with_directives(out), applied


def matching_rules(store: RuleStore, broken: Iterable[BrokenResource]) -> list[ResourceRule]:
    """Rules that would fix at least one of ``broken``, in store order."""
    urls = [b.url for b in broken]
    return [r for r in store.rules if any(r.matches(u) for u in urls)]


def removal_rule(broken: BrokenResource) -> ResourceRule:
    """Throwaway rule used for the remove-and-retry classification build."""
    return ResourceRule(f"probe-remove:{broken.url}", broken.url, NON_CORE, "remove")


def without_resource(spec: BuildSpec, broken: BrokenResource) -> BuildSpec:
    stripped, _ = apply_rules(spec, RuleStore((removal_rule(broken),)))
    return stripped


def classify_resource(broken: BrokenResource, build_outcome_with_removal) -> str:
    """non_core iff the build still compiles the fuzz target without it."""
    return NON_CORE if build_outcome_with_removal.ok else CORE
