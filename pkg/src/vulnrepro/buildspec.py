"""Line-level Dockerfile lexing and dependency revision pinning.

Instrumentation only ever inserts new directives directly after a fetch;
original directives are never touched, so dropping the inserted ones gives
back the input byte for byte.
"""

from __future__ import annotations

import bisect
import difflib
import re
import shlex
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from vulnrepro.errors import AmbiguousPin, NoCommitBefore, ParseError
from vulnrepro.ingest import DependencyPin

KINDS = {"RUN": "run", "COPY": "copy", "ADD": "copy", "ENV": "env", "WORKDIR": "workdir"}

URL_RE = re.compile(r"""(?:[a-zA-Z][a-zA-Z0-9+.-]*://|git@[\w.-]+:)[^\s'"<>|;&()`]+""")


@dataclass(frozen=True)
class PinEdit:
    insert_after: int
    command_text: str
    pin: DependencyPin


@dataclass(frozen=True)
class Directive:
    kind: str
    text: str
    line_span: tuple[int, int]
    edit: PinEdit | None = None

    @property
    def is_instruction(self) -> bool:
        stripped = self.text.strip()
        return bool(stripped) and not stripped.startswith("#")

    @property
    def keyword(self) -> str:
        if not self.is_instruction:
            return ""
        return self.text.split(None, 1)[0].upper()

    @property
    def body(self) -> str:
        """Raw text after the instruction keyword, continuations intact."""
        text = self.text.lstrip()
        return text[len(self.keyword):] if self.is_instruction else ""

    @property
    def logical(self) -> str:
        """Body with continuations joined and interior comment lines dropped."""
        lines = self.body.split("\n")
        kept = [ln for i, ln in enumerate(lines) if i == 0 or not ln.lstrip().startswith("#")]
        joined = "\n".join(kept)
        return re.sub(r"\\[ \t\r]*\n", " ", joined).strip()

    @property
    def urls(self) -> list[str]:
        return urls_in(self.logical)


@dataclass(frozen=True)
class BuildSpec:
    directives: tuple[Directive, ...]
    origin: str = "<string>"

    def serialize(self) -> str:
        return "".join(d.text for d in self.directives)

    def instructions(self) -> list[int]:
        return [i for i, d in enumerate(self.directives) if d.is_instruction]

    def with_directives(self, directives: Iterable[Directive]) -> "BuildSpec":
        return BuildSpec(_renumber(directives), self.origin)


@dataclass(frozen=True)
class FetchPoint:
    directive_index: int
    vcs_kind: str
    url: str
    dest_dir: str
    shallow: bool = False


def urls_in(text: str) -> list[str]:
    return [m.group(0).rstrip(".,") for m in URL_RE.finditer(text)]


def normalize_url(url: str) -> str:
    """Equivalence key for repository locators.

    Scheme, credentials and host case are dropped, as are trailing slashes
    and a ".git" suffix.
    """
    u = url.strip()
    m = re.match(r"^git@([\w.-]+):(.*)$", u)
    if m:
        host, path = m.group(1), m.group(2)
    else:
        u = re.sub(r"^[a-zA-Z][a-zA-Z0-9+.-]*://", "", u)
        host, _, path = u.partition("/")
        host = host.rsplit("@", 1)[-1]
    path = path.rstrip("/")
    while path.endswith(".git"):
        path = path[:-4].rstrip("/")
    return f"{host.lower()}/{path}" if path else host.lower()


def _renumber(directives: Iterable[Directive]) -> tuple[Directive, ...]:
    out = []
    line = 1
    for d in directives:
        n = max(1, len(d.text.strip("\n").split("\n")))
        out.append(replace(d, line_span=(line, line + n - 1)))
        line += n
    return tuple(out)


def _continues(line: str) -> bool:
    return line.rstrip("\r\n").rstrip(" \t").endswith("\\")


def parse_buildspec(raw: str, origin: str = "<string>") -> BuildSpec:
    lines = raw.splitlines(keepends=True)
    directives: list[Directive] = []
    i = 0
    while i < len(lines):
        line = lines[i]
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            directives.append(Directive("other", line, (i + 1, i + 1)))
            i += 1
            continue
        start = i
        while True:
            cur = lines[i]
            comment = i != start and cur.strip().startswith("#")
            if comment or _continues(cur):
                i += 1
                if i >= len(lines):
                    raise ParseError(message="unterminated line continuation", line=start + 1)
                continue
            break
        text = "".join(lines[start : i + 1])
        keyword = stripped.split(None, 1)[0].upper()
        directives.append(Directive(KINDS.get(keyword, "other"), text, (start + 1, i + 1)))
        i += 1
    return BuildSpec(tuple(directives), origin)


# -- shell chains -----------------------------------------------------------

_SEPARATORS = ("&&", "||", ";", "|")


def split_chain(text: str) -> tuple[list[tuple[int, int]], list[str]]:
    """Split shell text on top-level separators.

    Returns segment spans and the separators between them. Quotes,
    backslash escapes and $(...) nesting are respected.
    """
    spans, seps = [], []
    start = i = depth = 0
    quote = None
    while i < len(text):
        c = text[i]
        if quote:
            if c == "\\" and quote == '"':
                i += 2
                continue
            if c == quote:
                quote = None
            i += 1
            continue
        if c == "\\":
            i += 2
            continue
        if c in "'\"":
            quote = c
        elif c == "(":
            depth += 1
        elif c == ")":
            depth = max(0, depth - 1)
        elif depth == 0:
            for sep in _SEPARATORS:
                if text.startswith(sep, i):
                    spans.append((start, i))
                    seps.append(sep)
                    i += len(sep)
                    start = i
                    break
            else:
                i += 1
                continue
            continue
        i += 1
    if quote:
        raise ValueError("unbalanced quote")
    spans.append((start, len(text)))
    return spans, seps


def _tokens(segment: str) -> list[str]:
    segment = re.sub(r"\\[ \t\r]*\n", " ", segment)
    try:
        return shlex.split(segment, comments=False, posix=True)
    except ValueError:
        return segment.split()


_GIT_CLONE_ARGOPTS = {
    "-b", "--branch", "--depth", "-o", "--origin", "--reference", "-c", "--config",
    "-j", "--jobs", "--filter", "--shallow-since", "--shallow-exclude",
    "--separate-git-dir", "--template", "-u", "--upload-pack", "--reference-if-able",
}
_HG_CLONE_ARGOPTS = {"-r", "--rev", "-b", "--branch", "-u", "--updaterev", "-e", "--ssh"}
_SVN_CO_ARGOPTS = {"-r", "--revision", "--depth", "--username", "--password", "--config-option"}


def _positional(args: Sequence[str], argopts: set[str]) -> list[str]:
    out, skip = [], False
    for a in args:
        if skip:
            skip = False
            continue
        if a in argopts:
            skip = True
        elif a.startswith("-"):
            continue
        else:
            out.append(a)
    return out


def _fetch_command(tokens: list[str]):
    """(vcs_kind, url, dest or None, shallow) for a VCS fetch, else None."""
    while tokens and re.match(r"^[A-Za-z_][A-Za-z0-9_]*=", tokens[0]):
        tokens = tokens[1:]
    if tokens[:1] == ["sudo"]:
        tokens = tokens[1:]
    if len(tokens) < 3:
        return None
    tool, sub, rest = tokens[0], tokens[1], tokens[2:]
    if tool == "git" and sub == "clone":
        kind, argopts = "git", _GIT_CLONE_ARGOPTS
    elif tool == "hg" and sub == "clone":
        kind, argopts = "mercurial", _HG_CLONE_ARGOPTS
    elif tool == "svn" and sub in ("co", "checkout"):
        kind, argopts = "svn", _SVN_CO_ARGOPTS
    else:
        return None
    pos = _positional(rest, argopts)
    if not pos:
        return None
    shallow = any(a == "--depth" or a.startswith(("--depth=", "--shallow")) for a in rest)
    return kind, pos[0], (pos[1] if len(pos) > 1 else None), shallow and kind == "git"


def _default_dest(url: str) -> str:
    base = url.rstrip("/").rsplit("/", 1)[-1].rsplit(":", 1)[-1]
    return base[:-4] if base.endswith(".git") else base


def fetch_commands(directive: Directive) -> list[tuple[str, str, str, bool]]:
    """All VCS fetches in a RUN directive as (kind, url, dest_dir, shallow)."""
    if directive.kind != "run":
        return []
    body = directive.logical
    try:
        spans, _ = split_chain(body)
    except ValueError:
        spans = [(0, len(body))]
    found, cwd = [], None
    for s, e in spans:
        tokens = _tokens(body[s:e])
        if not tokens:
            continue
        if tokens[0] == "cd" and len(tokens) == 2:
            target = tokens[1]
            cwd = target if target.startswith(("/", "$", "~")) or cwd is None else f"{cwd}/{target}"
            continue
        cmd = _fetch_command(tokens)
        if cmd is None:
            continue
        kind, url, dest, shallow = cmd
        dest = dest or _default_dest(url)
        if cwd and not dest.startswith(("/", "$", "~")):
            dest = f"{cwd}/{dest}"
        found.append((kind, url, dest, shallow))
    return found


def locate_fetch_points(
    spec: BuildSpec, pins: Sequence[DependencyPin]
) -> tuple[list[FetchPoint], list[DependencyPin]]:
    """Match pins to the directives that fetch them.

    Returns the fetch points in directive order plus the pins that matched
    nothing (package-manager installs, vendored sources, ...).
    """
    keys = {normalize_url(p.url) for p in pins}
    points, matched = [], set()
    for idx, d in enumerate(spec.directives):
        for kind, url, dest, shallow in fetch_commands(d):
            key = normalize_url(url)
            if key in keys:
                points.append(FetchPoint(idx, kind, url, dest, shallow))
                matched.add(key)
    unmatched = [p for p in pins if normalize_url(p.url) not in matched]
    return points, unmatched


def _quote_path(path: str) -> str:
    return f'"{path}"' if re.search(r"\s", path) else path


def rollback_command(point: FetchPoint, pin: DependencyPin) -> str:
    dest = _quote_path(point.dest_dir)
    rev = shlex.quote(pin.revision)
    if point.vcs_kind == "git":
        checkout = f"git -C {dest} checkout {rev}"
        if point.shallow:
            return f"RUN git -C {dest} fetch --unshallow && {checkout}"
        return f"RUN {checkout}"
    if point.vcs_kind == "mercurial":
        return f"RUN hg update -R {dest} -r {rev}"
    return f"RUN svn update -r {rev} {dest}"


def _pin_for(point: FetchPoint, pins: Sequence[DependencyPin]) -> DependencyPin:
    key = normalize_url(point.url)
    hits = [p for p in pins if normalize_url(p.url) == key]
    if len(hits) > 1:
        # same repository pinned at several paths: disambiguate by checkout dir
        dest = point.dest_dir.rstrip("/").rsplit("/", 1)[-1]
        named = [p for p in hits if p.name == dest]
        if len(named) != 1:
            raise AmbiguousPin(f"{len(hits)} pins match fetch of {point.url} (directive {point.directive_index})")
        hits = named
    return hits[0]


def pin_revisions(spec: BuildSpec, pins: Sequence[DependencyPin]) -> tuple[BuildSpec, list[PinEdit]]:
    """Insert one rollback directive right after every matched fetch."""
    points, _ = locate_fetch_points(spec, pins)
    edits = [
        PinEdit(p.directive_index, rollback_command(p, pin), pin)
        for p in points
        for pin in [_pin_for(p, pins)]
    ]
    if not edits:
        return spec, []
    directives = list(spec.directives)
    # bottom-up keeps earlier indices valid; reversed within a directive keeps fetch order
    for edit in reversed(edits):
        prev = directives[edit.insert_after]
        if prev.text.endswith("\n"):
            text = edit.command_text + "\n"
        else:
            text = "\n" + edit.command_text
        new = Directive("run", text, (0, 0), edit)
        directives.insert(edit.insert_after + 1, new)
    return spec.with_directives(directives), edits


def strip_pin_edits(spec: BuildSpec) -> BuildSpec:
    return spec.with_directives(d for d in spec.directives if d.edit is None)


def render_pin_log(original: BuildSpec, pinned: BuildSpec) -> str:
    """Unified diff of the instrumentation, kept next to the build for audit."""
    return "".join(
        difflib.unified_diff(
            original.serialize().splitlines(keepends=True),
            pinned.serialize().splitlines(keepends=True),
            fromfile=f"a/{original.origin}",
            tofile=f"b/{pinned.origin}",
        )
    )


def resolve_commit_by_timestamp(history: Sequence[tuple[str, object]], query):
    """Latest commit at or before ``query``; history must be time-ascending.

    Equal timestamps resolve to the later entry in history order.
    """
    if not history:
        raise NoCommitBefore("empty history")
    times = [ts for _, ts in history]
    pos = bisect.bisect_right(times, query)
    if pos == 0:
        raise NoCommitBefore(f"no commit at or before {query}")
    return history[pos - 1][0]
