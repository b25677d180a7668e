"""Fixture builders: git histories with fixed dates, small C projects, corpora."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from vulnrepro.buildspec import resolve_commit_by_timestamp
from vulnrepro.executor.local import LocalBackend

T0 = 1_600_000_000
HOUR = 3600
GIT_HOST = "https://git.example.org/"
DEAD_HOST = "https://dead.example.org/"
LABELS = ["Bug-Security", "Reproducible", "Verified"]
POC = b"X" + b"A" * 64


def iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def have_toolchain() -> bool:
    if not (shutil.which("git") and shutil.which("cc")):
        return False
    probe = subprocess.run(["cc", "-fsanitize=address", "-x", "c", "-", "-o", os.devnull],
                           input=b"int main(void){return 0;}", capture_output=True)
    return probe.returncode == 0


def _git_env(ts: int | None = None) -> dict[str, str]:
    env = {
        **os.environ,
        "GIT_CONFIG_NOSYSTEM": "1",
        "GIT_CONFIG_GLOBAL": os.devnull,
        "GIT_AUTHOR_NAME": "dev",
        "GIT_AUTHOR_EMAIL": "dev@example.org",
        "GIT_COMMITTER_NAME": "dev",
        "GIT_COMMITTER_EMAIL": "dev@example.org",
    }
    if ts is not None:
        env["GIT_AUTHOR_DATE"] = env["GIT_COMMITTER_DATE"] = f"@{ts} +0000"
    return env


class Repo:
    def __init__(self, path: Path):
        self.path = path
        path.mkdir(parents=True, exist_ok=True)
        self.git("init", "-q", "-b", "main")
        self.log: list[tuple[str, int, str]] = []

    def git(self, *args: str, ts: int | None = None) -> str:
        proc = subprocess.run(["git", "-C", str(self.path), *args], env=_git_env(ts),
                              capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(proc.stderr)
        return proc.stdout.strip()

    def commit(self, files: dict[str, str | None], message: str, ts: int) -> str:
        for name, content in files.items():
            target = self.path / name
            if content is None:
                target.unlink()
                continue
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(content)
        self.git("add", "-A")
        self.git("commit", "-q", "--allow-empty", "-m", message, ts=ts)
        sha = self.git("rev-parse", "HEAD")
        self.log.append((sha, ts, message))
        return sha

    def history(self) -> list[tuple[str, int]]:
        return [(sha, ts) for sha, ts, _ in self.log]

    def at(self, ts: int) -> str:
        return resolve_commit_by_timestamp(self.history(), ts)


# -- C sources -------------------------------------------------------------------

ALPHA_H = "int alpha_init(void);\n"
ALPHA_C = '#include "alpha.h"\nint alpha_init(void) { return 1; }\n'
BETA_H = "unsigned beta_checksum(const unsigned char *p, unsigned long n);\n"
BETA_C = ('#include "beta.h"\nunsigned beta_checksum(const unsigned char *p, unsigned long n) {\n'
          "    unsigned s = 0;\n    while (n--) s += *p++;\n    return s;\n}\n")
BETA_H_BROKEN = "unsigned beta_checksum(const unsigned char *p, unsigned long n, unsigned seed);\n"
BETA_C_BROKEN = ('#include "beta.h"\n'
                 "unsigned beta_checksum(const unsigned char *p, unsigned long n, unsigned seed) {\n"
                 "    unsigned s = seed;\n    while (n--) s += *p++;\n    return s;\n}\n")
GAMMA_H = "const char *gamma_version(void);\n"
GAMMA_C = '#include "gamma.h"\nconst char *gamma_version(void) { return "gamma-1"; }\n'

FUZZ_MAIN = """#include <stdio.h>
int demo_parse(const unsigned char *data, unsigned long n);
int main(int argc, char **argv) {
    unsigned char buf[4096];
    FILE *f;
    size_t n;
    if (argc < 2 || !(f = fopen(argv[1], "rb"))) return 2;
    n = fread(buf, 1, sizeof buf, f);
    fclose(f);
    demo_parse(buf, n);
    return 0;
}
"""

_CORE = """#include <stdlib.h>
#include <string.h>
#include "alpha.h"
#include "beta.h"
#include "gamma.h"

int demo_parse(const unsigned char *data, unsigned long n) {
    char *buf;
    unsigned long len;
    int r;
    if (n < 1 || data[0] != 'X') return 0;
    buf = malloc(8);
    len = n - 1;
{guard}    memcpy(buf, data + 1, len);
    r = buf[0] + (int)beta_checksum(data, n) + alpha_init() + (gamma_version()[0] == 'g');
    free(buf);
    return r;
}
"""


def core_source(fixed: bool) -> str:
    return _CORE.replace("{guard}", "    if (len > 8) len = 8;\n" if fixed else "")


def crash_report(project: str, core: str) -> str:
    return (
        "==1==ERROR: AddressSanitizer: heap-buffer-overflow on address 0x602000000018\n"
        "WRITE of size 64 at 0x602000000018 thread T0\n"
        "    #0 0x4c3a in __asan_memcpy\n"
        f"    #1 0x4f10 in demo_parse /src/{project}/src/{core}.c:15:5\n"
        f"    #2 0x4f99 in main /src/{project}/fuzz/fuzz_main.c:10:5\n"
    )


def dockerfile(project: str, gamma_host: str = GIT_HOST) -> str:
    return (
        "FROM gcr.io/oss-fuzz-base/base-builder\n"
        "RUN git clone --depth 1 https://git.example.org/alpha alpha\n"
        f"RUN git clone https://git.example.org/beta beta && git clone {gamma_host}gamma gamma\n"
        f"RUN git clone https://git.example.org/{project} {project}\n"
        f"WORKDIR {project}\n"
        "COPY build.sh $SRC/\n"
    )


def build_script(project: str) -> str:
    return (
        "$CC $CFLAGS -I$SRC/alpha -I$SRC/beta -I$SRC/gamma \\\n"
        f"    $SRC/{project}/src/*.c $SRC/{project}/fuzz/fuzz_main.c \\\n"
        "    $SRC/alpha/alpha.c $SRC/beta/beta.c $SRC/gamma/gamma.c \\\n"
        f"    -o $OUT/{project}_fuzzer\n"
    )


# -- the world ---------------------------------------------------------------------


@dataclass
class IssueSpec:
    local_id: int
    project: str
    vul: str
    fix: str
    report_time: int
    verify_time: int


@dataclass
class World:
    root: Path
    corpus: Path
    mirrors: dict[str, str]
    repos: dict[str, Repo] = field(default_factory=dict)
    issues: dict[int, IssueSpec] = field(default_factory=dict)
    marks: dict[str, str] = field(default_factory=dict)

    def backend(self, name: str = "ws", **kw) -> LocalBackend:
        return LocalBackend(self.root / name, mirrors=self.mirrors, **kw)

    def dep_pins(self, ts: int) -> dict[str, dict[str, str]]:
        out = {}
        for dep in ("alpha", "beta", "gamma"):
            out[f"/src/{dep}"] = {"type": "git", "url": GIT_HOST + dep, "rev": self.repos[dep].at(ts)}
        return out


def _dependencies(world: World) -> None:
    alpha = Repo(world.root / "mirror" / "alpha")
    alpha.commit({"alpha.h": ALPHA_H, "alpha.c": ALPHA_C}, "alpha: initial", T0)
    alpha.commit({"alpha.c": "/* v2 */\n" + ALPHA_C}, "alpha: tidy", T0 + 5 * HOUR)
    beta = Repo(world.root / "mirror" / "beta")
    beta.commit({"beta.h": BETA_H, "beta.c": BETA_C}, "beta: initial", T0)
    beta.commit({"beta.c": "/* v2 */\n" + BETA_C}, "beta: comment", T0 + 4 * HOUR)
    beta.commit({"beta.h": BETA_H_BROKEN, "beta.c": BETA_C_BROKEN}, "beta: seeded checksum API",
                T0 + 10_000 * HOUR)
    gamma = Repo(world.root / "mirror" / "gamma")
    gamma.commit({"gamma.h": GAMMA_H, "gamma.c": GAMMA_C}, "gamma: initial", T0)
    gamma.commit({"gamma.c": "/* v2 */\n" + GAMMA_C}, "gamma: comment", T0 + 7 * HOUR)
    world.repos.update(alpha=alpha, beta=beta, gamma=gamma)


def make_project(world: World, project: str, core: str, events: list[tuple[float, str, str]],
                 gamma_host: str = GIT_HOST) -> list[str]:
    """Create the main repo plus corpus build context.

    ``events`` are (hour, kind, message) with kind one of init, fix, note,
    readme, changelog, break.
    """
    repo = Repo(world.root / "mirror" / project)
    shas = []
    for n, (hour, kind, message) in enumerate(events):
        ts = T0 + int(hour * HOUR)
        if kind == "init":
            files = {f"src/{core}.c": core_source(False), "fuzz/fuzz_main.c": FUZZ_MAIN,
                     "README": f"{project}\n", "ChangeLog": ""}
        elif kind == "fix":
            files = {f"src/{core}.c": core_source(True)}
        elif kind == "readme":
            files = {"README": f"{project}\nrevision {n}\n"}
        elif kind == "changelog":
            files = {"ChangeLog": f"release {n}\n"}
        elif kind == "break":
            files = {f"src/{core}.c": core_source(False).replace("free(buf);", "free(buf)")}
        elif kind == "unbreak":
            files = {f"src/{core}.c": core_source(False)}
        else:
            files = {"NOTES": f"{message}\n"}
        shas.append(repo.commit(files, message, ts))
    world.repos[project] = repo
    ctx = world.corpus / "projects" / project
    ctx.mkdir(parents=True, exist_ok=True)
    (ctx / "Dockerfile").write_text(dockerfile(project, gamma_host))
    (ctx / "build.sh").write_text(build_script(project))
    return shas


def add_issue(world: World, local_id: int, project: str, core: str, vul: str, fix: str,
              report_time: int, verify_time: int, gamma_url: str = GIT_HOST + "gamma") -> None:
    repo = world.repos[project]
    times = dict(repo.history())
    for which, rev in (("vul", vul), ("fix", fix)):
        srcmap = {f"/src/{project}": {"type": "git", "url": GIT_HOST + project, "rev": rev}}
        srcmap.update(world.dep_pins(times[rev]))
        srcmap["/src/gamma"]["url"] = gamma_url
        path = world.corpus / "srcmaps" / f"{local_id}-{which}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(srcmap, indent=2))
    digest = hashlib.sha256(POC).hexdigest()
    (world.corpus / "pocs").mkdir(parents=True, exist_ok=True)
    (world.corpus / "pocs" / digest).write_bytes(POC)
    doc = {
        "local_id": local_id,
        "project": project,
        "labels": LABELS,
        "crash": {"type": "heap-buffer-overflow", "sanitizer": "address", "fuzzer": f"{project}_fuzzer",
                  "command": [f"$OUT/{project}_fuzzer", "@@"], "report": crash_report(project, core)},
        "vulnerable": {"srcmap": f"{local_id}-vul", "rev": vul},
        "verified": {"srcmap": f"{local_id}-fix", "rev": fix},
        "report_time": iso(report_time),
        "verify_time": iso(verify_time),
        "poc": {"digest": "sha256:" + digest, "bytes": len(POC)},
    }
    (world.corpus / "issues").mkdir(parents=True, exist_ok=True)
    (world.corpus / "issues" / f"{local_id}.json").write_text(json.dumps(doc, indent=2))
    world.issues[local_id] = IssueSpec(local_id, project, vul, fix, report_time, verify_time)


RESCUE_RULE = "gamma-moved | core | https://dead.example.org/gamma* | replace https://git.example.org/gamma\n"


def build_world(root: Path) -> World:
    """Every local-backend scenario in one corpus.

    44851  libdemo   14 candidates, fix at index 9, changelog-only recorded fix
    25267  memfix    recorded fix touches README; real memcpy fix later
    50001  zeroday   recorded fix touches README; tip still crashes
    301-303 rescue-* gamma cloned from a dead host
    """
    corpus = root / "corpus"
    world = World(root, corpus, {GIT_HOST: str(root / "mirror"), DEAD_HOST: str(root / "dead")})
    _dependencies(world)

    events = [(1, "init", "libdemo: import"), (2, "note", "libdemo: docs")]
    for i in range(14):
        kind = "fix" if i == 9 else ("changelog" if i == 13 else "note")
        message = {"fix": "parse: bound copy length", "changelog": "ChangeLog: update"}.get(kind, f"misc {i}")
        events.append((3 + i, kind, message))
    shas = make_project(world, "libdemo", "parse", events)
    world.marks["libdemo-fix"] = shas[2 + 9]
    world.marks["libdemo-decoy"] = shas[-1]
    add_issue(world, 44851, "libdemo", "parse", shas[1], shas[-1],
              T0 + int(2.5 * HOUR), T0 + int(16.5 * HOUR))

    shas = make_project(world, "memfix", "memcpy", [
        (1, "init", "memfix: import"), (2, "note", "memfix: docs"), (3, "readme", "update README"),
        (5, "note", "misc a"), (6, "note", "misc b"), (7, "fix", "fix wrong memcpy size"),
        (8, "note", "misc c"),
    ])
    world.marks["memfix-fix"] = shas[5]
    world.marks["memfix-readme"] = shas[2]
    add_issue(world, 25267, "memfix", "memcpy", shas[1], shas[2], T0 + int(2.5 * HOUR), T0 + int(3.5 * HOUR))

    shas = make_project(world, "zeroday", "decode", [
        (1, "init", "zeroday: import"), (2, "note", "docs"), (3, "readme", "update README"),
        (4, "note", "misc"),
    ])
    add_issue(world, 50001, "zeroday", "decode", shas[1], shas[2], T0 + int(2.5 * HOUR), T0 + int(3.5 * HOUR))

    for n, suffix in enumerate("abc"):
        project = f"rescue-{suffix}"
        shas = make_project(world, project, "parse", [
            (1, "init", "import"), (2, "note", "docs"), (3, "fix", "bound copy"),
        ], gamma_host=DEAD_HOST)
        add_issue(world, 301 + n, project, "parse", shas[1], shas[2], T0 + int(2.5 * HOUR),
                  T0 + int(3.5 * HOUR), gamma_url=DEAD_HOST + "gamma")
    (root / "rules.txt").write_text(RESCUE_RULE)
    return world


# -- simulated corpora -------------------------------------------------------------

SIM_DEPS = {"/src/zlib": "https://github.com/madler/zlib"}


def sim_project(corpus: Path, project: str, extra_clone: str | None = None) -> None:
    """Build context whose Dockerfile clones zlib (plus ``extra_clone``) and the project."""
    ctx = corpus / "projects" / project
    ctx.mkdir(parents=True, exist_ok=True)
    extra = f" && git clone {extra_clone}" if extra_clone else ""
    (ctx / "Dockerfile").write_text(
        "FROM gcr.io/oss-fuzz-base/base-builder\n"
        f"RUN git clone https://github.com/madler/zlib{extra}\n"
        f"RUN git clone {GIT_HOST}{project} {project}\n"
        f"WORKDIR {project}\n"
        "COPY build.sh $SRC/\n"
    )
    (ctx / "build.sh").write_text("make\n")


def sim_issue(corpus: Path, local_id: int, project: str, vul: str, fix: str, *,
              deps: dict[str, tuple[str, str, str]] | None = None,
              report_time: int = T0 + HOUR, verify_time: int = T0 + 100 * HOUR,
              report: str | None = None) -> None:
    """Issue document, srcmaps and PoC; ``deps`` maps path to (url, vul rev, fix rev)."""
    deps = deps if deps is not None else {"/src/zlib": (SIM_DEPS["/src/zlib"], "z1", "z1")}
    for which, rev in (("vul", vul), ("fix", fix)):
        srcmap = {f"/src/{project}": {"type": "git", "url": GIT_HOST + project, "rev": rev}}
        for path, (url, rv, rf) in deps.items():
            srcmap[path] = {"type": "git", "url": url, "rev": rv if which == "vul" else rf}
        target = corpus / "srcmaps" / f"{local_id}-{which}.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(srcmap))
    digest = hashlib.sha256(POC).hexdigest()
    (corpus / "pocs").mkdir(parents=True, exist_ok=True)
    (corpus / "pocs" / digest).write_bytes(POC)
    crash = {"type": "heap-buffer-overflow", "sanitizer": "address", "fuzzer": "f",
             "command": ["$OUT/f", "@@"]}
    if report:
        crash["report"] = report
    doc = {
        "local_id": local_id, "project": project, "labels": LABELS, "crash": crash,
        "vulnerable": {"srcmap": f"{local_id}-vul", "rev": vul},
        "verified": {"srcmap": f"{local_id}-fix", "rev": fix},
        "report_time": iso(report_time), "verify_time": iso(verify_time),
        "poc": {"digest": "sha256:" + digest, "bytes": len(POC)},
    }
    (corpus / "issues").mkdir(parents=True, exist_ok=True)
    (corpus / "issues" / f"{local_id}.json").write_text(json.dumps(doc))


def sim_history(prefix: str, n: int, start: int = T0, step: int = HOUR) -> list[dict]:
    """Linear history c0..c{n-1}, one commit per ``step`` seconds."""
    out = []
    for i in range(n):
        out.append({"commit": f"{prefix}{i}", "time": start + i * step,
                    "parents": [f"{prefix}{i - 1}"] if i else []})
    return out
