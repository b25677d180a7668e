"""Host backend: real VCS checkouts and compiler, one directory per request.

Each request gets ``<root>/<workspace_id>/{src,out,work,home}``. Dockerfile
directives are interpreted line by line: RUN goes to ``bash -c`` with
``$SRC``/``$OUT``/``$WORK`` pointing into the workspace, WORKDIR/COPY/ENV/ARG
are emulated, anything else is ignored. ``build.sh`` then runs as the
compile step. Repository URLs are redirected to local mirrors with git's
``url.<base>.insteadOf`` so buildspecs keep their upstream URLs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shlex
import shutil
import subprocess
import time
from pathlib import Path
from typing import Mapping

from vulnrepro.buildspec import Directive
from vulnrepro.errors import BackendUnavailable, PatchApplyError, RunTimeout
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
    classify_crash,
    step_header,
    to_utc,
)

log = logging.getLogger(__name__)

SANITIZER_FLAGS = {
    "address": "-fsanitize=address -fno-omit-frame-pointer",
    "undefined": "-fsanitize=undefined -fno-sanitize-recover=all",
    "memory": "-fsanitize=memory",
    "none": "",
}

_VAR_RE = re.compile(r"\$(?:\{(\w+)\}|(\w+))")


def expand(text: str, env: Mapping[str, str]) -> str:
    return _VAR_RE.sub(lambda m: env.get(m.group(1) or m.group(2), ""), text)


class LocalBackend(ExecutionBackend):
    name = "local"

    def __init__(
        self,
        workspace_root: str | Path,
        mirrors: Mapping[str, str | Path] | None = None,
        cc: str = "cc",
        cxx: str = "c++",
        timeout: float = 60.0,
        build_timeout: float = 900.0,
        prebuilt: Mapping[str, str] | None = None,
    ):
        self.root = Path(workspace_root)
        self.mirrors = {prefix: Path(path) for prefix, path in (mirrors or {}).items()}
        self.cc = cc
        self.cxx = cxx
        self.timeout = timeout
        self.build_timeout = build_timeout
        self.prebuilt = dict(prebuilt or {})
        self.supports_prebuilt = bool(self.prebuilt)

    @classmethod
    def from_env(cls, environ: Mapping[str, str] = os.environ, prefix: str = "VULNREPRO_") -> "LocalBackend":
        mirrors = json.loads(environ.get(prefix + "MIRRORS", "{}"))
        return cls(
            environ.get(prefix + "WORKSPACE", "workspace"),
            mirrors=mirrors,
            cc=environ.get(prefix + "CC", "cc"),
            cxx=environ.get(prefix + "CXX", "c++"),
            timeout=float(environ.get(prefix + "TIMEOUT", 60)),
        )

    # -- environment ---------------------------------------------------------

    def _check_toolchain(self):
        missing = [tool for tool in ("git", "bash", self.cc) if shutil.which(tool) is None]
        if missing:
            raise BackendUnavailable(f"local backend needs {', '.join(missing)} on PATH")

    def _git_env(self) -> dict[str, str]:
        config = [("advice.detachedHead", "false"), ("protocol.file.allow", "always")]
        for prefix, path in self.mirrors.items():
            config.append((f"url.{path.resolve().as_uri()}/.insteadOf", prefix))
        env = {"GIT_CONFIG_NOSYSTEM": "1", "GIT_TERMINAL_PROMPT": "0", "GIT_CONFIG_COUNT": str(len(config))}
        for i, (key, value) in enumerate(config):
            env[f"GIT_CONFIG_KEY_{i}"] = key
            env[f"GIT_CONFIG_VALUE_{i}"] = value
        return env

    def _base_env(self, ws: Path, sanitizer: str) -> dict[str, str]:
        flags = SANITIZER_FLAGS.get(sanitizer, "")
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "LANG": "C.UTF-8",
            "HOME": str(ws / "home"),
            "SRC": str(ws / "src"),
            "OUT": str(ws / "out"),
            "WORK": str(ws / "work"),
            "CC": self.cc,
            "CXX": self.cxx,
            "CFLAGS": f"-g -O1 {flags}".strip(),
            "CXXFLAGS": f"-g -O1 {flags}".strip(),
            "SANITIZER": sanitizer,
        }
        env.update(self._git_env())
        return env

    def resolve_url(self, url: str) -> Path | None:
        best = None
        for prefix, path in self.mirrors.items():
            if url.startswith(prefix) and (best is None or len(prefix) > len(best[0])):
                best = (prefix, path)
        if best:
            return best[1] / url[len(best[0]):]
        if url.startswith("file://"):
            return Path(url[len("file://"):])
        if url.startswith("/"):
            return Path(url)
        return None

    # -- build ---------------------------------------------------------------

    def workspace(self, workspace_id: str) -> Path:
        if not re.fullmatch(r"[\w.-]+", workspace_id):
            raise ValueError(f"bad workspace id {workspace_id!r}")
        return self.root / workspace_id

    def _map_path(self, path: str, ws: Path, cwd: Path) -> Path:
        p = Path(path)
        if not p.is_absolute():
            return cwd / p
        try:
            p.relative_to(ws)
            return p
        except ValueError:
            pass
        parts = p.parts[1:]
        if parts and parts[0] in ("src", "out", "work"):
            return ws.joinpath(*parts)
        return ws.joinpath("root", *parts)

    def build(self, req: BuildRequest) -> BuildOutcome:
        self._check_toolchain()
        started = time.monotonic()
        ws = self.workspace(req.workspace_id)
        if ws.exists():
            shutil.rmtree(ws)
        for sub in ("src", "out", "work", "home"):
            (ws / sub).mkdir(parents=True)
        env = self._base_env(ws, req.sanitizer)
        cwd = ws / "src"
        transcript: list[str] = []
        instructions = req.spec.instructions()

        def fail(status, url=None):
            return BuildOutcome(status, log="\n".join(transcript), url=url,
                                duration=time.monotonic() - started)

        for n, idx in enumerate(instructions, 1):
            d = req.spec.directives[idx]
            transcript.append(step_header(n, len(instructions), d.text))
            keyword = d.keyword
            if keyword == "RUN":
                rc, output = self._sh(d.logical, cwd, env)
                transcript.append(output)
                if rc != 0:
                    transcript.append(f"The command '{d.logical}' returned a non-zero code: {rc}")
                    if d.edit is not None:
                        return fail(FETCH_ERROR, d.edit.pin.url)
                    urls = d.urls
                    return fail(FETCH_ERROR, urls[0]) if urls else fail(COMPILE_ERROR)
            elif keyword == "WORKDIR":
                cwd = self._map_path(expand(d.logical, env), ws, cwd)
                cwd.mkdir(parents=True, exist_ok=True)
            elif keyword in ("ENV", "ARG"):
                self._set_env(d, env, keyword)
            elif keyword in ("COPY", "ADD"):
                err = self._copy(d, env, ws, cwd, req.context_dir)
                if err:
                    transcript.append(err)
                    urls = d.urls
                    return fail(FETCH_ERROR, urls[0]) if urls else fail(COMPILE_ERROR)

        checked_out = self._record_heads(ws / "src", env)
        self._apply_patches(req, ws, env)

        script = ws / "src" / "build.sh"
        if not script.exists():
            script = cwd / "build.sh"
        if not script.exists():
            transcript.append("no build.sh found")
            return fail(COMPILE_ERROR)
        transcript.append(f"Step {len(instructions) + 1}/{len(instructions) + 1} : compile")
        rc, output = self._run(["bash", "-eu", str(script)], cwd, env)
        transcript.append(output)
        if rc != 0:
            return fail(COMPILE_ERROR)

        meta = {"run_command": list(req.run_command), "workspace": str(ws)}
        (ws / "artifact.json").write_text(json.dumps(meta))
        return BuildOutcome(
            SUCCESS,
            artifact_id=req.workspace_id,
            log="\n".join(transcript),
            duration=time.monotonic() - started,
            checked_out=checked_out,
        )

    def _sh(self, command: str, cwd: Path, env):
        return self._run(["bash", "-c", command], cwd, env)

    def _run(self, argv, cwd: Path, env):
        try:
            proc = subprocess.run(
                argv, cwd=cwd, env=env, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                timeout=self.build_timeout,
            )
        except subprocess.TimeoutExpired as exc:
            out = (exc.stdout or b"").decode(errors="replace")
            return 124, out + f"\nstep exceeded {self.build_timeout}s"
        return proc.returncode, proc.stdout.decode(errors="replace")

    @staticmethod
    def _set_env(d: Directive, env: dict, keyword: str):
        body = d.logical
        if keyword == "ARG":
            name, _, default = body.partition("=")
            env.setdefault(name.strip(), expand(default.strip().strip('"'), env))
            return
        try:
            words = shlex.split(body)
        except ValueError:
            words = body.split()
        if words and "=" not in words[0]:
            env[words[0]] = expand(" ".join(words[1:]), env)
            return
        for word in words:
            key, _, value = word.partition("=")
            env[key] = expand(value, env)

    def _copy(self, d: Directive, env, ws: Path, cwd: Path, context: Path | None) -> str | None:
        body = d.logical
        if body.startswith("["):
            args = json.loads(body)
        else:
            args = [a for a in shlex.split(body) if not a.startswith("--")]
        if len(args) < 2:
            return f"malformed {d.keyword}"
        *sources, dest = [expand(a, env) for a in args]
        target = self._map_path(dest, ws, cwd)
        for src in sources:
            if "://" in src:
                return f"{d.keyword} of remote url {src} is not supported locally"
            if context is None:
                return f"{d.keyword} {src}: no build context"
            origin = (context / src).resolve()
            try:
                origin.relative_to(context.resolve())
            except ValueError:
                return f"{d.keyword} {src}: outside build context"
            if not origin.exists():
                return f"{d.keyword} failed: {src} not found in build context"
            into_dir = dest.endswith("/") or len(sources) > 1 or target.is_dir()
            if origin.is_dir():
                shutil.copytree(origin, target, dirs_exist_ok=True)
            else:
                dst = target / origin.name if into_dir else target
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copy2(origin, dst)
        return None

    def _record_heads(self, src: Path, env) -> dict[str, str]:
        heads = {}
        for repo in sorted(p.parent for p in src.glob("*/.git")) + sorted(p.parent for p in src.glob("*/*/.git")):
            proc = subprocess.run(["git", "-C", str(repo), "rev-parse", "HEAD"], env=env,
                                  stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
            if proc.returncode == 0:
                heads["/src/" + repo.relative_to(src).as_posix()] = proc.stdout.decode().strip()
        return heads

    def _apply_patches(self, req: BuildRequest, ws: Path, env):
        for path, diff in req.patches:
            if not diff.strip():
                continue
            tree = self._map_path(path, ws, ws / "src")
            patch_file = ws / "work" / "candidate.patch"
            patch_file.write_text(diff if diff.endswith("\n") else diff + "\n")
            for args in (["apply", "--check"], ["apply"]):
                proc = subprocess.run(["git", "-C", str(tree), *args, str(patch_file)], env=env,
                                      stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
                if proc.returncode != 0:
                    raise PatchApplyError(proc.stdout.decode(errors="replace").strip())

    # -- run -----------------------------------------------------------------

    def run_poc(self, artifact_id: str, poc: bytes) -> RunOutcome:
        ws = self.workspace(artifact_id)
        meta_path = ws / "artifact.json"
        if not meta_path.exists():
            raise KeyError(f"unknown artifact {artifact_id!r}")
        meta = json.loads(meta_path.read_text())
        poc_path = ws / "work" / f"poc-{hashlib.sha256(poc).hexdigest()[:16]}"
        poc_path.write_bytes(poc)
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "OUT": str(ws / "out"),
            "SRC": str(ws / "src"),
            "ASAN_OPTIONS": "detect_leaks=0:symbolize=0",
            "UBSAN_OPTIONS": "print_stacktrace=1",
        }
        argv = [expand(a, env).replace("@@", str(poc_path)) for a in meta["run_command"]]
        started = time.monotonic()
        try:
            proc = subprocess.run(argv, cwd=ws / "out", env=env, stdout=subprocess.DEVNULL,
                                  stderr=subprocess.PIPE, timeout=self.timeout)
        except subprocess.TimeoutExpired:
            raise RunTimeout(self.timeout) from None
        stderr = proc.stderr.decode(errors="replace")
        crash_type = classify_crash(stderr, proc.returncode)
        status = CRASH if crash_type else CLEAN
        return RunOutcome(status, proc.returncode, time.monotonic() - started, crash_type, stderr[-4000:])

    def fetch_prebuilt(self, issue, which: str) -> str | None:
        return self.prebuilt.get(f"{issue.local_id}-{which}")

    # -- history -------------------------------------------------------------

    def _repo(self, url: str) -> Path:
        path = self.resolve_url(url)
        if path is None or not path.exists():
            raise KeyError(f"no local mirror for {url}")
        return path

    def _git(self, repo: Path, *args: str) -> str:
        proc = subprocess.run(["git", "-C", str(repo), *args], stdout=subprocess.PIPE,
                              stderr=subprocess.PIPE, env={**os.environ, **self._git_env()})
        if proc.returncode != 0:
            raise RuntimeError(proc.stderr.decode(errors="replace").strip())
        return proc.stdout.decode(errors="replace")

    def commit_history(self, url: str) -> list[CommitInfo]:
        out = self._git(self._repo(url), "log", "--all", "--date-order", "--reverse", "--format=%H %ct %P")
        commits = []
        for line in out.splitlines():
            sha, ts, *parents = line.split()
            commits.append(CommitInfo(sha, to_utc(int(ts)), tuple(parents)))
        return sorted(commits, key=lambda c: c.timestamp)

    def commit_diff(self, url: str, commit: str) -> str:
        repo = self._repo(url)
        parents = self._git(repo, "rev-list", "--parents", "-n1", commit).split()[1:]
        if parents:
            return self._git(repo, "diff", "--no-color", "--no-ext-diff", parents[0], commit)
        return self._git(repo, "show", "--no-color", "--format=", commit)

    def tip(self, url: str) -> CommitInfo:
        repo = self._repo(url)
        sha, ts, *parents = self._git(repo, "log", "-1", "--format=%H %ct %P", "HEAD").split()
        return CommitInfo(sha, to_utc(int(ts)), tuple(parents))
