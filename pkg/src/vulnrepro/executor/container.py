"""Container backend: builds inside the archived builder image, as upstream does.

``docker build`` runs the instrumented Dockerfile (fetch stage), then the
image's ``compile`` entrypoint builds into a bind-mounted ``/out``. PoCs run
in the runner image with the testcase mounted read-only.
"""

from __future__ import annotations

import json
import re
import shutil
import subprocess
import time
from pathlib import Path

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
)

DEFAULT_RUNNER = "gcr.io/oss-fuzz-base/base-runner"
_STEP_RE = re.compile(r"^(?:Step (\d+)/\d+ :|#\d+ \[(?:[\w.-]+ )?\s*(\d+)/\d+\])", re.M)

_HEADS_SCRIPT = (
    'for d in /src/*/ /src/*/*/; do [ -d "$d.git" ] && '
    'echo "${d%/} $(git -C "$d" rev-parse HEAD)"; done; true'
)


class ContainerBackend(ExecutionBackend):
    name = "container"

    def __init__(self, workspace_root, docker: str = "docker", runner_image: str = DEFAULT_RUNNER,
                 timeout: float = 60.0, build_timeout: float = 3600.0, history_source: ExecutionBackend | None = None):
        self.root = Path(workspace_root)
        self.docker = docker
        self.runner_image = runner_image
        self.timeout = timeout
        self.build_timeout = build_timeout
        self.history_source = history_source

    def _docker(self, *args, timeout=None, capture=True):
        if shutil.which(self.docker) is None:
            raise BackendUnavailable(f"container runtime {self.docker!r} not found")
        return subprocess.run([self.docker, *args], stdout=subprocess.PIPE,
                              stderr=subprocess.STDOUT if capture else subprocess.PIPE,
                              timeout=timeout or self.build_timeout)

    @staticmethod
    def image_tag(workspace_id: str) -> str:
        return "vulnrepro-build:" + re.sub(r"[^a-z0-9_.-]", "-", workspace_id.lower())

    def build(self, req: BuildRequest) -> BuildOutcome:
        started = time.monotonic()
        ws = self.root / req.workspace_id
        if ws.exists():
            shutil.rmtree(ws)
        ctx, out, work = ws / "context", ws / "out", ws / "work"
        if req.context_dir is not None:
            shutil.copytree(req.context_dir, ctx)
        ctx.mkdir(parents=True, exist_ok=True)
        out.mkdir(parents=True)
        work.mkdir(parents=True)
        (ctx / "Dockerfile").write_text(req.spec.serialize())
        tag = self.image_tag(req.workspace_id)

        proc = self._docker("build", "-t", tag, "-f", str(ctx / "Dockerfile"), str(ctx))
        transcript = proc.stdout.decode(errors="replace")
        if proc.returncode != 0:
            steps = [int(a or b) for a, b in _STEP_RE.findall(transcript)]
            instructions = req.spec.instructions()
            url = None
            if steps and 0 < steps[-1] <= len(instructions):
                d = req.spec.directives[instructions[steps[-1] - 1]]
                url = d.edit.pin.url if d.edit else (d.urls[0] if d.urls else None)
            status = FETCH_ERROR if url else COMPILE_ERROR
            return BuildOutcome(status, log=transcript, url=url, duration=time.monotonic() - started)

        heads = self._docker("run", "--rm", tag, "bash", "-c", _HEADS_SCRIPT)
        checked_out = {}
        for line in heads.stdout.decode(errors="replace").splitlines():
            parts = line.split()
            if len(parts) == 2 and parts[0].startswith("/src/"):
                checked_out[parts[0]] = parts[1]

        compile_cmd = "compile"
        mounts = ["-v", f"{out.resolve()}:/out"]
        if req.patches:
            pdir = work / "patches"
            pdir.mkdir()
            applies = []
            for i, (path, diff) in enumerate(req.patches):
                (pdir / f"{i}.patch").write_text(diff)
                applies.append(f"git -C {path} apply /patches/{i}.patch")
            mounts += ["-v", f"{pdir.resolve()}:/patches:ro"]
            compile_cmd = " && ".join(applies + ["compile"])
        env = ["-e", f"SANITIZER={req.sanitizer}", "-e", "FUZZING_ENGINE=libfuzzer", "-e", "ARCHITECTURE=x86_64"]
        proc = self._docker("run", "--rm", *mounts, *env, tag, "bash", "-c", compile_cmd)
        transcript += proc.stdout.decode(errors="replace")
        if proc.returncode != 0:
            if req.patches and "git -C" in transcript and "patch does not apply" in transcript:
                raise PatchApplyError(transcript[-2000:])
            return BuildOutcome(COMPILE_ERROR, log=transcript, duration=time.monotonic() - started)
        (ws / "artifact.json").write_text(json.dumps({"run_command": list(req.run_command), "image": tag}))
        return BuildOutcome(SUCCESS, artifact_id=req.workspace_id, log=transcript,
                            duration=time.monotonic() - started, checked_out=checked_out)

    def run_poc(self, artifact_id: str, poc: bytes) -> RunOutcome:
        ws = self.root / artifact_id
        meta = json.loads((ws / "artifact.json").read_text())
        testcase = ws / "work" / "testcase"
        testcase.write_bytes(poc)
        argv = [a.replace("$OUT", "/out").replace("@@", "/testcase") for a in meta["run_command"]]
        started = time.monotonic()
        try:
            proc = subprocess.run(
                [self.docker, "run", "--rm", "-v", f"{(ws / 'out').resolve()}:/out",
                 "-v", f"{testcase.resolve()}:/testcase:ro", "-e", "ASAN_OPTIONS=detect_leaks=0",
                 self.runner_image, *argv],
                stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, timeout=self.timeout,
            )
        except FileNotFoundError:
            raise BackendUnavailable(f"container runtime {self.docker!r} not found") from None
        except subprocess.TimeoutExpired:
            raise RunTimeout(self.timeout) from None
        stderr = proc.stderr.decode(errors="replace")
        crash_type = classify_crash(stderr, proc.returncode)
        return RunOutcome(CRASH if crash_type else CLEAN, proc.returncode,
                          time.monotonic() - started, crash_type, stderr[-4000:])

    def commit_history(self, url: str) -> list[CommitInfo]:
        if self.history_source is None:
            return super().commit_history(url)
        return self.history_source.commit_history(url)

    def commit_diff(self, url: str, commit: str) -> str:
        if self.history_source is None:
            return super().commit_diff(url, commit)
        return self.history_source.commit_diff(url, commit)

    def tip(self, url: str) -> CommitInfo:
        if self.history_source is None:
            return super().tip(url)
        return self.history_source.tip(url)
