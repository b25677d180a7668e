from __future__ import annotations

import json
import signal
import stat

import pytest

from helpers import GIT_HOST, POC, T0
from vulnrepro.buildspec import parse_buildspec, pin_revisions
from vulnrepro.corpus import Corpus
from vulnrepro.errors import BackendUnavailable, PatchApplyError, RunTimeout
from vulnrepro.executor.base import (
    CLEAN,
    COMPILE_ERROR,
    CRASH,
    FETCH_ERROR,
    SUCCESS,
    BuildRequest,
    classify_crash,
    poc_digest,
)
from vulnrepro.executor.container import ContainerBackend
from vulnrepro.executor.sim import SimulatedBackend
from vulnrepro.ingest import DependencyPin
from vulnrepro.resources import detect_broken_resources

MAIN = DependencyPin("/src/p", "git", "https://git.example.org/p", "r1")
ZLIB = DependencyPin("/src/zlib", "git", "https://github.com/madler/zlib", "z1")
SPEC = parse_buildspec(
    "FROM base\nRUN git clone https://github.com/madler/zlib\nRUN git clone https://git.example.org/p p\n"
)


def req(rev="r1", pins=(ZLIB,), rules=(), spec=SPEC, patches=()):
    main = DependencyPin(MAIN.path, "git", MAIN.url, rev)
    return BuildRequest(spec, main, f"ws-{rev}", (main, *pins), tuple(rules), ("$OUT/f", "@@"), patches=patches)


MANIFEST = {
    "dead_urls": ["https://ftp.example.org/pcre"],
    "builds": [
        {"revision": "r1", "pins": {"/src/zlib": "z1"}, "outcome": {"status": "success", "artifact": "a1"}},
        {"revision": "r1", "pins": {"/src/zlib": "z2"}, "outcome": {"status": "compile_error", "log": "boom"}},
        {"revision": "r2", "rules": ["x"], "outcome": {"status": "success", "artifact": "a2"}},
        {"revision": "r3", "outcome": {"status": "success", "artifact": "a3"}},
    ],
    "runs": {"a1": {"status": "crash", "crash_type": "heap-buffer-overflow"}, "a2": {"status": "clean"},
             "a3": {"status": "timeout", "seconds": 5}},
    "prebuilt": {"7-fix": "a2"},
    "histories": {"https://git.example.org/p.git": [
        {"commit": "r2", "time": T0 + 10}, {"commit": "r1", "time": T0}]},
    "diffs": {"r2": "diff --git a/x b/x\n"},
}


def test_sim_scripted_builds_and_runs():
    sim = SimulatedBackend(MANIFEST)
    out = sim.build(req())
    assert out.status == SUCCESS and out.artifact_id == "a1"
    assert out.checked_out == {"/src/p": "r1", "/src/zlib": "z1"}
    run = sim.run_poc("a1", POC)
    assert run.crashed and run.crash_type == "heap-buffer-overflow"
    assert sim.build(req(pins=(DependencyPin("/src/zlib", "git", ZLIB.url, "z2"),))).status == COMPILE_ERROR
    assert sim.build(req("r2")).log == "unscripted"
    assert sim.build(req("r2", rules=["x"])).artifact_id == "a2"
    assert sim.run_poc("a2", POC).status == CLEAN
    with pytest.raises(RunTimeout):
        sim.run_poc("a3", POC)
    with pytest.raises(KeyError):
        sim.run_poc("nope", POC)


def test_sim_dead_url_gives_detectable_fetch_error():
    spec = parse_buildspec("FROM base\nRUN git clone https://git.example.org/p p && git clone https://ftp.example.org/pcre\n")
    out = SimulatedBackend(MANIFEST).build(req(spec=spec))
    assert out.status == FETCH_ERROR and out.url == "https://ftp.example.org/pcre"
    assert [b.url for b in detect_broken_resources(out.log, spec)] == ["https://ftp.example.org/pcre"]


def test_sim_history_prebuilt_and_diff():
    sim = SimulatedBackend(MANIFEST)
    assert [c.commit for c in sim.commit_history("https://git.example.org/p")] == ["r1", "r2"]
    assert sim.tip("https://git.example.org/p").commit == "r2"
    assert sim.commit_diff("https://git.example.org/p", "r2").startswith("diff --git")
    assert sim.supports_prebuilt

    class I:
        local_id = 7
    assert sim.fetch_prebuilt(I, "fix") == "a2" and sim.fetch_prebuilt(I, "vul") is None


def test_sim_patch_fingerprint_routes_builds():
    from vulnrepro.executor.sim import patch_fingerprint
    patched = req("r1", patches=(("/src/p", "diff"),))
    manifest = {"builds": [{"revision": "r1", "patch": patch_fingerprint(patched),
                            "outcome": {"status": "success", "artifact": "pa"}},
                           {"revision": "r1", "patch": None, "outcome": {"status": "success", "artifact": "plain"}}]}
    sim = SimulatedBackend(manifest)
    assert sim.build(patched).artifact_id == "pa"
    assert sim.build(req("r1")).artifact_id == "plain"


@pytest.mark.parametrize("stderr, rc, expected", [
    ("==1==ERROR: AddressSanitizer: heap-buffer-overflow on address", 1, "heap-buffer-overflow"),
    ("==1==ERROR: AddressSanitizer: attempting double-free on 0x1", 1, "double-free"),
    ("==1==ERROR: AddressSanitizer: SEGV on unknown address 0x0", 1, "unknown-address"),
    ("a.c:3:5: runtime error: signed integer overflow", 1, "undefined-behavior"),
    ("", -signal.SIGABRT, "signal-SIGABRT"),
    ("all good", 0, None),
    ("exit code 1 without sanitizer output", 1, None),
])
def test_classify_crash(stderr, rc, expected):
    assert classify_crash(stderr, rc) == expected


def test_poc_digest():
    assert poc_digest(b"") == "sha256:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


# -- local backend -------------------------------------------------------------------


def _local_request(world, local_id, which="vul", patches=()):
    corpus = Corpus(world.corpus)
    issue = corpus.load_issue(local_id)
    vul, fix = corpus.srcmaps(issue)
    srcmap = vul if which == "vul" else fix
    spec, _ = pin_revisions(corpus.buildspec(issue.project), srcmap.pins)
    return issue, srcmap, BuildRequest(spec, srcmap.main, f"{local_id}-{which}-exec", srcmap.pins, (),
                                       issue.crash.run_command, corpus.project_dir(issue.project), patches)


@pytest.mark.local
def test_local_build_checks_out_pins_and_crashes(world, tmp_path):
    backend = world.backend(str(tmp_path / "ws"))
    _, srcmap, request = _local_request(world, 44851)
    out = backend.build(request)
    assert out.status == SUCCESS, out.log
    assert dict(out.checked_out) == {p.path: p.revision for p in srcmap.pins}
    run = backend.run_poc(out.artifact_id, POC)
    assert run.status == CRASH and run.crash_type == "heap-buffer-overflow"
    assert backend.run_poc(out.artifact_id, b"Xshort").status == CLEAN


@pytest.mark.local
def test_local_missing_mirror_is_fetch_error(world, tmp_path):
    backend = world.backend(str(tmp_path / "ws"))
    corpus = Corpus(world.corpus)
    issue = corpus.load_issue(301)
    vul, _ = corpus.srcmaps(issue)
    spec, _ = pin_revisions(corpus.buildspec(issue.project), vul.pins)
    out = backend.build(BuildRequest(spec, vul.main, "301-exec", vul.pins, (), issue.crash.run_command,
                                     corpus.project_dir(issue.project)))
    assert out.status == FETCH_ERROR
    assert "https://dead.example.org/gamma" in [b.url for b in detect_broken_resources(out.log, spec)]


@pytest.mark.local
def test_local_bad_patch_raises(world, tmp_path):
    backend = world.backend(str(tmp_path / "ws"))
    bad = "--- a/src/nope.c\n+++ b/src/nope.c\n@@ -1 +1 @@\n-a\n+b\n"
    _, _, request = _local_request(world, 44851, patches=(("/src/libdemo", bad),))
    with pytest.raises(PatchApplyError):
        backend.build(request)


@pytest.mark.local
def test_local_history_and_tip(world):
    backend = world.backend()
    history = backend.commit_history(GIT_HOST + "memfix")
    assert [c.commit for c in history] == [sha for sha, _, _ in world.repos["memfix"].log]
    assert backend.tip(GIT_HOST + "memfix").commit == history[-1].commit
    assert "memcpy" in backend.commit_diff(GIT_HOST + "memfix", world.marks["memfix-fix"])
    with pytest.raises(KeyError):
        backend.commit_history("https://elsewhere.example.org/x")


def test_local_rejects_bad_workspace_id(tmp_path):
    from vulnrepro.executor.local import LocalBackend
    with pytest.raises(ValueError):
        LocalBackend(tmp_path).workspace("../escape")


# -- container backend -----------------------------------------------------------------

STUB = r"""#!/bin/bash
echo "$*" >> "$(dirname "$0")/calls.log"
case "$1" in
  build)
    echo "Step 1/3 : FROM base"
    echo "Step 2/3 : RUN git clone https://github.com/madler/zlib"
    if [ -n "$STUB_FAIL_FETCH" ]; then echo "fatal: unable to access 'https://github.com/madler/zlib/'"; exit 1; fi
    echo "Step 3/3 : RUN git clone https://git.example.org/p p"
    exit 0 ;;
  run)
    for a in "$@"; do
      case "$a" in
        *rev-parse*) echo "/src/zlib z1"; echo "/src/p r1"; exit 0 ;;
        compile) exit 0 ;;
      esac
    done
    echo "==1==ERROR: AddressSanitizer: heap-buffer-overflow on address 0x1" >&2
    exit 1 ;;
esac
"""


@pytest.fixture
def docker_stub(tmp_path):
    stub = tmp_path / "bin" / "docker"
    stub.parent.mkdir()
    stub.write_text(STUB)
    stub.chmod(stub.stat().st_mode | stat.S_IXUSR)
    return stub


def test_container_build_and_run_with_stub(docker_stub, tmp_path):
    backend = ContainerBackend(tmp_path / "ws", docker=str(docker_stub))
    out = backend.build(req())
    assert out.status == SUCCESS
    assert dict(out.checked_out) == {"/src/zlib": "z1", "/src/p": "r1"}
    assert (tmp_path / "ws" / "ws-r1" / "context" / "Dockerfile").read_text() == SPEC.serialize()
    run = backend.run_poc(out.artifact_id, POC)
    assert run.crashed and run.crash_type == "heap-buffer-overflow"
    calls = (docker_stub.parent / "calls.log").read_text()
    assert "SANITIZER=address" in calls and "/out/f /testcase" in calls


def test_container_fetch_failure_names_step_url(docker_stub, tmp_path, monkeypatch):
    monkeypatch.setenv("STUB_FAIL_FETCH", "1")
    out = ContainerBackend(tmp_path / "ws", docker=str(docker_stub)).build(req())
    assert out.status == FETCH_ERROR and out.url == "https://github.com/madler/zlib"


def test_container_without_runtime_is_unavailable(tmp_path):
    backend = ContainerBackend(tmp_path, docker="no-such-container-runtime")
    with pytest.raises(BackendUnavailable):
        backend.build(req())
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "artifact.json").write_text(json.dumps({"run_command": ["x"]}))
    (tmp_path / "a" / "work").mkdir()
    with pytest.raises(BackendUnavailable):
        backend.run_poc("a", POC)


def test_container_history_delegates():
    sim = SimulatedBackend(MANIFEST)
    backend = ContainerBackend("/nonexistent", history_source=sim)
    assert backend.tip("https://git.example.org/p").commit == "r2"
    with pytest.raises(NotImplementedError):
        ContainerBackend("/nonexistent").commit_history("https://x/y")
