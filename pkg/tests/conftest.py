from __future__ import annotations

import json
from pathlib import Path

import pytest

from helpers import build_world, have_toolchain

DATA = Path(__file__).parent / "data"

_TOOLCHAIN = have_toolchain()


def pytest_collection_modifyitems(config, items):
    if _TOOLCHAIN:
        return
    skip = pytest.mark.skip(reason="needs git and a C compiler with AddressSanitizer")
    for item in items:
        if "local" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    if not _TOOLCHAIN:
        pytest.skip("needs git and a C compiler with AddressSanitizer")
    return build_world(tmp_path_factory.mktemp("world"))


@pytest.fixture(scope="session")
def buildspec_corpus():
    folder = DATA / "buildspecs"
    annotations = json.loads((folder / "annotations.json").read_text())
    return [(folder / name, ann) for name, ann in sorted(annotations.items())]


def pytest_terminal_summary(terminalreporter):
    from acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
