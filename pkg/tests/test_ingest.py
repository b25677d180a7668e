from __future__ import annotations

import json
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vulnrepro.errors import MainProjectMissing, MissingPoC, ParseError, UnsupportedVcs
from vulnrepro.ingest import (
    REQUIRED_LABELS,
    DependencyPin,
    canonical_issue,
    fill_missing_times,
    filter_candidates,
    format_timestamp,
    main_revision_consistent,
    parse_issue,
    parse_srcmap,
    parse_timestamp,
    serialize_issue,
    serialize_srcmap,
)

DIGEST = "sha256:" + "ab" * 32


def issue_doc(**overrides):
    doc = {
        "local_id": 44851,
        "project": "libdemo",
        "labels": ["Bug-Security", "Reproducible", "Verified"],
        "crash": {"type": "heap-buffer-overflow", "sanitizer": "address", "fuzzer": "demo_fuzzer",
                  "command": ["$OUT/demo_fuzzer", "-runs=100", "@@"]},
        "vulnerable": {"srcmap": "44851-vul", "rev": "aaa"},
        "verified": {"srcmap": "44851-fix", "rev": "bbb"},
        "report_time": "2022-02-01T10:00:00Z",
        "verify_time": "2022-02-05T10:00:00Z",
        "poc": {"digest": DIGEST, "bytes": 65},
    }
    doc.update(overrides)
    return doc


def test_parse_issue_fields():
    issue = parse_issue(json.dumps(issue_doc()))
    assert issue.local_id == 44851
    assert issue.labels == REQUIRED_LABELS
    assert issue.crash.run_command == ("$OUT/demo_fuzzer", "-runs=100", "@@")
    assert issue.crash.command_for("/tmp/poc") == ["$OUT/demo_fuzzer", "-runs=100", "/tmp/poc"]
    assert issue.report_time == datetime(2022, 2, 1, 10, tzinfo=timezone.utc)
    assert issue.poc.hexdigest == "ab" * 32
    assert issue.tags == ("44851-vul", "44851-fix")


def test_round_trip_is_canonical():
    doc = issue_doc(labels=["Verified", "Bug-Security", "Reproducible", "Verified"],
                    report_time="2022-02-01T12:00:00+02:00")
    again = serialize_issue(parse_issue(doc))
    assert again == canonical_issue(doc)
    assert again["report_time"] == "2022-02-01T10:00:00Z"


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d.pop("project"), "project"),
    (lambda d: d.update(local_id="7"), "local_id"),
    (lambda d: d.update(local_id=True), "local_id"),
    (lambda d: d["crash"].pop("type"), "crash.type"),
    (lambda d: d["crash"].update(command=["fuzzer"]), "crash.command"),
    (lambda d: d["crash"].update(command=["fuzzer", "@@", "@@"]), "crash.command"),
    (lambda d: d["vulnerable"].pop("rev"), "vulnerable.rev"),
    (lambda d: d.update(report_time="yesterday"), "report_time"),
    (lambda d: d.update(verify_time="2022-01-01T00:00:00Z"), "verify_time"),
    (lambda d: d["poc"].update(digest="md5:abc"), "poc.digest"),
])
def test_parse_errors_name_the_field(mutate, field):
    doc = issue_doc()
    mutate(doc)
    with pytest.raises(ParseError) as err:
        parse_issue(doc)
    assert err.value.field == field


def test_missing_poc():
    doc = issue_doc()
    del doc["poc"]
    with pytest.raises(MissingPoC):
        parse_issue(doc)


def test_malformed_json():
    with pytest.raises(ParseError):
        parse_issue("{not json")


def test_filter_candidates_requires_all_labels_and_distinct_revisions():
    keep = parse_issue(issue_doc())
    unlabeled = parse_issue(issue_doc(local_id=2, labels=["Bug-Security", "Reproducible"]))
    wrong_case = parse_issue(issue_doc(local_id=3, labels=["bug-security", "Reproducible", "Verified"]))
    same_rev = parse_issue(issue_doc(local_id=4, verified={"srcmap": "x", "rev": "aaa"}))
    extra = parse_issue(issue_doc(local_id=5, labels=[*REQUIRED_LABELS, "Stability-Memory"]))
    assert [i.local_id for i in filter_candidates([keep, unlabeled, wrong_case, same_rev, extra])] == [44851, 5]


def test_fill_missing_times_uses_commit_time():
    doc = issue_doc()
    del doc["report_time"]
    issue = parse_issue(doc)
    when = datetime(2022, 1, 1, tzinfo=timezone.utc)
    filled = fill_missing_times(issue, lambda rev: when if rev == "aaa" else None)
    assert filled.report_time == when
    assert filled.verify_time == issue.verify_time


def test_timestamp_helpers():
    assert parse_timestamp(None) is None
    assert parse_timestamp("2020-01-01T00:00:00") == datetime(2020, 1, 1, tzinfo=timezone.utc)
    assert format_timestamp(datetime(2020, 1, 1, 0, 0, 0, 5, tzinfo=timezone.utc)) == "2020-01-01T00:00:00.000005Z"


SRCMAP = {
    "/src/libdemo": {"type": "git", "url": "https://git.example.org/libdemo", "rev": "aaa"},
    "/src/zlib": {"type": "git", "url": "https://github.com/madler/zlib.git", "rev": "z1"},
    "/src/nss": {"type": "hg", "url": "https://hg.mozilla.org/projects/nss", "rev": "n1"},
    "/src/netpbm": {"type": "svn", "url": "https://svn.code.sf.net/p/netpbm/code/advanced", "rev": "4321"},
}


def test_parse_srcmap_kinds_and_main():
    srcmap = parse_srcmap(SRCMAP, "libdemo")
    assert srcmap.main.revision == "aaa"
    assert {p.path: p.vcs_kind for p in srcmap.dependencies} == {
        "/src/zlib": "git", "/src/nss": "mercurial", "/src/netpbm": "svn"}
    assert serialize_srcmap(srcmap) == SRCMAP
    issue = parse_issue(issue_doc())
    assert main_revision_consistent(issue.vulnerable_ref, srcmap)
    assert not main_revision_consistent(issue.verified_ref, srcmap)


def test_parse_srcmap_main_matched_case_insensitively():
    doc = {"/src/LibDemo": SRCMAP["/src/libdemo"]}
    assert parse_srcmap(doc, "libdemo").main_path == "/src/LibDemo"


def test_parse_srcmap_errors():
    with pytest.raises(MainProjectMissing):
        parse_srcmap(SRCMAP, "other")
    with pytest.raises(UnsupportedVcs):
        parse_srcmap({"/src/x": {"type": "bzr", "url": "https://x", "rev": "1"}}, "x")
    with pytest.raises(ParseError):
        parse_srcmap({"/src/x": {"type": "git", "url": "not a url", "rev": "1"}}, "x")
    with pytest.raises(ParseError):
        parse_srcmap({"/src/x": {"type": "git", "url": "https://x/x", "rev": ""}}, "x")


def test_dependency_pin_name():
    assert DependencyPin("/src/icu/fuzzing", "git", "https://x.org/f", "1").name == "fuzzing"


@settings(max_examples=60, deadline=None)
@given(
    local_id=st.integers(1, 10**7),
    labels=st.lists(st.sampled_from(sorted(REQUIRED_LABELS) + ["Other"]), max_size=5),
    args=st.lists(st.text("abc-=/", min_size=1, max_size=5), max_size=3),
    stamp=st.integers(0, 2 * 10**9),
)
def test_serialize_parse_round_trip(local_id, labels, args, stamp):
    when = format_timestamp(datetime.fromtimestamp(stamp, timezone.utc))
    doc = issue_doc(local_id=local_id, labels=labels, report_time=when, verify_time=when)
    doc["crash"]["command"] = [*args, "@@"]
    issue = parse_issue(doc)
    assert parse_issue(serialize_issue(issue)) == issue
