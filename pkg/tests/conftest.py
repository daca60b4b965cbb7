import os
import sys

import pytest

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, HERE)

from synthetic import make_corpus  # noqa: E402

MITDB_DIR = os.path.abspath(os.environ.get("RECG_MITDB_DIR", os.path.join(HERE, "..", "data", "mitdb")))


def mitdb_record(name):
    stem = os.path.join(MITDB_DIR, name)
    return stem if os.path.exists(stem + ".hea") and os.path.exists(stem + ".dat") else None


@pytest.fixture(scope="session")
def record100():
    stem = mitdb_record("100")
    if stem is None:
        pytest.skip(f"MIT-BIH record 100 not found under {MITDB_DIR} (set RECG_MITDB_DIR)")
    return stem


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    make_corpus(str(d), records=2, beats_per_record=40, seed=3)
    return str(d)


# --- acceptance summary: one line per criterion ------------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = item.name
    if not name.startswith("test_criterion_") or not item.nodeid.startswith("tests/test_acceptance.py"):
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        num = int(name.split("_")[2])
        doc = (item.function.__doc__ or name).strip().splitlines()[0]
        status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        _criteria.setdefault(num, []).append((status, doc, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_criteria):
        for status, doc, secs in _criteria[num]:
            tr.write_line(f"criterion {num}: {status:4s} [{secs:7.1f}s] {doc}")
