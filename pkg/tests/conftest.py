import socket

import pytest

from visearch.cli import main


def free_ports(n):
    socks = [socket.socket() for _ in range(n)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_table(out):
    """Rows of the query table as (listing_id, category, hamming, s_app, s_asp, s_final)."""
    rows = []
    for line in out.splitlines()[1:]:
        parts = line.split()
        if not parts or not parts[0].isdigit():
            break
        rows.append((int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4]), float(parts[5]), float(parts[6])))
    return rows


@pytest.fixture(scope="session")
def built_root(tmp_path_factory):
    """Small dataset taken through gen, ingest and extract with the CLI."""
    root = tmp_path_factory.mktemp("cli-root")
    common = ["--data-root", root]
    for argv in (
        [*common, "gen", "--classes", "6", "--per-class", "40", "--val-per-class", "3", "--dim", "32",
         "--sigma", "0.5", "--duplicate-rate", "0.33", "--data-seed", "3"],
        [*common, "ingest", "--dim", "32", "--bits", "1024"],
        [*common, "extract", "--dim", "32", "--bits", "1024"],
    ):
        assert main([str(a) for a in argv]) == 0
    return root


# acceptance reporting: one line per criterion in the terminal summary

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def measured(request):
    """Collects the measurement string printed next to a criterion's verdict."""
    marker = request.node.get_closest_marker("criterion")
    entry = _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "detail": "", "ok": None})
    notes = []

    def note(text):
        notes.append(text)
        entry["detail"] = "; ".join(notes)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "detail": "", "ok": None})
    entry["ok"] = rep.passed if entry["ok"] is None else entry["ok"] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        verdict = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {verdict}  {e['title']}: {e['detail']}")
