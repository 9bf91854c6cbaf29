"""Shared pytest plumbing: the acceptance-criterion summary.

Tests marked with ``criterion("<name>")`` are grouped by name and the
terminal summary prints one PASS/FAIL line per criterion so the overall
acceptance status is readable at a glance.
"""

_CRITERION_NAMES: dict = {}
_CRITERIA: dict = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            _CRITERION_NAMES[item.nodeid] = marker.args[0]


def pytest_runtest_logreport(report):
    # setup failures/skips count against the criterion too
    if report.when == "call" or (report.when == "setup"
                                 and report.outcome != "passed"):
        name = _CRITERION_NAMES.get(report.nodeid)
        if name is not None:
            _CRITERIA.setdefault(name, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        outcomes = _CRITERIA[name]
        ok = all(o == "passed" for o in outcomes)
        word = "PASS" if ok else "FAIL"
        terminalreporter.write_line(
            f"{word}  {name}  ({len(outcomes)} test"
            f"{'s' if len(outcomes) != 1 else ''})",
            green=ok, red=not ok)
