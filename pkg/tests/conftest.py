import pytest

_VERDICTS: list[str] = []
_MODULE = {"collected": 0, "failed": 0}


def _is_module_test(nodeid: str) -> bool:
    return "test_acceptance.py" not in nodeid


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for an acceptance criterion and return the flag."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{name}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


@pytest.fixture
def module_suites_in_session() -> bool:
    return _MODULE["collected"] > 0


def pytest_collection_modifyitems(items):
    _MODULE["collected"] = sum(_is_module_test(i.nodeid) for i in items)


def pytest_runtest_logreport(report):
    if _is_module_test(report.nodeid) and report.failed:
        _MODULE["failed"] += 1


def pytest_terminal_summary(terminalreporter):
    lines = list(_VERDICTS)
    if _MODULE["collected"] and _VERDICTS:
        ok = _MODULE["failed"] == 0
        lines.append(
            f"AC10 property suites: {'PASS' if ok else 'FAIL'}  "
            f"({_MODULE['collected']} module tests, {_MODULE['failed']} failed)"
        )
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
