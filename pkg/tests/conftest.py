import contextlib

import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records PASS/FAIL for the acceptance summary."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        details: list[str] = []
        try:
            yield details.append
        except BaseException as exc:
            details.append(str(exc).splitlines()[0] if str(exc) else type(exc).__name__)
            _store(number, title, False, details)
            raise
        _store(number, title, True, details)

    return record


def _store(number: int, title: str, ok: bool, details: list) -> None:
    # parametrized criteria report once; any failing case fails the criterion
    if number in _CRITERIA:
        _, prev_ok, prev = _CRITERIA[number]
        ok = ok and prev_ok
        details = [prev] + details
    _CRITERIA[number] = (title, ok, "; ".join(d for d in details if d))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
