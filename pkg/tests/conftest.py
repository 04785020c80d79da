import contextlib

import numpy as np
import pytest

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""


@pytest.fixture
def criterion():
    """Record one acceptance criterion; a raised assertion records FAIL."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        c = _Criterion(number, title)
        try:
            yield c
        except BaseException:
            _ACCEPTANCE.append((number, title, False, c.detail))
            raise
        _ACCEPTANCE.append((number, title, True, c.detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}" + (f" -- {detail}" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
