"""Acceptance suite: one PASS/FAIL line per criterion."""

import pytest

from hardedge import acceptance

SLOW = {3, 6, 7, 8, 9, 10}


@pytest.mark.parametrize(
    "check", [pytest.param(c, marks=pytest.mark.slow) if i + 1 in SLOW else c
              for i, c in enumerate(acceptance.ALL)],
    ids=[f"criterion_{i + 1}_{c.__name__}" for i, c in enumerate(acceptance.ALL)])
def test_criterion(check, capsys):
    result = check()
    with capsys.disabled():
        print(f"\n{result.line()} {result.details}")
    assert result.passed, result.details
