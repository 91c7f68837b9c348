"""Acceptance criteria 1-8; each prints one PASS/FAIL line."""

import pytest

import acceptance


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(acceptance.CHECKS))
def test_acceptance(number, acceptance_report, capsys):
    res = acceptance.CHECKS[number]()
    with capsys.disabled():
        print("\n" + res.line())
    acceptance_report(res.line())
    for extra in res.info:
        acceptance_report(extra)
    assert res.passed, res.line()
