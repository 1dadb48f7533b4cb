import pytest

from pipesim.core import Policy, SimConfig

SWEEP = [(S, M, m) for S in (2, 4) for M in (4, 8) for m in (1, 2)]


def make_cfg(policy="TiMePReSt", **kw):
    lam = kw.pop("lam", 0.5)
    return SimConfig(policy=Policy.of(policy, lam), **kw)


@pytest.fixture
def cfg_factory():
    return make_cfg


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance_record():
    def record(number, ok, detail):
        _ACCEPTANCE[number] = (ok, detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
