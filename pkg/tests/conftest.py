import pytest

from schedq.uarch import load_machine_config


@pytest.fixture(scope="session")
def zen2():
    return load_machine_config("Zen2")


@pytest.fixture(scope="session")
def zen3():
    return load_machine_config("Zen3")


@pytest.fixture(scope="session")
def zen4():
    return load_machine_config("Zen4")


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record a criterion outcome; printed in the terminal summary."""
    def record(criterion: int, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE[criterion] = (bool(passed), detail)
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}".rstrip())
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[crit]
        terminalreporter.write_line(
            f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
