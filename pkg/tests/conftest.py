import pytest

from vde.cli import main

# (criterion, passed, detail) tuples appended by test_acceptance.py
ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def moons_weights(tmp_path_factory):
    """Two-moons field trained once per session with the default trainer config."""
    path = tmp_path_factory.mktemp("weights") / "moons.json"
    assert main(["train", "--dataset", "two-moons", "--seed", "0", "--out", str(path)]) == 0
    return path


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
