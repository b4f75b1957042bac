import pytest
import torch

from styleap.synthetic import SyntheticTaskSpec, generate

torch.set_num_threads(1)

_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def synthetic_task():
    return generate(SyntheticTaskSpec())


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(n, passed, detail) then assert."""
    def record(n: int, passed: bool, detail: str):
        _CRITERIA[n] = (bool(passed), detail)
        assert passed, f"criterion {n}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
