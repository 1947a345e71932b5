import pytest
import torch

from bionet.phantom import PhantomConfig, generate_phantom

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def phantom_config():
    return PhantomConfig(seed=3)


@pytest.fixture(scope="session")
def phantoms(phantom_config):
    return [generate_phantom(phantom_config, i) for i in range(6)]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
