import os

import numpy as np
import pytest
import torch

torch.set_num_threads(1)
os.environ.setdefault("MPLBACKEND", "Agg")

# acceptance verdict lines, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0].strip("[AC-]"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def fixture_data(tmp_path_factory):
    """On-disk synthetic datasets shared by the CLI tests."""
    from dermfoundry import fixtures

    root = tmp_path_factory.mktemp("fixtures")
    paths = {kind: writer(root) for kind, writer in fixtures.WRITERS.items()}
    paths["root"] = root
    return paths
