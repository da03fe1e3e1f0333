import numpy as np
import pytest

from vpe.data.benchmark import generate_benchmark


@pytest.fixture(scope="session")
def tiny_bench(tmp_path_factory):
    """Six classes (four seen, two unseen), ten reals each."""
    root = tmp_path_factory.mktemp("tiny_bench")
    generate_benchmark(root, classes=6, unseen=2, per_class=10, seed=3)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)



def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion that ran."""
    import sys
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
