import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from segad import synthetic  # noqa: E402

# Acceptance outcomes, filled in by tests/test_acceptance.py.
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 200 good / 60 bad synthetic corpus on disk."""
    out = tmp_path_factory.mktemp("small_corpus")
    manifest, segmap = synthetic.make_corpus(out, synthetic.SyntheticConfig(n_good=200, n_bad=60, size=32))
    return manifest, segmap
