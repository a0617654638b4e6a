import numpy as np
import pytest
from hypothesis import settings

from fes.synth import SynthSpec, generate

settings.register_profile("fes", deadline=None, max_examples=60)
settings.load_profile("fes")


@pytest.fixture(scope="session")
def small_bundle():
    """A 20x20 synthetic dataset with contexts, about 6% missing."""
    return generate(SynthSpec(20, 20, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion and return the outcome."""

    def record(number, name, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
