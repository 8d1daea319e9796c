import numpy as np
import pytest

from porogat.dataio import SynthParams, generate_synthetic


@pytest.fixture(scope="session")
def small_records():
    """A 340-record dataset (17 porous) for fast pipeline tests."""
    return generate_synthetic(SynthParams(n_records=340, porous_rate=0.05, n_layers=5, seed=7))


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Repeat the one-line acceptance verdicts (and tables) at the end of the run."""
    lines, tables = [], []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "") != "call":
                continue
            for name, value in rep.user_properties:
                if name == "acceptance":
                    lines.append(value)
                elif name == "acceptance_table":
                    tables.append(value)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, text in sorted(lines):
        terminalreporter.write_line(text)
    for text in tables:
        terminalreporter.write_line("")
        terminalreporter.write(text)
