import numpy as np
import pytest

from deepsofa.ingest import EncounterSeries
from deepsofa.synth import SynthConfig, generate
from deepsofa.variables import VAR_INDEX, VARIABLES, load_specs


@pytest.fixture(scope="session")
def specs():
    return load_specs()


def make_series(T, enc="e1", pid="p1", label=0, stay=0, age=60.0, **columns):
    """Grid at normal values, with the given columns overridden (scalar or length-T) and marked observed."""
    sp = load_specs()
    grid = np.tile([sp[v].normal_value for v in VARIABLES], (T, 1)).astype(float)
    observed = np.zeros((T, len(VARIABLES)), dtype=bool)
    for name, values in columns.items():
        grid[:, VAR_INDEX[name]] = values
        observed[:, VAR_INDEX[name]] = True
    return EncounterSeries(enc, pid, grid, observed, label, stay, age)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(n_encounters=80, seed=11, median_stay_hours=30))


@pytest.fixture(scope="session")
def small_cohort(small_synth):
    return small_synth.series()


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, title, ok, detail=""):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
