import numpy as np
import pytest

from contrafair import synth
from contrafair.scm import (
    CATEGORICAL,
    OBSERVABLE,
    OUTCOME,
    PROTECTED,
    CausalGraph,
    FittedScm,
    Individual,
    Snapshot,
    StructuralEquation,
    VariableSpec,
)


def person(ident, protected, outcome=None, **observables):
    return Individual(ident, protected, (Snapshot(0, observables),), outcome)


@pytest.fixture
def fix_a():
    return synth.fix_a_scm()


@pytest.fixture
def chain():
    """X1 = A + e1, X2 = 2*X1 + e2 (unit noise), Y a leaf on X2."""
    graph = CausalGraph(
        variables=(
            VariableSpec("A", PROTECTED, CATEGORICAL, ("0", "1")),
            VariableSpec("X1", OBSERVABLE),
            VariableSpec("X2", OBSERVABLE),
            VariableSpec("Y", OUTCOME),
        ),
        edges=(("A", "X1"), ("X1", "X2"), ("X2", "Y")),
    )
    return FittedScm(
        graph=graph,
        equations={
            "X1": StructuralEquation("X1", 0.0, {"A=1": 1.0}, 1.0),
            "X2": StructuralEquation("X2", 0.0, {"X1": 2.0}, 1.0),
        },
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance summary ----------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion (printed at session end)."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
