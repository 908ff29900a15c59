import numpy as np
import pytest

from contrafair import predictors as P
from contrafair import synth
from contrafair.errors import DomainTooLarge, InvalidMarginal
from contrafair.scm import (
    CATEGORICAL,
    OBSERVABLE,
    OUTCOME,
    PROTECTED,
    CausalGraph,
    FittedScm,
    Intervention,
    StructuralEquation,
    VariableSpec,
    counterfactual,
)

from conftest import person


def test_degenerate_noise_single_level(fix_a):
    scm = FittedScm(fix_a.graph, {"X": StructuralEquation("X", 1.0, {"A=1": 2.0}, 0.0)})
    people = synth.sample_population(
        synth.GeneratorConfig(scm=scm, n=20, seed=0, protected_marginals={"A": [0.0, 1.0]}))
    assert {(p.protected["A"], p.snapshot().observables["X"]) for p in people} == {("1", 3.0)}


def test_sample_mean_matches_model(fix_a):
    people = synth.fix_a_population(10_000, seed=13)
    xs = np.array([p.snapshot().observables["X"] for p in people])
    assert abs(xs.mean() - 2.0) <= 0.05


def test_marginal_frequencies_within_bound():
    n = 10_000
    people = synth.law_school_population(n, seed=3)
    for name, probs in synth.LAW_MARGINALS.items():
        freq = np.mean([p.protected[name] == "1" for p in people])
        assert abs(freq - probs[1]) <= 3 / np.sqrt(n)


def test_same_seed_identical_population(fix_a):
    a = synth.fix_a_population(200, seed=5)
    b = synth.fix_a_population(200, seed=5)
    assert a == b
    assert a != synth.fix_a_population(200, seed=6)


def test_drift_and_snapshots(fix_a):
    people = synth.sample_population(synth.GeneratorConfig(
        scm=fix_a, n=3, seed=1, protected_marginals={"A": [0.5, 0.5]},
        snapshots_per_individual=3, drift={"X": -1.5}))
    for p in people:
        xs = [s.observables["X"] for s in p.snapshots]
        assert [s.time for s in p.snapshots] == [0, 1, 2]
        assert xs[1] - xs[0] == pytest.approx(-1.5) and xs[2] - xs[0] == pytest.approx(-3.0)


@pytest.mark.parametrize("marginal", [[0.5, 0.6], [1.0], [-0.5, 1.5]])
def test_invalid_marginals(fix_a, marginal):
    with pytest.raises(InvalidMarginal):
        synth.GeneratorConfig(scm=fix_a, n=5, protected_marginals={"A": marginal})


def test_oracle_counterfactual_fix_a(fix_a):
    ind = person("i", {"A": "1"}, X=4.0)
    assert synth.oracle_counterfactual(fix_a.equations, ind, Intervention({"A": "0"})).observables == {"X": 2.0}
    assert synth.oracle_counterfactual(fix_a.equations, ind, Intervention({"A": "1"})).observables == {"X": 4.0}


def test_oracle_agrees_on_chain(chain, rng):
    for _ in range(200):
        a = str(rng.integers(2))
        ind = person("i", {"A": a}, X1=float(rng.normal()), X2=float(rng.normal()))
        iv = Intervention({"A": str(rng.integers(2))})
        got = counterfactual(chain, ind, -1, iv).observables
        want = synth.oracle_counterfactual(chain.equations, ind, iv).observables
        for k in want:
            assert got[k] == pytest.approx(want[k], abs=1e-12)


def test_oracle_check_constant_and_tie(fix_a):
    pred = P.linear_predictor("full", fix_a.graph, synth.FIX_A_DECISIONS)
    ind = person("i", {"A": "1"}, X=4.0)
    params = {"levels": {"A": ["0", "1"]}, "d": "accept", "d_prime": "reject"}
    assert synth.oracle_check(fix_a.equations, pred, [ind], "counterfactual_fairness", params)
    # all scores 0.5: strict ordering cannot hold
    assert not synth.oracle_check(fix_a.equations, pred, [ind], "d_contrast", params)


def test_oracle_domain_limit():
    levels = {f"A{k}": ["0", "1"] for k in range(5)}
    graph = CausalGraph(
        tuple(VariableSpec(n, PROTECTED, CATEGORICAL, ("0", "1")) for n in levels)
        + (VariableSpec("X", OBSERVABLE), VariableSpec("Y", OUTCOME)),
        (("A0", "X"),),
    )
    scm = FittedScm(graph, {"X": StructuralEquation("X", 0.0, {"A0=1": 1.0}, 1.0)})
    pred = P.linear_predictor("unaware", graph, ("n", "y"))
    ind = person("i", {n: "0" for n in levels}, X=0.0)
    with pytest.raises(DomainTooLarge):
        synth.oracle_check(scm.equations, pred, [ind], "counterfactual_fairness", {"levels": levels})


def test_presets_are_valid_scms():
    for make in (synth.fix_a_scm, synth.law_school_scm, synth.job_location_scm):
        scm = make()
        assert scm.order
    named = {p.id: p for p in synth.job_location_population(n=10)}
    assert named["P"].protected == {"race": "a"} and named["Q"].protected == {"race": "b"}
