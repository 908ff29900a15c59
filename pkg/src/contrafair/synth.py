"""Synthetic populations from known SCMs, plus brute-force test oracles.

The oracles here deliberately share no propagation or scoring code with
:mod:`contrafair.scm` and :mod:`contrafair.predictors`: counterfactuals are
recomputed by naive recursive substitution and scores by scalar loops, so
agreement between the two paths is evidence rather than tautology.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainTooLarge, InvalidMarginal, MissingValue, UnknownProtected
from .scm import (
    CATEGORICAL,
    OBSERVABLE,
    OUTCOME,
    PROTECTED,
    CausalGraph,
    FittedScm,
    Individual,
    Intervention,
    Snapshot,
    StructuralEquation,
    VariableSpec,
)


@dataclass(frozen=True)
class GeneratorConfig:
    scm: FittedScm
    n: int
    seed: int = 0
    protected_marginals: dict[str, Sequence[float]] = field(default_factory=dict)
    snapshots_per_individual: int = 1
    drift: dict[str, float] = field(default_factory=dict)
    id_prefix: str = "I"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("population size must be >= 1")
        if self.snapshots_per_individual < 1:
            raise ValueError("snapshots_per_individual must be >= 1")
        graph = self.scm.graph
        for name in graph.protected:
            spec = graph.variable(name)
            if spec.domain != CATEGORICAL:
                raise InvalidMarginal(f"cannot sample continuous protected variable {name!r}")
            probs = self.protected_marginals.get(name)
            if probs is None:
                raise InvalidMarginal(f"no marginal given for protected variable {name!r}")
            probs = np.asarray(probs, dtype=float)
            if probs.shape != (len(spec.levels),):
                raise InvalidMarginal(
                    f"marginal for {name!r} has {probs.size} entries, expected {len(spec.levels)}"
                )
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
                raise InvalidMarginal(f"marginal for {name!r} must be nonnegative and sum to 1")
        for name in self.drift:
            if name not in graph.observables:
                raise ValueError(f"drift names non-observable {name!r}")


def _column(graph: CausalGraph, feature: str, values: Mapping[str, np.ndarray]) -> np.ndarray:
    if "=" in feature:
        var, level = feature.split("=", 1)
        return (values[var] == level).astype(float)
    return values[feature].astype(float)


def sample_population(config: GeneratorConfig) -> list[Individual]:
    """Ancestral sampling: protected roots, then each equation in topological order."""
    scm, n = config.scm, config.n
    graph = scm.graph
    rng = np.random.default_rng(config.seed)
    values: dict[str, np.ndarray] = {}
    for name in graph.protected:
        levels = np.asarray(graph.variable(name).levels)
        idx = rng.choice(len(levels), size=n, p=np.asarray(config.protected_marginals[name], float))
        values[name] = levels[idx]

    outcome = graph.outcomes[0]
    targets = list(scm.order)
    if outcome in scm.equations:
        targets.append(outcome)
    for child in targets:
        eq = scm.equations[child]
        mean = np.full(n, eq.intercept)
        for feature in graph.parent_features(child):
            mean = mean + eq.weights[feature] * _column(graph, feature, values)
        values[child] = mean + rng.normal(0.0, eq.noise_std, size=n)

    width = len(str(n - 1))
    people = []
    for i in range(n):
        base = {o: float(values[o][i]) for o in graph.observables}
        snaps = []
        for k in range(config.snapshots_per_individual):
            obs = {o: base[o] + k * config.drift.get(o, 0.0) for o in graph.observables}
            snaps.append(Snapshot(time=k, observables=obs))
        people.append(
            Individual(
                id=f"{config.id_prefix}{i:0{width}d}",
                protected={p: str(values[p][i]) for p in graph.protected},
                snapshots=tuple(snaps),
                outcome=float(values[outcome][i]) if outcome in values else None,
            )
        )
    return people


# -- independent oracles -------------------------------------------------------


def _as_equation_map(equations) -> dict[str, StructuralEquation]:
    if isinstance(equations, FittedScm):
        equations = equations.equations
    if isinstance(equations, Mapping):
        equations = equations.values()
    return {e.child: e for e in equations}


def oracle_counterfactual(
    equations,
    individual: Individual,
    intervention: Intervention,
    snapshot_index: int = -1,
) -> Snapshot:
    """Counterfactual snapshot by plain recursive substitution.

    ``equations`` is any collection of StructuralEquation objects; parent
    structure is read off the weight keys ("R=1" is an indicator of R's level,
    any other key is the parent's raw value).
    """
    eqs = _as_equation_map(equations)
    snap = individual.snapshots[snapshot_index]
    protected = dict(individual.protected)
    for k in intervention.assignments:
        if k not in protected:
            raise UnknownProtected(f"{k!r} is not a protected variable of the individual")
    factual = dict(protected)
    factual.update(snap.observables)

    def term(key, lookup):
        if "=" in key:
            var, level = key.split("=", 1)
            return 1.0 if str(lookup(var)) == level else 0.0
        return float(lookup(key))

    def structural_mean(child, lookup):
        e = eqs[child]
        return e.intercept + sum(w * term(k, lookup) for k, w in e.weights.items())

    def factual_lookup(name):
        if name not in factual or factual[name] is None:
            raise MissingValue(name, individual.id)
        return factual[name]

    residual = {c: float(factual_lookup(c)) - structural_mean(c, factual_lookup)
                for c in snap.observables if c in eqs}

    world_protected = {**protected, **intervention.assignments}

    def cf_lookup(name):
        if name in world_protected:
            return world_protected[name]
        return structural_mean(name, cf_lookup) + residual[name]

    return Snapshot(time=snap.time, observables={c: cf_lookup(c) for c in snap.observables})


def _oracle_scores(predictor, protected, observables, residuals) -> dict[str, float]:
    """Scalar re-implementation of the predictor forward pass."""
    x = []
    for name in predictor.input_names:
        if name.startswith("eps["):
            x.append(residuals[name[4:-1]])
        elif "=" in name:
            var, level = name.split("=", 1)
            x.append(1.0 if str(protected[var]) == level else 0.0)
        elif name in observables:
            x.append(float(observables[name]))
        else:
            x.append(float(protected[name]))
    p = predictor.params
    z = [(xi - s) / c for xi, s, c in zip(x, p["shift"], p["scale"])]
    if "W1" in p:
        z = [math.tanh(sum(w * zi for w, zi in zip(row, z)) + b) for row, b in zip(p["W1"], p["b1"])]
    logits = [sum(w * zi for w, zi in zip(row, z)) + b for row, b in zip(p["W"], p["b"])]
    decisions = predictor.decision_space.decisions
    if len(logits) == 1:
        p1 = 1.0 / (1.0 + math.exp(-logits[0])) if logits[0] >= 0 else \
            math.exp(logits[0]) / (1.0 + math.exp(logits[0]))
        return {decisions[0]: 1.0 - p1, decisions[1]: p1}
    top = max(logits)
    e = [math.exp(l - top) for l in logits]
    total = sum(e)
    return {d: v / total for d, v in zip(decisions, e)}


def oracle_check(
    equations,
    predictor,
    subjects: Sequence[Individual],
    criterion: str,
    params: Mapping[str, Any],
) -> bool:
    """Exhaustively evaluate every (decision, intervention) condition of a criterion.

    ``params`` carries ``levels`` ({protected: [levels]}), the decisions ``d`` /
    ``d_prime``, ticks ``t`` / ``t_prime`` and the tolerances ``eps_fair``,
    ``delta_order``, ``lambda_margin``, ``strict_margin``.
    """
    eqs = _as_equation_map(equations)
    levels = params["levels"]
    names = list(levels)
    domain = [dict(zip(names, combo)) for combo in itertools.product(*(levels[k] for k in names))]
    if len(domain) > 16:
        raise DomainTooLarge(f"{len(domain)} protected combinations exceed the oracle limit of 16")
    eps = params.get("eps_fair", 1e-6)
    delta = params.get("delta_order", 0.0)
    lam = params.get("lambda_margin", 0.05)
    space = list(predictor.decision_space.decisions)

    def world_scores(ind, k, assignment=None):
        snap = ind.snapshots[k]
        factual_obs = snap.observables
        if assignment is None:
            protected, obs = ind.protected, factual_obs
        else:
            protected = {**ind.protected, **assignment}
            obs = oracle_counterfactual(eqs, ind, Intervention(assignment), k).observables
        residuals = {}
        if predictor.family == "counterfactual":
            residuals = _oracle_residuals(eqs, ind, k)
        return _oracle_scores(predictor, protected, obs, residuals)

    def fair(ind, k, decisions):
        base = world_scores(ind, k)
        for a in domain:
            alt = world_scores(ind, k, a)
            for d in decisions:
                if not abs(alt[d] - base[d]) <= eps:
                    return False
        return True

    def own(ind):
        return {n: ind.protected[n] for n in names}

    d, dp = params.get("d"), params.get("d_prime")
    if criterion == "counterfactual_fairness":
        (ind,) = subjects
        return fair(ind, -1, params.get("decisions") or space)
    if criterion == "d_contrast":
        (ind,) = subjects
        s = world_scores(ind, -1)
        return fair(ind, -1, [d, dp]) and s[d] - s[dp] > delta
    if criterion == "i_contrast":
        i, j = subjects
        si, sj = world_scores(i, -1), world_scores(j, -1)
        swapped_i, swapped_j = world_scores(i, -1, own(j)), world_scores(j, -1, own(i))
        return all([
            fair(i, -1, space),
            fair(j, -1, space),
            si[d] - si[dp] > delta,
            sj[dp] - sj[d] > delta,
            swapped_i[d] - swapped_i[dp] > delta,
            swapped_j[dp] - swapped_j[d] > delta,
        ])
    if criterion == "t_contrast":
        (ind,) = subjects
        times = [s.time for s in ind.snapshots]
        k, kp = times.index(params["t"]), times.index(params["t_prime"])
        before, after = world_scores(ind, k), world_scores(ind, kp)
        return (
            all(fair(ind, idx, space) for idx in range(len(times)))
            and before[d] - before[dp] > delta
            and after[dp] - after[d] > delta
        )
    if criterion == "contrast_margin":
        i, j = subjects
        ok = True
        for a in (own(i), own(j)):
            si, sj = world_scores(i, -1, a), world_scores(j, -1, a)
            ok = ok and si[d] - sj[d] > lam
            if params.get("strict_margin"):
                ok = ok and sj[dp] - si[dp] > lam
        return ok
    raise ValueError(f"oracle does not know criterion {criterion!r}")


def _oracle_residuals(eqs, ind, k) -> dict[str, float]:
    snap = ind.snapshots[k]
    values = {**ind.protected, **snap.observables}
    out = {}
    for c in snap.observables:
        e = eqs[c]
        mean = e.intercept
        for key, w in e.weights.items():
            if "=" in key:
                var, level = key.split("=", 1)
                mean += w * (1.0 if str(values[var]) == level else 0.0)
            else:
                mean += w * float(values[key])
        out[c] = float(snap.observables[c]) - mean
    return out


# -- fixtures --------------------------------------------------------------------

BINARY = ("0", "1")

FIX_A_DECISIONS = ("reject", "accept")
FIX_A_THRESHOLD = 0.0


def fix_a_scm() -> FittedScm:
    """Single binary protected ``A`` with one proxy feature.

    X = 1 + 2*A + eps_X,  eps_X ~ N(0, 0.5^2)
    Y = -1 + X - 1.7*A + eps_Y,  eps_Y ~ N(0, 0.3^2)

    so Y = eps_X + 0.3*A + eps_Y: the outcome carries a direct protected
    effect beyond the proxy path, which a predictor reading X and A learns.
    """
    graph = CausalGraph(
        variables=(
            VariableSpec("A", PROTECTED, CATEGORICAL, BINARY),
            VariableSpec("X", OBSERVABLE),
            VariableSpec("Y", OUTCOME),
        ),
        edges=(("A", "X"), ("A", "Y"), ("X", "Y")),
    )
    return FittedScm(
        graph=graph,
        equations={
            "X": StructuralEquation("X", 1.0, {"A=1": 2.0}, 0.5),
            "Y": StructuralEquation("Y", -1.0, {"A=1": -1.7, "X": 1.0}, 0.3),
        },
    )


def fix_a_population(n: int, seed: int = 7) -> list[Individual]:
    return sample_population(
        GeneratorConfig(scm=fix_a_scm(), n=n, seed=seed, protected_marginals={"A": [0.5, 0.5]})
    )


LAW_DECISIONS = ("low", "high")
LAW_THRESHOLD = 0.0
LAW_MARGINALS = {"R": [0.7, 0.3], "S": [0.5, 0.5]}


def law_school_scm() -> FittedScm:
    """Two binary protected roots (race R, sex S), two mediators, one outcome.

    GPA  = 3.0  - 0.4*R + 0.1*S + eps_G,              eps_G ~ N(0, 0.4^2)
    LSAT = 35.0 - 5.0*R - 1.0*S + eps_L,              eps_L ~ N(0, 4^2)
    FYA  = -5.0 - 0.3*R + 0.8*GPA + 0.08*LSAT + eps_F, eps_F ~ N(0, 0.5^2)
    """
    graph = CausalGraph(
        variables=(
            VariableSpec("R", PROTECTED, CATEGORICAL, BINARY),
            VariableSpec("S", PROTECTED, CATEGORICAL, BINARY),
            VariableSpec("GPA", OBSERVABLE),
            VariableSpec("LSAT", OBSERVABLE),
            VariableSpec("FYA", OUTCOME),
        ),
        edges=(
            ("R", "GPA"), ("S", "GPA"), ("R", "LSAT"), ("S", "LSAT"),
            ("R", "FYA"), ("S", "FYA"), ("GPA", "FYA"), ("LSAT", "FYA"),
        ),
    )
    return FittedScm(
        graph=graph,
        equations={
            "GPA": StructuralEquation("GPA", 3.0, {"R=1": -0.4, "S=1": 0.1}, 0.4),
            "LSAT": StructuralEquation("LSAT", 35.0, {"R=1": -5.0, "S=1": -1.0}, 4.0),
            "FYA": StructuralEquation(
                "FYA", -5.0, {"R=1": -0.3, "S=1": 0.0, "GPA": 0.8, "LSAT": 0.08}, 0.5
            ),
        },
    )


def law_school_population(n: int, seed: int = 0) -> list[Individual]:
    return sample_population(
        GeneratorConfig(scm=law_school_scm(), n=n, seed=seed, protected_marginals=LAW_MARGINALS)
    )


JOB_DECISIONS = ("Satellite", "London")
JOB_THRESHOLD = 0.0


def job_location_scm() -> FittedScm:
    """Office allocation: ``race`` shifts both appraisal features and suitability.

    performance = 3.0 - 0.5*race + eps_P,  eps_P ~ N(0, 0.6^2)
    tenure      = 4.0 - 1.0*race + eps_T,  eps_T ~ N(0, 1.5^2)
    suitability = -3.5 + 0.8*performance + 0.25*tenure - 0.2*race + eps_S,  eps_S ~ N(0, 0.4^2)

    Suitability >= 0 maps to London.
    """
    graph = CausalGraph(
        variables=(
            VariableSpec("race", PROTECTED, CATEGORICAL, ("a", "b")),
            VariableSpec("performance", OBSERVABLE),
            VariableSpec("tenure", OBSERVABLE),
            VariableSpec("suitability", OUTCOME),
        ),
        edges=(
            ("race", "performance"), ("race", "tenure"), ("race", "suitability"),
            ("performance", "suitability"), ("tenure", "suitability"),
        ),
    )
    return FittedScm(
        graph=graph,
        equations={
            "performance": StructuralEquation("performance", 3.0, {"race=b": -0.5}, 0.6),
            "tenure": StructuralEquation("tenure", 4.0, {"race=b": -1.0}, 1.5),
            "suitability": StructuralEquation(
                "suitability", -3.5,
                {"race=b": -0.2, "performance": 0.8, "tenure": 0.25}, 0.4,
            ),
        },
    )


def job_location_population(n: int = 300, seed: int = 11) -> list[Individual]:
    """Staff sample plus the two named employees P (strong record) and Q (weak record)."""
    staff = sample_population(
        GeneratorConfig(scm=job_location_scm(), n=n, seed=seed,
                        protected_marginals={"race": [0.6, 0.4]}, id_prefix="E")
    )
    named = [
        Individual("P", {"race": "a"}, (Snapshot(0, {"performance": 4.2, "tenure": 6.0}),), 1.3),
        Individual("Q", {"race": "b"}, (Snapshot(0, {"performance": 1.6, "tenure": 1.5}),), -1.6),
    ]
    return staff + named


def random_linear_scm(rng: np.random.Generator, max_nodes: int = 6) -> FittedScm:
    """A random DAG: 1-2 binary protected roots, observables, one outcome leaf."""
    n_protected = int(rng.integers(1, 3))
    n_obs = int(rng.integers(1, max(2, max_nodes - n_protected - 1) + 1))
    n_obs = min(n_obs, max_nodes - n_protected - 1)
    variables = [VariableSpec(f"A{k}", PROTECTED, CATEGORICAL, BINARY) for k in range(n_protected)]
    variables += [VariableSpec(f"X{k}", OBSERVABLE) for k in range(n_obs)]
    variables.append(VariableSpec("Y", OUTCOME))
    edges = []
    for k in range(n_obs):
        earlier = [f"A{a}" for a in range(n_protected)] + [f"X{m}" for m in range(k)]
        for p in earlier:
            if rng.random() < 0.6:
                edges.append((p, f"X{k}"))
    for k in range(n_obs):
        if rng.random() < 0.7:
            edges.append((f"X{k}", "Y"))
    graph = CausalGraph(tuple(variables), tuple(edges))
    equations = {}
    for k in range(n_obs):
        child = f"X{k}"
        weights = {f: float(rng.normal(0, 1.5)) for f in graph.parent_features(child)}
        equations[child] = StructuralEquation(
            child, float(rng.normal(0, 1)), weights, float(rng.uniform(0.2, 1.0))
        )
    return FittedScm(graph=graph, equations=equations)


def uniform_marginals(graph: CausalGraph) -> dict[str, list[float]]:
    return {
        p: [1.0 / len(graph.variable(p).levels)] * len(graph.variable(p).levels)
        for p in graph.protected
    }
