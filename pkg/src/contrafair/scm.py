"""Causal graphs and linear additive-noise structural causal models.

Every non-protected variable ``V`` is modelled as

    V = intercept + sum(weight[f] * f(parents)) + residual

where the features ``f`` are the raw values of continuous parents and one-hot
indicators (reference level dropped) of categorical parents.  Counterfactuals
are computed by abduction (residuals from the factual world), action
(overwrite protected values) and prediction (recompute descendants in
topological order).
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ContinuousProtectedUnenumerable,
    CycleDetected,
    DanglingEdge,
    EmptyRoles,
    GraphError,
    InsufficientData,
    MissingValue,
    ProtectedHasParent,
    SingularDesign,
    UnknownProtected,
)

PROTECTED = "protected"
OBSERVABLE = "observable"
OUTCOME = "outcome"
ROLES = (PROTECTED, OBSERVABLE, OUTCOME)

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

# '=' and brackets are reserved for encoded feature names ("R=1", "eps[GPA]")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")

CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class VariableSpec:
    name: str
    role: str
    domain: str = CONTINUOUS
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise GraphError(f"invalid variable name {self.name!r}")
        if self.role not in ROLES:
            raise GraphError(f"variable {self.name!r}: unknown role {self.role!r}")
        if self.domain not in (CONTINUOUS, CATEGORICAL):
            raise GraphError(f"variable {self.name!r}: unknown domain {self.domain!r}")
        levels = tuple(str(lvl) for lvl in self.levels)
        object.__setattr__(self, "levels", levels)
        if self.domain == CATEGORICAL:
            if len(levels) < 2 or len(set(levels)) != len(levels):
                raise GraphError(
                    f"categorical variable {self.name!r} needs >= 2 distinct levels"
                )
        elif levels:
            raise GraphError(f"continuous variable {self.name!r} cannot declare levels")

    @property
    def categorical(self) -> bool:
        return self.domain == CATEGORICAL

    def feature_names(self) -> list[str]:
        if self.categorical:
            return [f"{self.name}={lvl}" for lvl in self.levels[1:]]
        return [self.name]

    def normalize(self, value):
        """Coerce ``value`` into this variable's domain or raise ValueError."""
        if self.categorical:
            label = str(value)
            if label not in self.levels:
                raise ValueError(
                    f"value {value!r} is not a level of {self.name!r} {list(self.levels)}"
                )
            return label
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise ValueError(f"value {value!r} of {self.name!r} is not a number") from None
        if not math.isfinite(out):
            raise ValueError(f"value {value!r} of {self.name!r} is not finite")
        return out

    def encode(self, value) -> list[float]:
        if self.categorical:
            label = str(value)
            return [1.0 if label == lvl else 0.0 for lvl in self.levels[1:]]
        return [float(value)]


@dataclass(frozen=True)
class CausalGraph:
    variables: tuple[VariableSpec, ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def variable(self, name: str) -> VariableSpec:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(v.name == name for v in self.variables)

    def _role(self, role: str) -> list[str]:
        return [v.name for v in self.variables if v.role == role]

    @property
    def protected(self) -> list[str]:
        return self._role(PROTECTED)

    @property
    def observables(self) -> list[str]:
        return self._role(OBSERVABLE)

    @property
    def outcomes(self) -> list[str]:
        return self._role(OUTCOME)

    def parents(self, name: str) -> list[str]:
        """Parents of ``name`` in variable-declaration order (not edge order)."""
        ps = {p for p, c in self.edges if c == name}
        return [v for v in self.names if v in ps]

    def children(self, name: str) -> list[str]:
        cs = {c for p, c in self.edges if p == name}
        return [v for v in self.names if v in cs]

    def parent_features(self, name: str) -> list[str]:
        out = []
        for p in self.parents(name):
            out.extend(self.variable(p).feature_names())
        return out

    def encode_parents(self, name: str, values: Mapping[str, Any]) -> list[float]:
        out = []
        for p in self.parents(name):
            if p not in values or values[p] is None:
                raise MissingValue(p)
            out.extend(self.variable(p).encode(values[p]))
        return out

    def topological_order(self) -> list[str]:
        """Kahn ordering, ties broken by declaration order."""
        names = self.names
        indeg = {n: 0 for n in names}
        for _, c in self.edges:
            indeg[c] += 1
        ready = [n for n in names if indeg[n] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in self.children(n):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort(key=names.index)
        if len(order) != len(names):
            raise CycleDetected(self._cycle_edge(set(names) - set(order)))
        return order

    def _cycle_edge(self, remaining: set[str]) -> tuple[str, str]:
        adj = {n: [c for p, c in self.edges if p == n and c in remaining] for n in remaining}
        state: dict[str, int] = {}

        def visit(n):
            state[n] = 1
            for c in adj[n]:
                if state.get(c) == 1:
                    return (n, c)
                if c not in state:
                    found = visit(c)
                    if found:
                        return found
            state[n] = 2
            return None

        for n in sorted(remaining):
            if n not in state:
                found = visit(n)
                if found:
                    return found
        raise AssertionError("unreachable: remaining nodes without a cycle")


def validate_graph(graph: CausalGraph) -> None:
    """Raise if ``graph`` violates any structural invariant."""
    names = graph.names
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise GraphError(f"duplicate variable name {dup!r}")
    declared = set(names)
    for p, c in graph.edges:
        for end in (p, c):
            if end not in declared:
                raise DanglingEdge(f"edge {p} -> {c} names undeclared variable {end!r}")
    for p, c in graph.edges:
        if graph.variable(c).role == PROTECTED:
            raise ProtectedHasParent(f"protected variable {c!r} has parent {p!r}")
        if graph.variable(p).role == OUTCOME:
            raise GraphError(f"outcome variable {p!r} has child {c!r}")
    for v in graph.variables:
        if v.role == OBSERVABLE and v.categorical:
            raise GraphError(f"observable {v.name!r} must be continuous in a linear SCM")
    graph.topological_order()
    if not graph.protected or not graph.outcomes:
        raise EmptyRoles("graph needs at least one protected and one outcome variable")


@dataclass(frozen=True)
class StructuralEquation:
    child: str
    intercept: float
    weights: dict[str, float]
    noise_std: float = 0.0

    def __post_init__(self):
        if not self.noise_std >= 0:
            raise ValueError(f"equation {self.child!r}: noise_std must be >= 0")

    def mean(self, features: Sequence[float], names: Sequence[str]) -> float:
        total = self.intercept
        for name, x in zip(names, features):
            total += self.weights[name] * x
        return total


@dataclass(frozen=True)
class Snapshot:
    time: int
    observables: dict[str, float]


@dataclass(frozen=True)
class Individual:
    id: str
    protected: dict[str, Any]
    snapshots: tuple[Snapshot, ...]
    outcome: Any = None

    def __post_init__(self):
        object.__setattr__(self, "snapshots", tuple(self.snapshots))
        if not self.snapshots:
            raise ValueError(f"individual {self.id!r} has no snapshots")
        times = [s.time for s in self.snapshots]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"individual {self.id!r}: snapshot times must strictly increase")
        keys = set(self.snapshots[0].observables)
        if any(set(s.observables) != keys for s in self.snapshots[1:]):
            raise ValueError(f"individual {self.id!r}: snapshots disagree on observables")

    def snapshot(self, index: int = -1) -> Snapshot:
        try:
            return self.snapshots[index]
        except IndexError:
            raise IndexError(f"individual {self.id!r} has no snapshot {index}") from None

    def index_of(self, time: int) -> int:
        for i, s in enumerate(self.snapshots):
            if s.time == time:
                return i
        raise KeyError(time)

    def values(self, index: int = -1) -> dict[str, Any]:
        out = dict(self.protected)
        out.update(self.snapshot(index).observables)
        return out


@dataclass(frozen=True)
class LatentAssignment:
    residuals: dict[str, float]


@dataclass(frozen=True)
class Intervention:
    assignments: dict[str, Any]


@dataclass(frozen=True)
class FittedScm:
    graph: CausalGraph
    equations: dict[str, StructuralEquation]
    fit_stats: dict[str, dict[str, float]] = field(default_factory=dict)
    order: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        missing = [o for o in self.graph.observables if o not in self.equations]
        if missing:
            raise ValueError(f"no structural equation for observables {missing}")
        for child, eq in self.equations.items():
            expected = set(self.graph.parent_features(child))
            if set(eq.weights) != expected:
                raise ValueError(
                    f"equation {child!r}: weight keys {sorted(eq.weights)} "
                    f"do not match parent features {sorted(expected)}"
                )
        topo = self.graph.topological_order()
        object.__setattr__(
            self, "order", tuple(n for n in topo if n in self.graph.observables)
        )
        plan = {}
        for child in self.equations:
            parents = self.graph.parents(child)
            plan[child] = (
                tuple((p, self.graph.variable(p)) for p in parents),
                tuple(self.graph.parent_features(child)),
            )
        object.__setattr__(self, "_plan", plan)

    def outcome_equation(self, name: str | None = None) -> StructuralEquation | None:
        name = name or self.graph.outcomes[0]
        return self.equations.get(name)

    def predict_child(self, child: str, values: Mapping[str, Any]) -> float:
        """Noise-free structural mean of ``child`` given its parents' values."""
        parents, names = self._plan[child]
        features = []
        for name, spec in parents:
            if values.get(name) is None:
                raise MissingValue(name)
            features.extend(spec.encode(values[name]))
        return self.equations[child].mean(features, names)


def _solve_ols(child: str, design: np.ndarray, target: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(design, axis=0)
    if np.any(norms == 0):
        raise SingularDesign(child, math.inf)
    scaled = design / norms
    gram = scaled.T @ scaled
    cond = float(np.linalg.cond(gram))
    if not math.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularDesign(child, cond)
    # LAPACK gesv: LU with partial pivoting
    beta = np.linalg.solve(gram, scaled.T @ target)
    return beta / norms


def fit_scm(graph: CausalGraph, dataset: Sequence[Individual], fit_outcome: bool = True) -> FittedScm:
    """Fit every observable (and a continuous outcome) by ordinary least squares.

    Observable equations use every snapshot of every individual as a sample.
    The outcome equation pairs each individual's outcome with its latest
    snapshot and is only fitted when all outcomes are present.
    """
    validate_graph(graph)
    if not dataset:
        raise InsufficientData("dataset is empty")

    rows: list[dict] = []
    for ind in dataset:
        for k in range(len(ind.snapshots)):
            rows.append(ind.values(k))

    targets = [(child, rows) for child in graph.topological_order() if child in graph.observables]
    if fit_outcome:
        for out in graph.outcomes:
            spec = graph.variable(out)
            if spec.categorical or any(ind.outcome is None for ind in dataset):
                continue
            out_rows = []
            for ind in dataset:
                vals = ind.values(-1)
                vals[out] = ind.outcome
                out_rows.append(vals)
            targets.append((out, out_rows))

    equations = {}
    stats = {}
    for child, data in targets:
        names = graph.parent_features(child)
        p = len(names) + 1
        n = len(data)
        if n <= p:
            raise InsufficientData(
                f"equation {child!r} has {p} coefficients but only {n} samples"
            )
        design = np.empty((n, p))
        target = np.empty(n)
        for r, vals in enumerate(data):
            if child not in vals or vals[child] is None:
                raise MissingValue(child)
            design[r, 0] = 1.0
            design[r, 1:] = graph.encode_parents(child, vals)
            target[r] = float(vals[child])
        beta = _solve_ols(child, design, target)
        resid = target - design @ beta
        equations[child] = StructuralEquation(
            child=child,
            intercept=float(beta[0]),
            weights={name: float(w) for name, w in zip(names, beta[1:])},
            noise_std=float(np.std(resid)),
        )
        stats[child] = {"residual_variance": float(np.var(resid)), "n": n}
    return FittedScm(graph=graph, equations=equations, fit_stats=stats)


def _factual_values(scm: FittedScm, individual: Individual, snapshot_index: int) -> dict:
    snap = individual.snapshot(snapshot_index)
    vals = {}
    for name in scm.graph.protected:
        if individual.protected.get(name) is None:
            raise MissingValue(name, individual.id)
        vals[name] = scm.graph.variable(name).normalize(individual.protected[name])
    for name in scm.order:
        if snap.observables.get(name) is None:
            raise MissingValue(name, individual.id)
        vals[name] = snap.observables[name]
    return vals


def abduct(scm: FittedScm, individual: Individual, snapshot_index: int = -1) -> LatentAssignment:
    """Point-identify every observable's residual from the factual world."""
    vals = _factual_values(scm, individual, snapshot_index)
    return LatentAssignment(
        residuals={c: float(vals[c]) - scm.predict_child(c, vals) for c in scm.order}
    )


def _intervened_protected(scm: FittedScm, individual: Individual, intervention: Intervention) -> dict:
    out = {
        name: scm.graph.variable(name).normalize(individual.protected[name])
        for name in scm.graph.protected
    }
    for name, value in intervention.assignments.items():
        if name not in out:
            raise UnknownProtected(f"{name!r} is not a protected variable of the graph")
        out[name] = scm.graph.variable(name).normalize(value)
    return out


def counterfactual(
    scm: FittedScm,
    individual: Individual,
    snapshot_index: int,
    intervention: Intervention,
    latent: LatentAssignment | None = None,
) -> Snapshot:
    """Abduction, action, prediction for one snapshot of one individual."""
    factual = _factual_values(scm, individual, snapshot_index)
    if latent is None:
        latent = abduct(scm, individual, snapshot_index)
    world = dict(factual)
    world.update(_intervened_protected(scm, individual, intervention))
    changed = {n for n in scm.graph.protected if world[n] != factual[n]}
    for child in scm.order:
        # untouched ancestry keeps the factual value bit-for-bit
        if changed.isdisjoint(scm.graph.parents(child)):
            continue
        world[child] = scm.predict_child(child, world) + latent.residuals[child]
        changed.add(child)
    snap = individual.snapshot(snapshot_index)
    return Snapshot(time=snap.time, observables={k: world[k] for k in snap.observables})


def enumerate_interventions(
    graph: CausalGraph, grid: Mapping[str, Iterable] | None = None
) -> list[Intervention]:
    """Cartesian product of all protected levels (continuous ones need ``grid``)."""
    grid = grid or {}
    axes = []
    names = graph.protected
    for name in names:
        spec = graph.variable(name)
        if name in grid:
            axes.append([spec.normalize(v) for v in grid[name]])
        elif spec.categorical:
            axes.append(list(spec.levels))
        else:
            raise ContinuousProtectedUnenumerable(
                f"protected variable {name!r} is continuous; supply a grid of values"
            )
    return [Intervention(dict(zip(names, combo))) for combo in itertools.product(*axes)]


# -- serialization ---------------------------------------------------------


def graph_to_dict(graph: CausalGraph) -> dict:
    variables = []
    for v in graph.variables:
        entry = {"name": v.name, "role": v.role, "domain": v.domain}
        if v.categorical:
            entry["levels"] = list(v.levels)
        variables.append(entry)
    return {"variables": variables, "edges": [list(e) for e in graph.edges]}


def graph_from_dict(doc: Mapping) -> CausalGraph:
    try:
        variables = tuple(
            VariableSpec(
                name=v["name"],
                role=v["role"],
                domain=v.get("domain", CONTINUOUS),
                levels=tuple(v.get("levels", ())),
            )
            for v in doc["variables"]
        )
        edges = tuple((str(p), str(c)) for p, c in doc["edges"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GraphError):
            raise
        raise GraphError(f"malformed graph spec: {exc}") from exc
    return CausalGraph(variables=variables, edges=edges)


def scm_to_dict(scm: FittedScm) -> dict:
    doc = graph_to_dict(scm.graph)
    doc["equations"] = {
        child: {
            "intercept": eq.intercept,
            "weights": dict(eq.weights),
            "noise_std": eq.noise_std,
        }
        for child, eq in scm.equations.items()
    }
    return doc


def scm_from_dict(doc: Mapping) -> FittedScm:
    graph = graph_from_dict(doc)
    validate_graph(graph)
    if "equations" not in doc:
        raise GraphError("model file has no 'equations' key")
    equations = {
        child: StructuralEquation(
            child=child,
            intercept=float(e["intercept"]),
            weights={k: float(w) for k, w in e["weights"].items()},
            noise_std=float(e.get("noise_std", 0.0)),
        )
        for child, e in doc["equations"].items()
    }
    return FittedScm(graph=graph, equations=equations)


def dumps(doc: Mapping) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_graph(path: str | Path) -> CausalGraph:
    graph = graph_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    validate_graph(graph)
    return graph


def load_scm(path: str | Path) -> FittedScm:
    return scm_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_scm(scm: FittedScm, path: str | Path) -> None:
    Path(path).write_text(dumps(scm_to_dict(scm)), encoding="utf-8")
