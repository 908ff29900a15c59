"""Fairness criteria evaluated as verdicts with observed margins.

Equality-type clauses pass when the worst observed score gap is within
``eps_fair``; ordering clauses pass when the observed gap strictly exceeds
``delta_order`` (so ties fail).  Every clause is labelled with the equation it
checks ("eq1" .. "eq14") or with the population criterion name.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import predictors as P
from .errors import (
    EmptyConditionedGroup,
    EmptyGroup,
    SameDecision,
    SameIndividual,
    UnknownSnapshot,
)
from .predictors import Predictor, ScoreVector
from .scm import FittedScm, Individual, Intervention, enumerate_interventions

COUNTERFACTUAL_FAIRNESS = "counterfactual_fairness"
D_CONTRAST = "d_contrast"
I_CONTRAST = "i_contrast"
T_CONTRAST = "t_contrast"
CONTRAST_MARGIN = "contrast_margin"
DEMOGRAPHIC_PARITY = "demographic_parity"
EQUALITY_OF_OPPORTUNITY = "equality_of_opportunity"
INDIVIDUAL_FAIRNESS = "individual_fairness"

POPULATION_EPS = 0.02


@dataclass(frozen=True)
class Tolerance:
    eps_fair: float = 1e-6
    delta_order: float = 0.0
    lambda_margin: float = 0.05
    strict_margin: bool = False

    def __post_init__(self):
        if min(self.eps_fair, self.delta_order, self.lambda_margin) < 0:
            raise ValueError("tolerances must be nonnegative")

    @classmethod
    def population(cls, **overrides) -> "Tolerance":
        return cls(**{"eps_fair": POPULATION_EPS, **overrides})


@dataclass(frozen=True)
class Clause:
    equation: str
    passed: bool
    lhs: float | None
    rhs: float | None
    margin: float
    intervention: dict[str, Any] | None = None
    decision: str | None = None
    subject: str | None = None
    time: int | None = None
    advisory: bool = False

    def to_dict(self) -> dict:
        return {
            "equation": self.equation,
            "passed": self.passed,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "intervention": self.intervention,
            "decision": self.decision,
            "subject": self.subject,
            "time": self.time,
            "advisory": self.advisory,
        }


def _clause_key(c: Clause):
    m = re.fullmatch(r"eq(\d+)", c.equation)
    return (0, int(m.group(1)), "") if m else (1, 0, c.equation), c.subject or "", c.time or 0


@dataclass(frozen=True)
class Verdict:
    criterion: str
    passed: bool
    clauses: tuple[Clause, ...]
    subjects: dict[str, Any] = field(default_factory=dict)
    predictor: str | None = None

    @classmethod
    def build(cls, criterion, clauses: Iterable[Clause], subjects, predictor=None) -> "Verdict":
        clauses = tuple(sorted(clauses, key=_clause_key))
        passed = all(c.passed for c in clauses if not c.advisory)
        return cls(criterion, passed, clauses, subjects, predictor)

    def clause(self, equation: str) -> Clause:
        for c in self.clauses:
            if c.equation == equation:
                return c
        raise KeyError(equation)

    @property
    def failing(self) -> list[str]:
        return [c.equation for c in self.clauses if not c.passed and not c.advisory]

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "predictor": self.predictor,
            "passed": self.passed,
            "clauses": [c.to_dict() for c in self.clauses],
            "subjects": self.subjects,
        }


# -- helpers -----------------------------------------------------------------


def _decisions_pair(predictor: Predictor, d: str, d_prime: str) -> None:
    if d == d_prime:
        raise SameDecision(f"decisions must differ, got {d!r} twice")
    for x in (d, d_prime):
        if x not in predictor.decision_space:
            raise ValueError(f"{x!r} is not in the decision space {predictor.decision_space.decisions}")


def _assignment(scm: FittedScm, individual: Individual) -> Intervention:
    return Intervention({k: individual.protected[k] for k in scm.graph.protected})


def _plain(iv: Intervention) -> dict[str, Any]:
    return {k: (v if isinstance(v, (int, float, str)) else str(v)) for k, v in iv.assignments.items()}


def _snapshot_index(individual: Individual, time: int) -> int:
    try:
        return individual.index_of(time)
    except KeyError:
        raise UnknownSnapshot(f"individual {individual.id!r} has no snapshot at time {time}") from None


def _fairness_clause(
    equation: str,
    predictor: Predictor,
    scm: FittedScm,
    individual: Individual,
    snapshot_index: int,
    decisions: Sequence[str],
    interventions: Sequence[Intervention],
    tol: Tolerance,
) -> Clause:
    """Worst |score(A<-a') - score(A<-a)| over the given decisions and interventions."""
    factual = P.predict(predictor, scm, individual, snapshot_index)
    worst = None
    for iv in interventions:
        cf = P.counterfactual_score(predictor, scm, individual, snapshot_index, iv)
        for d in decisions:
            gap = abs(cf[d] - factual[d])
            if worst is None or gap > worst[0]:
                worst = (gap, d, iv, cf[d])
    gap, d, iv, cf_d = worst
    return Clause(
        equation=equation,
        passed=gap <= tol.eps_fair,
        lhs=factual[d],
        rhs=cf_d,
        margin=gap,
        intervention=_plain(iv),
        decision=d,
        subject=individual.id,
        time=individual.snapshot(snapshot_index).time,
    )


def _order_clause(equation, scores: ScoreVector, hi: str, lo: str, tol: Tolerance, **info) -> Clause:
    gap = scores[hi] - scores[lo]
    return Clause(
        equation=equation,
        passed=gap > tol.delta_order,
        lhs=scores[hi],
        rhs=scores[lo],
        margin=gap,
        decision=hi,
        **info,
    )


# -- individual criteria -----------------------------------------------------


def check_counterfactual_fairness(
    predictor: Predictor,
    scm: FittedScm,
    individual: Individual,
    tol: Tolerance | None = None,
    *,
    snapshot_index: int = -1,
    decisions: Sequence[str] | None = None,
    grid: Mapping[str, Iterable] | None = None,
) -> Verdict:
    """Scores must not move under any protected intervention, for every decision."""
    tol = tol or Tolerance()
    decisions = list(decisions or predictor.decision_space.decisions)
    interventions = enumerate_interventions(scm.graph, grid)
    clause = _fairness_clause(
        "eq1", predictor, scm, individual, snapshot_index, decisions, interventions, tol
    )
    return Verdict.build(
        COUNTERFACTUAL_FAIRNESS,
        [clause],
        {
            "individuals": [individual.id],
            "decisions": decisions,
            "interventions": [_plain(iv) for iv in interventions],
        },
        predictor.family,
    )


def check_d_contrast(
    predictor: Predictor,
    scm: FittedScm,
    individual: Individual,
    d: str,
    d_prime: str,
    tol: Tolerance | None = None,
    *,
    snapshot_index: int = -1,
    grid=None,
) -> Verdict:
    """Is taking ``d`` rather than ``d_prime`` for this individual fair and justified?"""
    tol = tol or Tolerance()
    _decisions_pair(predictor, d, d_prime)
    interventions = enumerate_interventions(scm.graph, grid)
    fair = _fairness_clause(
        "eq2", predictor, scm, individual, snapshot_index, [d, d_prime], interventions, tol
    )
    scores = P.predict(predictor, scm, individual, snapshot_index)
    order = _order_clause("eq3", scores, d, d_prime, tol, subject=individual.id)
    return Verdict.build(
        D_CONTRAST,
        [fair, order],
        {"individuals": [individual.id], "decisions": [d, d_prime],
         "interventions": [_plain(iv) for iv in interventions]},
        predictor.family,
    )


def check_i_contrast(
    predictor: Predictor,
    scm: FittedScm,
    individual_i: Individual,
    individual_j: Individual,
    d: str,
    d_prime: str,
    tol: Tolerance | None = None,
    *,
    snapshot_index: int = -1,
    grid=None,
) -> Verdict:
    """Is giving ``d`` to i and ``d_prime`` to j fair?

    The swapped-protected clauses (eq8, eq9) are read as strict ``>``
    comparisons, mirroring eq6 and eq7.
    """
    tol = tol or Tolerance()
    if individual_i.id == individual_j.id:
        raise SameIndividual(f"i-contrast needs two individuals, got {individual_i.id!r} twice")
    _decisions_pair(predictor, d, d_prime)
    interventions = enumerate_interventions(scm.graph, grid)
    space = list(predictor.decision_space.decisions)
    a_i, a_j = _assignment(scm, individual_i), _assignment(scm, individual_j)
    si = P.predict(predictor, scm, individual_i, snapshot_index)
    sj = P.predict(predictor, scm, individual_j, snapshot_index)
    swapped_i = P.counterfactual_score(predictor, scm, individual_i, snapshot_index, a_j)
    swapped_j = P.counterfactual_score(predictor, scm, individual_j, snapshot_index, a_i)
    clauses = [
        _fairness_clause("eq4", predictor, scm, individual_i, snapshot_index, space, interventions, tol),
        _fairness_clause("eq5", predictor, scm, individual_j, snapshot_index, space, interventions, tol),
        _order_clause("eq6", si, d, d_prime, tol, subject=individual_i.id),
        _order_clause("eq7", sj, d_prime, d, tol, subject=individual_j.id),
        _order_clause("eq8", swapped_i, d, d_prime, tol, subject=individual_i.id,
                      intervention=_plain(a_j)),
        _order_clause("eq9", swapped_j, d_prime, d, tol, subject=individual_j.id,
                      intervention=_plain(a_i)),
    ]
    return Verdict.build(
        I_CONTRAST,
        clauses,
        {"individuals": [individual_i.id, individual_j.id], "decisions": [d, d_prime],
         "interventions": [_plain(iv) for iv in interventions]},
        predictor.family,
    )


def check_t_contrast(
    predictor: Predictor,
    scm: FittedScm,
    individual: Individual,
    t: int,
    t_prime: int,
    d: str,
    d_prime: str,
    tol: Tolerance | None = None,
    *,
    grid=None,
) -> Verdict:
    """Is the switch from ``d`` at tick ``t`` to ``d_prime`` at ``t_prime`` fair?"""
    tol = tol or Tolerance()
    _decisions_pair(predictor, d, d_prime)
    k, k_prime = _snapshot_index(individual, t), _snapshot_index(individual, t_prime)
    interventions = enumerate_interventions(scm.graph, grid)
    space = list(predictor.decision_space.decisions)
    per_tick = [
        _fairness_clause("eq10", predictor, scm, individual, idx, space, interventions, tol)
        for idx in range(len(individual.snapshots))
    ]
    # one eq10 clause: the worst tick
    fair = max(per_tick, key=lambda c: c.margin)
    before = P.predict(predictor, scm, individual, k)
    after = P.predict(predictor, scm, individual, k_prime)
    clauses = [
        fair,
        _order_clause("eq11", before, d, d_prime, tol, subject=individual.id, time=t),
        _order_clause("eq12", after, d_prime, d, tol, subject=individual.id, time=t_prime),
    ]
    return Verdict.build(
        T_CONTRAST,
        clauses,
        {"individuals": [individual.id], "decisions": [d, d_prime], "times": [t, t_prime],
         "interventions": [_plain(iv) for iv in interventions]},
        predictor.family,
    )


def check_contrast_margin(
    predictor: Predictor,
    scm: FittedScm,
    individual_i: Individual,
    individual_j: Individual,
    d: str,
    d_prime: str,
    tol: Tolerance | None = None,
    *,
    snapshot_index: int = -1,
) -> Verdict:
    """Does i outscore j on ``d`` by more than ``lambda_margin`` under shared protected values?

    Each of the two protected assignments {a_i, a_j} is imposed on both
    individuals.  The mirrored condition on ``d_prime`` (eq14) is advisory
    unless ``tol.strict_margin`` is set.
    """
    tol = tol or Tolerance()
    if individual_i.id == individual_j.id:
        raise SameIndividual(f"margin check needs two individuals, got {individual_i.id!r} twice")
    _decisions_pair(predictor, d, d_prime)
    shared = []
    for iv in (_assignment(scm, individual_i), _assignment(scm, individual_j)):
        labels = {k: str(v) for k, v in iv.assignments.items()}
        if all(labels != {k: str(v) for k, v in s.assignments.items()} for s in shared):
            shared.append(iv)
    lam = tol.lambda_margin
    clauses = []
    for iv in shared:
        si = P.counterfactual_score(predictor, scm, individual_i, snapshot_index, iv)
        sj = P.counterfactual_score(predictor, scm, individual_j, snapshot_index, iv)
        gap_d = si[d] - sj[d]
        clauses.append(Clause("eq13", gap_d > lam, si[d], sj[d], gap_d, _plain(iv), d,
                              f"{individual_i.id},{individual_j.id}"))
        gap_dp = sj[d_prime] - si[d_prime]
        clauses.append(Clause("eq14", gap_dp > lam, sj[d_prime], si[d_prime], gap_dp, _plain(iv),
                              d_prime, f"{individual_j.id},{individual_i.id}",
                              advisory=not tol.strict_margin))
    return Verdict.build(
        CONTRAST_MARGIN,
        clauses,
        {"individuals": [individual_i.id, individual_j.id], "decisions": [d, d_prime],
         "interventions": [_plain(iv) for iv in shared], "lambda": lam},
        predictor.family,
    )


# -- population criteria ---------------------------------------------------------


def _group_levels(scm: FittedScm | None, group_attr: str, groups) -> tuple[str, str]:
    if groups is not None:
        g = tuple(str(x) for x in groups)
    else:
        if scm is None:
            raise ValueError("group levels are unknown without an SCM; pass groups=")
        spec = scm.graph.variable(group_attr)
        if spec.role != "protected":
            raise ValueError(f"{group_attr!r} is not a protected variable")
        if not spec.categorical or len(spec.levels) != 2:
            raise ValueError(f"{group_attr!r} is not binary; pass groups=(level_a, level_b)")
        g = spec.levels
    if len(g) != 2 or g[0] == g[1]:
        raise ValueError("exactly two distinct groups are required")
    return g


def _group_gap(
    criterion, predictor, scm, rows, group_attr, groups, tol, empty_error, snapshot_index
) -> Verdict:
    members = {g: [] for g in groups}
    for ind in rows:
        key = str(ind.protected.get(group_attr))
        if key in members:
            members[key].append(P.predict(predictor, scm, ind, snapshot_index))
    for g, scores in members.items():
        if not scores:
            raise empty_error(f"group {group_attr}={g} has no individuals")
    worst = None
    for d in predictor.decision_space.decisions:
        m0 = math.fsum(s[d] for s in members[groups[0]]) / len(members[groups[0]])
        m1 = math.fsum(s[d] for s in members[groups[1]]) / len(members[groups[1]])
        if worst is None or abs(m0 - m1) > worst[0]:
            worst = (abs(m0 - m1), d, m0, m1)
    gap, d, m0, m1 = worst
    clause = Clause(criterion, gap <= tol.eps_fair, m0, m1, gap, decision=d)
    return Verdict.build(
        criterion,
        [clause],
        {"group_attr": group_attr, "groups": list(groups),
         "counts": [len(members[g]) for g in groups]},
        predictor.family,
    )


def check_demographic_parity(
    predictor: Predictor,
    scm: FittedScm | None,
    dataset: Sequence[Individual],
    group_attr: str,
    tol: Tolerance | None = None,
    *,
    groups=None,
    snapshot_index: int = -1,
) -> Verdict:
    tol = tol or Tolerance.population()
    g = _group_levels(scm, group_attr, groups)
    return _group_gap(DEMOGRAPHIC_PARITY, predictor, scm, dataset, group_attr, g, tol,
                      EmptyGroup, snapshot_index)


def check_equality_of_opportunity(
    predictor: Predictor,
    scm: FittedScm | None,
    dataset: Sequence[Individual],
    group_attr: str,
    favorable_outcome: str,
    tol: Tolerance | None = None,
    *,
    threshold: float | None = None,
    groups=None,
    snapshot_index: int = -1,
) -> Verdict:
    """Demographic parity restricted to individuals whose outcome is favorable."""
    tol = tol or Tolerance.population()
    g = _group_levels(scm, group_attr, groups)
    space = predictor.decision_space
    qualified = [
        ind for ind in dataset
        if ind.outcome is not None
        and P.outcome_label(ind.outcome, space, threshold) == str(favorable_outcome)
    ]
    return _group_gap(EQUALITY_OF_OPPORTUNITY, predictor, scm, qualified, group_attr, g, tol,
                      EmptyConditionedGroup, snapshot_index)


def euclidean(a: Mapping[str, float], b: Mapping[str, float]) -> float:
    return math.sqrt(sum((float(a[k]) - float(b[k])) ** 2 for k in a))


def check_individual_fairness(
    predictor: Predictor,
    scm: FittedScm | None,
    dataset: Sequence[Individual],
    metric: Callable[[Mapping[str, float], Mapping[str, float]], float],
    pair_threshold: float,
    score_threshold: float,
    *,
    snapshot_index: int = -1,
) -> Verdict:
    """Individuals closer than ``pair_threshold`` must score within ``score_threshold``.

    ``metric`` receives the two individuals' observable maps.
    """
    if pair_threshold < 0 or score_threshold < 0:
        raise ValueError("thresholds must be nonnegative")
    scores = [P.predict(predictor, scm, ind, snapshot_index) for ind in dataset]
    worst = None
    pairs = 0
    for (a, sa), (b, sb) in itertools.combinations(zip(dataset, scores), 2):
        dist = metric(a.snapshot(snapshot_index).observables, b.snapshot(snapshot_index).observables)
        if not dist < pair_threshold:
            continue
        pairs += 1
        gap, d = sa.max_abs_diff(sb)
        if worst is None or gap > worst[0]:
            worst = (gap, d, a, b, sa, sb)
    if worst is None:
        clause = Clause(INDIVIDUAL_FAIRNESS, True, None, None, 0.0)
    else:
        gap, d, a, b, sa, sb = worst
        clause = Clause(INDIVIDUAL_FAIRNESS, gap <= score_threshold, sa[d], sb[d], gap,
                        decision=d, subject=f"{a.id},{b.id}")
    return Verdict.build(
        INDIVIDUAL_FAIRNESS,
        [clause],
        {"pairs_examined": pairs, "pair_threshold": pair_threshold,
         "score_threshold": score_threshold},
        predictor.family,
    )
