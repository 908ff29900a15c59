"""Audit pipeline: fit the SCM, obtain predictors, score a held-out split, run criteria."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import __version__
from . import fairness as F
from . import predictors as P
from .dataio import load_dataset
from .errors import ConfigConflict, ContrafairError
from .scm import FittedScm, Individual, fit_scm, load_graph

SCHEMA_VERSION = 1
SEED_ENV = "CONTRAFAIR_SEED"

FAMILY_COLUMNS = {
    P.FULL: "Full",
    P.UNAWARE: "Unaware",
    P.COUNTERFACTUAL: "Counterfactual",
    P.CONTRASTIVE: "Contrastive",
}

INDIVIDUAL_CRITERIA = (F.COUNTERFACTUAL_FAIRNESS, F.D_CONTRAST, F.T_CONTRAST)
PAIR_CRITERIA = (F.I_CONTRAST, F.CONTRAST_MARGIN)
POPULATION_CRITERIA = (F.DEMOGRAPHIC_PARITY, F.EQUALITY_OF_OPPORTUNITY, F.INDIVIDUAL_FAIRNESS)
CRITERIA = INDIVIDUAL_CRITERIA + PAIR_CRITERIA + POPULATION_CRITERIA

PENALTY_AGGREGATION = (
    "contrastive penalty = mean over (individual, intervention) of max over decisions "
    "of |score - counterfactual score|"
)


@dataclass(frozen=True)
class AuditConfig:
    graph: Path
    data: Path
    decisions: tuple[str, ...]
    predictors: dict[str, dict[str, Any]]
    criteria: list[dict[str, Any]]
    seed: int = 0
    outcome_threshold: float | None = None
    test_fraction: float = 0.2
    tolerance: dict[str, Any] = field(default_factory=dict)
    output: dict[str, Any] = field(default_factory=dict)
    raw: dict[str, Any] = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: str | Path = ".", seed: int | None = None) -> "AuditConfig":
        base = Path(base_dir)
        try:
            graph = base / doc["graph"]
            data = base / doc["data"]
            decisions = tuple(str(d) for d in doc["decisions"])
        except KeyError as exc:
            raise ConfigConflict(f"audit config is missing key {exc}") from None
        if seed is None:
            seed = int(doc.get("seed", 0))
        predictors = {fam: dict(spec) if isinstance(spec, Mapping) else spec
                      for fam, spec in (doc.get("predictors") or {}).items()}
        criteria = list(doc.get("criteria") or [])
        if not criteria:
            raise ConfigConflict("audit config requests no criteria")
        if not predictors:
            raise ConfigConflict("audit config names no predictors")
        for fam, spec in predictors.items():
            if fam not in P.FAMILIES:
                raise ConfigConflict(f"unknown predictor family {fam!r}")
            if not isinstance(spec, Mapping) or ("train" in spec) == ("path" in spec):
                raise ConfigConflict(f"predictor {fam!r} needs exactly one of 'train' or 'path'")
            if "path" in spec:
                spec["path"] = str(base / spec["path"])
        for c in criteria:
            if c.get("criterion") not in CRITERIA:
                raise ConfigConflict(f"unknown criterion {c.get('criterion')!r}")
            for fam in c.get("predictors", []):
                if fam not in predictors:
                    raise ConfigConflict(f"criterion refers to unconfigured predictor {fam!r}")
        fraction = float(doc.get("test_fraction", 0.2))
        if not 0 < fraction < 1:
            raise ConfigConflict("test_fraction must lie strictly between 0 and 1")
        threshold = doc.get("outcome_threshold")
        output = dict(doc.get("output") or {})
        if "path" in output:
            output["path"] = str(base / output["path"])
        resolved = {k: v for k, v in doc.items()}
        resolved["seed"] = seed
        return cls(
            graph=graph,
            data=data,
            decisions=decisions,
            predictors=predictors,
            criteria=criteria,
            seed=seed,
            outcome_threshold=None if threshold is None else float(threshold),
            test_fraction=fraction,
            tolerance=dict(doc.get("tolerance") or {}),
            output=output,
            raw=resolved,
        )

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None) -> "AuditConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigConflict(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, path.parent, seed)

    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class AuditReport:
    metadata: dict[str, Any]
    accuracy_table: list[dict[str, Any]]
    verdicts: list[F.Verdict]
    summary: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "metadata": self.metadata,
            "accuracy_table": self.accuracy_table,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "summary": self.summary,
        }

    @property
    def all_passed(self) -> bool:
        return all(v.passed for v in self.verdicts)


def resolve_seed(flag: int | None, config_seed: int | None = None) -> int:
    """Seed precedence: command-line flag, then environment, then config."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigConflict(f"{SEED_ENV}={env!r} is not an integer") from None
    return int(config_seed or 0)


def split_dataset(
    dataset: list[Individual], seed: int, test_fraction: float = 0.2
) -> tuple[list[Individual], list[Individual]]:
    """Deterministic shuffle split; both halves keep the original row order."""
    n = len(dataset)
    if n < 2:
        raise ConfigConflict("at least two individuals are needed for a train/test split")
    n_test = min(max(1, int(round(test_fraction * n))), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [ind for k, ind in enumerate(dataset) if k not in test_idx]
    test = [ind for k, ind in enumerate(dataset) if k in test_idx]
    return train, test


def _timestamp() -> str | None:
    # wall-clock time would break byte-identical reports; honour SOURCE_DATE_EPOCH only
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if not epoch:
        return None
    stamp = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    return stamp.strftime("%Y-%m-%dT%H:%M:%SZ")


def _tolerance(base: Mapping, override: Mapping | None, population: bool) -> F.Tolerance:
    fields = {**base, **(override or {})}
    allowed = {"eps_fair", "delta_order", "lambda_margin", "strict_margin"}
    unknown = set(fields) - allowed
    if unknown:
        raise ConfigConflict(f"unknown tolerance fields {sorted(unknown)}")
    if population and "eps_fair" not in (override or {}):
        fields["eps_fair"] = F.POPULATION_EPS
    return F.Tolerance(**fields)


def _obtain_predictors(config: AuditConfig, scm: FittedScm, train_set, base_seed: int):
    space = P.DecisionSpace(config.decisions)
    out = {}
    for fam in P.FAMILIES:
        if fam not in config.predictors:
            continue
        spec = config.predictors[fam]
        if "path" in spec:
            path = Path(spec["path"])
            predictor = P.load_predictor(path)
            if predictor.family != fam:
                raise ConfigConflict(f"{path} holds a {predictor.family} predictor, not {fam}")
            source = "loaded"
        else:
            params = dict(spec["train"])
            params.setdefault("seed", base_seed)
            params.setdefault("outcome_threshold", config.outcome_threshold)
            try:
                cfg = P.TrainConfig(family=fam, **params)
            except TypeError as exc:
                raise ConfigConflict(f"bad train config for {fam}: {exc}") from None
            predictor = P.train(cfg, scm, train_set, space)
            source = "trained"
        out[fam] = (predictor, source)
    return out


def _subjects(spec, by_id, heldout, key="subjects"):
    sel = spec.get(key, "all")
    if sel == "all":
        return list(by_id.values())
    if sel == "heldout":
        return list(heldout)
    missing = [s for s in sel if s not in by_id]
    if missing:
        raise ConfigConflict(f"unknown subject ids {missing}")
    return [by_id[s] for s in sel]


def _pairs(spec, by_id):
    pairs = spec.get("pairs")
    if not pairs:
        raise ConfigConflict(f"{spec['criterion']} needs explicit 'pairs'")
    out = []
    for pair in pairs:
        if len(pair) != 2:
            raise ConfigConflict(f"pair {pair!r} must name two ids")
        missing = [s for s in pair if s not in by_id]
        if missing:
            raise ConfigConflict(f"unknown subject ids {missing}")
        out.append((by_id[pair[0]], by_id[pair[1]]))
    return out


def _require(spec, *keys):
    for k in keys:
        if k not in spec:
            raise ConfigConflict(f"{spec['criterion']} needs '{k}'")


def _run_criterion(spec, predictor, scm, dataset, by_id, heldout, base_tol, config) -> list[F.Verdict]:
    name = spec["criterion"]
    population = name in (F.DEMOGRAPHIC_PARITY, F.EQUALITY_OF_OPPORTUNITY)
    tol = _tolerance(base_tol, spec.get("tolerance"), population)
    verdicts = []
    if name == F.COUNTERFACTUAL_FAIRNESS:
        for ind in _subjects(spec, by_id, heldout):
            verdicts.append(F.check_counterfactual_fairness(predictor, scm, ind, tol))
    elif name == F.D_CONTRAST:
        _require(spec, "d", "d_prime")
        for ind in _subjects(spec, by_id, heldout):
            verdicts.append(F.check_d_contrast(predictor, scm, ind, spec["d"], spec["d_prime"], tol))
    elif name == F.T_CONTRAST:
        _require(spec, "d", "d_prime", "t", "t_prime")
        subjects = _subjects(spec, by_id, heldout)
        if all(len(ind.snapshots) < 2 for ind in subjects):
            raise ConfigConflict("t_contrast requested but the subjects carry a single snapshot")
        for ind in subjects:
            verdicts.append(F.check_t_contrast(
                predictor, scm, ind, spec["t"], spec["t_prime"], spec["d"], spec["d_prime"], tol))
    elif name in PAIR_CRITERIA:
        _require(spec, "d", "d_prime")
        overrides = spec.get("lambda", {})
        for i, j in _pairs(spec, by_id):
            pair_tol = tol
            key = f"{i.id},{j.id}"
            if name == F.CONTRAST_MARGIN and key in overrides:
                pair_tol = F.Tolerance(tol.eps_fair, tol.delta_order, float(overrides[key]),
                                       tol.strict_margin)
            check = F.check_i_contrast if name == F.I_CONTRAST else F.check_contrast_margin
            verdicts.append(check(predictor, scm, i, j, spec["d"], spec["d_prime"], pair_tol))
    elif name == F.DEMOGRAPHIC_PARITY:
        _require(spec, "group")
        verdicts.append(F.check_demographic_parity(
            predictor, scm, dataset, spec["group"], tol, groups=spec.get("groups")))
    elif name == F.EQUALITY_OF_OPPORTUNITY:
        _require(spec, "group", "favorable_outcome")
        verdicts.append(F.check_equality_of_opportunity(
            predictor, scm, dataset, spec["group"], spec["favorable_outcome"], tol,
            threshold=config.outcome_threshold, groups=spec.get("groups")))
    elif name == F.INDIVIDUAL_FAIRNESS:
        _require(spec, "pair_threshold", "score_threshold")
        verdicts.append(F.check_individual_fairness(
            predictor, scm, dataset, F.euclidean,
            float(spec["pair_threshold"]), float(spec["score_threshold"])))
    return verdicts


def run_audit(config: AuditConfig) -> AuditReport:
    """validate graph -> fit SCM -> split -> train/load -> accuracy -> criteria."""
    graph = load_graph(config.graph)
    dataset = load_dataset(config.data, graph)
    if not dataset:
        raise ConfigConflict(f"{config.data} contains no rows")
    scm = fit_scm(graph, dataset)
    train_set, test_set = split_dataset(dataset, config.seed, config.test_fraction)
    predictors = _obtain_predictors(config, scm, train_set, config.seed)

    table = []
    for fam, (predictor, source) in predictors.items():
        try:
            acc = P.accuracy(predictor, scm, test_set, config.outcome_threshold)
        except ContrafairError as exc:
            raise ConfigConflict(f"accuracy for {fam}: {exc}") from exc
        table.append({
            "family": fam,
            "column": FAMILY_COLUMNS[fam],
            "accuracy": acc,
            "architecture": predictor.architecture,
            "source": source,
        })

    by_id = {ind.id: ind for ind in dataset}
    verdicts: list[F.Verdict] = []
    for spec in config.criteria:
        families = spec.get("predictors") or list(predictors)
        for fam in families:
            predictor, _ = predictors[fam]
            verdicts.extend(_run_criterion(
                spec, predictor, scm, dataset, by_id, test_set, config.tolerance, config))

    passed = sum(v.passed for v in verdicts)
    metadata = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "timestamp": _timestamp(),
        "tool_version": __version__,
        "split": {"train": len(train_set), "test": len(test_set),
                  "test_fraction": config.test_fraction},
        "outcome_threshold": config.outcome_threshold,
        "penalty_aggregation": PENALTY_AGGREGATION,
    }
    return AuditReport(
        metadata=metadata,
        accuracy_table=table,
        verdicts=verdicts,
        summary={"checks": len(verdicts), "passed": passed, "failed": len(verdicts) - passed},
    )


# -- rendering -----------------------------------------------------------------


def report_json(doc: Mapping) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def render_text(doc: Mapping) -> str:
    lines = [f"contrafair audit report (schema {doc['schema_version']})"]
    meta = doc.get("metadata", {})
    split = meta.get("split") or {}
    if split:
        lines.append(f"seed {meta.get('seed')} | train {split.get('train')} | test {split.get('test')}")
    table = doc.get("accuracy_table") or []
    if table:
        lines.append("")
        lines.append("Held-out accuracy")
        widths = [max(len(row["column"]), 5) for row in table]
        lines.append("  " + "  ".join(row["column"].ljust(w) for row, w in zip(table, widths)))
        lines.append("  " + "  ".join(f"{row['accuracy']:.3f}".ljust(w) for row, w in zip(table, widths)))
    summary = doc.get("summary") or {}
    n = summary.get("checks", 0)
    lines.append("")
    if n == 0:
        lines.append("0 checks")
    else:
        lines.append(f"{n} checks: {summary.get('passed', 0)} passed, {summary.get('failed', 0)} failed")
        for v in doc.get("verdicts", []):
            status = "PASS" if v["passed"] else "FAIL"
            who = ",".join(v.get("subjects", {}).get("individuals", [])) or "population"
            failing = [c["equation"] for c in v["clauses"] if not c["passed"] and not c.get("advisory")]
            tail = f"  failing: {' '.join(failing)}" if failing else ""
            lines.append(f"  {status}  {v['criterion']} [{v.get('predictor')}] {who}{tail}")
    return "\n".join(line.rstrip() for line in lines).rstrip() + "\n"


def emit_report(report: AuditReport | Mapping, fmt: str = "json", path: str | Path | None = None) -> str:
    """Render ``report`` as json or text, writing it to ``path`` when given."""
    doc = report.to_dict() if isinstance(report, AuditReport) else report
    if fmt == "json":
        text = report_json(doc)
    elif fmt == "text":
        text = render_text(doc)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
