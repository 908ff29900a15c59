"""Decision predictors over individuals described by a fitted SCM.

Four families share one scoring path and differ only in what they read:

* ``full``           observables and protected attributes
* ``unaware``        observables only
* ``counterfactual`` abducted residuals only
* ``contrastive``    observables and protected attributes, trained with a
                     penalty on counterfactual score differences

Scores are logistic for two decisions and softmax otherwise, computed from a
linear map or a single tanh hidden layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import scm as scm_core
from .errors import (
    ConfigConflict,
    EmptyBatch,
    MissingOutcome,
    MissingValue,
    NonFiniteLoss,
    SchemaMismatch,
)
from .scm import FittedScm, Individual, Intervention, LatentAssignment

FULL = "full"
UNAWARE = "unaware"
COUNTERFACTUAL = "counterfactual"
CONTRASTIVE = "contrastive"
FAMILIES = (FULL, UNAWARE, COUNTERFACTUAL, CONTRASTIVE)

# order in which the parameter blocks are flattened
_PARAM_KEYS = ("W1", "b1", "W", "b")


def residual_feature(name: str) -> str:
    return f"eps[{name}]"


@dataclass(frozen=True)
class DecisionSpace:
    decisions: tuple[str, ...]

    def __post_init__(self):
        decisions = tuple(str(d) for d in self.decisions)
        object.__setattr__(self, "decisions", decisions)
        if len(decisions) < 2 or len(set(decisions)) != len(decisions):
            raise ValueError(f"decision space needs >= 2 distinct labels, got {decisions}")

    def __len__(self):
        return len(self.decisions)

    def __iter__(self):
        return iter(self.decisions)

    def __contains__(self, d):
        return d in self.decisions

    def index(self, d: str) -> int:
        return self.decisions.index(d)


@dataclass(frozen=True)
class ScoreVector:
    scores: dict[str, float]

    def __getitem__(self, d: str) -> float:
        return self.scores[d]

    def max_abs_diff(self, other: "ScoreVector", decisions=None) -> tuple[float, str]:
        """Largest per-decision absolute gap and the decision attaining it."""
        best, arg = -1.0, None
        for d in decisions or self.scores:
            gap = abs(self.scores[d] - other.scores[d])
            if gap > best:
                best, arg = gap, d
        return best, arg


@dataclass(frozen=True)
class TrainConfig:
    family: str
    learning_rate: float = 0.5
    epochs: int = 500
    penalty_weight: float = 0.0
    hidden_width: int = 0
    seed: int = 0
    l2: float = 0.0
    outcome_threshold: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown predictor family {self.family!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.penalty_weight < 0 or self.l2 < 0 or self.hidden_width < 0:
            raise ValueError("penalty_weight, l2 and hidden_width must be nonnegative")
        if self.penalty_weight and self.family != CONTRASTIVE:
            raise ValueError("penalty_weight only applies to the contrastive family")


@dataclass(frozen=True)
class Predictor:
    family: str
    decision_space: DecisionSpace
    input_names: tuple[str, ...]
    params: dict[str, np.ndarray]
    train_config: TrainConfig | None = None
    metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown predictor family {self.family!r}")
        object.__setattr__(self, "input_names", tuple(self.input_names))
        params = {}
        for k, v in self.params.items():
            arr = np.array(v, dtype=float)
            arr.setflags(write=False)
            params[k] = arr
        object.__setattr__(self, "params", params)
        d = len(self.input_names)
        out = 1 if len(self.decision_space) == 2 else len(self.decision_space)
        width = params["W1"].shape[0] if "W1" in params else d
        expected = {"W": (out, width), "b": (out,), "shift": (d,), "scale": (d,)}
        if "W1" in params:
            expected.update({"W1": (width, d), "b1": (width,)})
        for k, shape in expected.items():
            if k not in params or params[k].shape != shape:
                got = params[k].shape if k in params else None
                raise SchemaMismatch(f"parameter {k!r} has shape {got}, expected {shape}")

    @property
    def hidden_width(self) -> int:
        return int(self.params["W1"].shape[0]) if "W1" in self.params else 0

    @property
    def architecture(self) -> str:
        width = self.hidden_width
        head = "logistic" if len(self.decision_space) == 2 else "softmax"
        return f"{head}" if width == 0 else f"{head}+tanh[{width}]"


def input_schema(family: str, graph) -> tuple[str, ...]:
    """Feature names a family reads, in a fixed order derived from the graph."""
    observables = list(graph.observables)
    protected = []
    for name in graph.protected:
        protected.extend(graph.variable(name).feature_names())
    if family in (FULL, CONTRASTIVE):
        return tuple(observables + protected)
    if family == UNAWARE:
        return tuple(observables)
    if family == COUNTERFACTUAL:
        return tuple(residual_feature(o) for o in observables)
    raise ValueError(f"unknown predictor family {family!r}")


def linear_predictor(
    family: str,
    graph,
    decisions: Sequence[str],
    weights: Mapping[str, float] | None = None,
    bias: float = 0.0,
) -> Predictor:
    """A binary logistic predictor with hand-set weights (unlisted inputs get 0)."""
    names = input_schema(family, graph)
    weights = dict(weights or {})
    unknown = set(weights) - set(names)
    if unknown:
        raise SchemaMismatch(f"{family} predictor does not read {sorted(unknown)}")
    space = DecisionSpace(tuple(decisions))
    if len(space) != 2:
        raise ValueError("linear_predictor builds binary predictors only")
    d = len(names)
    return Predictor(
        family=family,
        decision_space=space,
        input_names=names,
        params={
            "W": [[float(weights.get(n, 0.0)) for n in names]],
            "b": [float(bias)],
            "shift": np.zeros(d),
            "scale": np.ones(d),
        },
    )


# -- feature construction ---------------------------------------------------


def _feature_row(
    names: Sequence[str],
    protected: Mapping[str, Any],
    observables: Mapping[str, float],
    latent: LatentAssignment | None,
) -> list[float]:
    """Resolve encoded input names ("GPA", "R=1", "eps[GPA]") against one world."""
    row = []
    for n in names:
        if n.startswith("eps[") and n.endswith("]"):
            key = n[4:-1]
            if latent is None or key not in latent.residuals:
                raise MissingValue(n)
            row.append(latent.residuals[key])
        elif "=" in n:
            var, level = n.split("=", 1)
            if protected.get(var) is None:
                raise MissingValue(var)
            row.append(1.0 if str(protected[var]) == level else 0.0)
        elif observables.get(n) is not None:
            row.append(float(observables[n]))
        elif protected.get(n) is not None:
            row.append(float(protected[n]))
        else:
            raise MissingValue(n)
    return row


def _check_schema(predictor: Predictor, scm: FittedScm | None):
    if predictor.family == COUNTERFACTUAL and scm is None:
        raise SchemaMismatch("the counterfactual family needs a fitted SCM to abduct residuals")
    if scm is not None:
        expected = input_schema(predictor.family, scm.graph)
        if tuple(predictor.input_names) != expected:
            raise SchemaMismatch(
                f"{predictor.family} predictor reads {list(predictor.input_names)}, "
                f"graph provides {list(expected)}"
            )


def _needs_latent(predictor: Predictor) -> bool:
    return predictor.family == COUNTERFACTUAL


def factual_features(
    predictor: Predictor, scm: FittedScm | None, individual: Individual, snapshot_index: int = -1
) -> list[float]:
    _check_schema(predictor, scm)
    snap = individual.snapshot(snapshot_index)
    latent = scm_core.abduct(scm, individual, snapshot_index) if _needs_latent(predictor) else None
    return _feature_row(predictor.input_names, individual.protected, snap.observables, latent)


def counterfactual_features(
    predictor: Predictor,
    scm: FittedScm,
    individual: Individual,
    snapshot_index: int,
    intervention: Intervention,
    latent: LatentAssignment | None = None,
) -> list[float]:
    _check_schema(predictor, scm)
    if latent is None:
        latent = scm_core.abduct(scm, individual, snapshot_index)
    snap = scm_core.counterfactual(scm, individual, snapshot_index, intervention, latent=latent)
    protected = dict(individual.protected)
    protected.update(intervention.assignments)
    return _feature_row(
        predictor.input_names,
        protected,
        snap.observables,
        latent if _needs_latent(predictor) else None,
    )


# -- network ----------------------------------------------------------------


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _forward(params: Mapping[str, np.ndarray], X: np.ndarray):
    Z = (X - params["shift"]) / params["scale"]
    if "W1" in params:
        H = np.tanh(Z @ params["W1"].T + params["b1"])
        return H @ params["W"].T + params["b"], (Z, H)
    return Z @ params["W"].T + params["b"], (Z, None)


def _probabilities(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        z = logits[:, 0]
        return np.column_stack([_sigmoid(-z), _sigmoid(z)])
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _probs_to_logit_grad(P: np.ndarray, dP: np.ndarray) -> np.ndarray:
    """Chain rule from probability gradients back to logits."""
    # two decisions always share a single logistic logit
    if P.shape[1] == 2:
        s = P[:, 1] * P[:, 0]
        return ((dP[:, 1] - dP[:, 0]) * s)[:, None]
    return P * (dP - (dP * P).sum(axis=1, keepdims=True))


def _backward(params, cache, G: np.ndarray) -> dict[str, np.ndarray]:
    Z, H = cache
    grads = {}
    A = H if H is not None else Z
    grads["W"] = G.T @ A
    grads["b"] = G.sum(axis=0)
    if H is not None:
        dpre = (G @ params["W"]) * (1.0 - H * H)
        grads["W1"] = dpre.T @ Z
        grads["b1"] = dpre.sum(axis=0)
    return grads


def score_matrix(predictor: Predictor, X: np.ndarray) -> np.ndarray:
    logits, _ = _forward(predictor.params, np.atleast_2d(np.asarray(X, dtype=float)))
    return _probabilities(logits)


def _to_scores(predictor: Predictor, row: Sequence[float]) -> ScoreVector:
    probs = score_matrix(predictor, np.asarray([row]))[0]
    return ScoreVector(dict(zip(predictor.decision_space.decisions, map(float, probs))))


def predict(
    predictor: Predictor, scm: FittedScm | None, individual: Individual, snapshot_index: int = -1
) -> ScoreVector:
    return _to_scores(predictor, factual_features(predictor, scm, individual, snapshot_index))


def counterfactual_score(
    predictor: Predictor,
    scm: FittedScm,
    individual: Individual,
    snapshot_index: int,
    intervention: Intervention,
) -> ScoreVector:
    """Score of the individual in the world where ``intervention`` held."""
    row = counterfactual_features(predictor, scm, individual, snapshot_index, intervention)
    return _to_scores(predictor, row)


# -- penalty and objective ---------------------------------------------------


def counterfactual_pairs(
    family: str,
    scm: FittedScm,
    batch: Sequence[Individual],
    interventions: Sequence[Intervention],
    snapshot_index: int = -1,
) -> tuple[np.ndarray, np.ndarray]:
    """Factual and counterfactual design rows for every (individual, intervention).

    Counterfactual rows regenerate the observables through the SCM, so proxy
    paths from the protected attributes are reflected in the features.
    """
    names = input_schema(family, scm.graph)
    reads_latent = family == COUNTERFACTUAL
    factual, counter = [], []
    for ind in batch:
        latent = scm_core.abduct(scm, ind, snapshot_index)
        snap = ind.snapshot(snapshot_index)
        f_row = _feature_row(names, ind.protected, snap.observables, latent if reads_latent else None)
        for iv in interventions:
            cf = scm_core.counterfactual(scm, ind, snapshot_index, iv, latent=latent)
            protected = {**ind.protected, **iv.assignments}
            factual.append(f_row)
            counter.append(
                _feature_row(names, protected, cf.observables, latent if reads_latent else None)
            )
    d = len(names)
    return (
        np.asarray(factual, dtype=float).reshape(-1, d),
        np.asarray(counter, dtype=float).reshape(-1, d),
    )


def _penalty_from_rows(params, Xf, Xc) -> float:
    Pf = _probabilities(_forward(params, Xf)[0])
    Pc = _probabilities(_forward(params, Xc)[0])
    return float(np.abs(Pf - Pc).max(axis=1).mean())


def contrastive_penalty(
    predictor: Predictor,
    scm: FittedScm,
    batch: Sequence[Individual],
    interventions: Sequence[Intervention] | None = None,
) -> float:
    """Mean over (individual, intervention) of the largest per-decision score shift."""
    if not batch:
        raise EmptyBatch("contrastive penalty needs at least one individual")
    _check_schema(predictor, scm)
    if interventions is None:
        interventions = scm_core.enumerate_interventions(scm.graph)
    if not interventions:
        raise EmptyBatch("contrastive penalty needs at least one intervention")
    Xf, Xc = counterfactual_pairs(predictor.family, scm, batch, interventions)
    return _penalty_from_rows(predictor.params, Xf, Xc)


class Objective:
    """Penalized cross-entropy over a flat parameter vector.

    loss = CE(X, y) + l2/2 * |weights|^2 + penalty_weight * mean_k max_d |P(Xf_k) - P(Xc_k)|_d
    """

    def __init__(self, template, X, targets, n_decisions, l2=0.0, penalty_weight=0.0, Xf=None, Xc=None):
        self.template = {k: np.asarray(v, dtype=float) for k, v in template.items()}
        self.keys = [k for k in _PARAM_KEYS if k in self.template]
        self.X = X
        self.targets = np.asarray(targets, dtype=int)
        self.n_decisions = n_decisions
        self.l2 = l2
        self.penalty_weight = penalty_weight
        self.Xf, self.Xc = Xf, Xc
        if n_decisions == 2:
            self.Y = self.targets.astype(float)[:, None]
        else:
            self.Y = np.eye(n_decisions)[self.targets]

    def pack(self, params) -> np.ndarray:
        return np.concatenate([np.ravel(params[k]) for k in self.keys])

    def unpack(self, theta) -> dict[str, np.ndarray]:
        out = {"shift": self.template["shift"], "scale": self.template["scale"]}
        pos = 0
        for k in self.keys:
            shape = self.template[k].shape
            size = int(np.prod(shape))
            out[k] = theta[pos:pos + size].reshape(shape)
            pos += size
        return out

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        params = self.unpack(theta)
        n = self.X.shape[0]
        logits, cache = _forward(params, self.X)
        if self.n_decisions == 2:
            z = logits[:, 0]
            loss = float(np.mean(np.logaddexp(0.0, z) - self.targets * z))
            G = (_sigmoid(z)[:, None] - self.Y) / n
        else:
            shifted = logits - logits.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            loss = float(-np.mean(logp[np.arange(n), self.targets]))
            G = (np.exp(logp) - self.Y) / n
        grads = _backward(params, cache, G)

        for k in ("W", "W1"):
            if k in params and self.l2:
                loss += 0.5 * self.l2 * float(np.sum(params[k] ** 2))
                grads[k] = grads[k] + self.l2 * params[k]

        if self.penalty_weight and self.Xf is not None and len(self.Xf):
            lf, cf = _forward(params, self.Xf)
            lc, cc = _forward(params, self.Xc)
            Pf, Pc = _probabilities(lf), _probabilities(lc)
            diff = Pf - Pc
            m = diff.shape[0]
            worst = np.abs(diff).argmax(axis=1)
            rows = np.arange(m)
            loss += self.penalty_weight * float(np.abs(diff[rows, worst]).mean())
            dP = np.zeros_like(diff)
            dP[rows, worst] = np.sign(diff[rows, worst]) * self.penalty_weight / m
            gf = _backward(params, cf, _probs_to_logit_grad(Pf, dP))
            gc = _backward(params, cc, _probs_to_logit_grad(Pc, -dP))
            for k in grads:
                grads[k] = grads[k] + gf[k] + gc[k]
        return loss, self.pack(grads)


# -- training ---------------------------------------------------------------


def outcome_label(value, space: DecisionSpace, threshold: float | None = None) -> str:
    """Map an observed outcome onto the decision space.

    Labels are matched verbatim; numeric outcomes need ``threshold`` and map to
    the second decision when ``value >= threshold``.
    """
    if value is None:
        raise MissingOutcome("observed outcome is missing")
    label = str(value)
    if label in space:
        return label
    if threshold is None:
        raise ConfigConflict(
            f"outcome {value!r} is not a decision label; a binarization threshold is required"
        )
    if len(space) != 2:
        raise ConfigConflict("threshold binarization needs a two-decision space")
    return space.decisions[1] if float(value) >= threshold else space.decisions[0]


def _init_params(config: TrainConfig, d: int, out: int) -> dict[str, np.ndarray]:
    if config.hidden_width == 0:
        return {"W": np.zeros((out, d)), "b": np.zeros(out)}
    rng = np.random.default_rng(config.seed)
    h = config.hidden_width
    return {
        "W1": rng.normal(0.0, 1.0 / math.sqrt(max(d, 1)), size=(h, d)),
        "b1": np.zeros(h),
        "W": rng.normal(0.0, 1.0 / math.sqrt(h), size=(out, h)),
        "b": np.zeros(out),
    }


def design_matrix(family: str, scm: FittedScm, dataset: Sequence[Individual], snapshot_index: int = -1) -> np.ndarray:
    names = input_schema(family, scm.graph)
    rows = []
    for ind in dataset:
        latent = scm_core.abduct(scm, ind, snapshot_index) if family == COUNTERFACTUAL else None
        snap = ind.snapshot(snapshot_index)
        rows.append(_feature_row(names, ind.protected, snap.observables, latent))
    return np.asarray(rows, dtype=float).reshape(-1, len(names))


def train(
    config: TrainConfig,
    scm: FittedScm,
    dataset: Sequence[Individual],
    decision_space: DecisionSpace,
    interventions: Sequence[Intervention] | None = None,
) -> Predictor:
    """Full-batch gradient descent on (penalized) cross-entropy."""
    if not dataset:
        raise EmptyBatch("training set is empty")
    for ind in dataset:
        if ind.outcome is None:
            raise MissingOutcome(f"individual {ind.id!r} has no observed outcome")
    targets = [
        decision_space.index(outcome_label(ind.outcome, decision_space, config.outcome_threshold))
        for ind in dataset
    ]
    names = input_schema(config.family, scm.graph)
    X = design_matrix(config.family, scm, dataset)
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0

    Xf = Xc = None
    if config.family == CONTRASTIVE and config.penalty_weight > 0:
        if interventions is None:
            interventions = scm_core.enumerate_interventions(scm.graph)
        Xf, Xc = counterfactual_pairs(config.family, scm, dataset, interventions)

    out = 1 if len(decision_space) == 2 else len(decision_space)
    init = _init_params(config, len(names), out)
    template = dict(init, shift=shift, scale=scale)
    objective = Objective(
        template, X, targets, len(decision_space),
        l2=config.l2, penalty_weight=config.penalty_weight, Xf=Xf, Xc=Xc,
    )
    theta = objective.pack(init)
    best_loss, best_theta = math.inf, theta
    for epoch in range(config.epochs + 1):
        loss, grad = objective(theta)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NonFiniteLoss(epoch)
        # subgradient steps on the penalty need not descend: keep the best iterate
        if loss < best_loss:
            best_loss, best_theta = loss, theta
        if epoch == config.epochs:
            break
        # linear decay lets the non-smooth penalty settle instead of oscillating
        step = config.learning_rate * (1.0 - epoch / config.epochs)
        theta = theta - step * grad
    theta, loss = best_theta, best_loss

    params = objective.unpack(theta)
    probs = _probabilities(_forward(params, X)[0])
    metrics = {
        "final_objective": loss,
        "train_accuracy": float(np.mean(probs.argmax(axis=1) == np.asarray(targets))),
        "n_train": len(dataset),
    }
    if Xf is not None:
        metrics["train_penalty"] = _penalty_from_rows(params, Xf, Xc)
    return Predictor(
        family=config.family,
        decision_space=decision_space,
        input_names=names,
        params={k: np.array(v) for k, v in params.items()},
        train_config=config,
        metrics=metrics,
    )


def accuracy(
    predictor: Predictor,
    scm: FittedScm,
    dataset: Sequence[Individual],
    threshold: float | None = None,
) -> float:
    """Fraction of individuals whose top-scoring decision matches their outcome."""
    labelled = [ind for ind in dataset if ind.outcome is not None]
    if not labelled:
        raise MissingOutcome("no individual carries an observed outcome")
    X = design_matrix(predictor.family, scm, labelled)
    top = score_matrix(predictor, X).argmax(axis=1)
    space = predictor.decision_space
    truth = [space.index(outcome_label(ind.outcome, space, threshold)) for ind in labelled]
    return float(np.mean(top == np.asarray(truth)))


# -- serialization ----------------------------------------------------------


def predictor_to_dict(predictor: Predictor) -> dict:
    return {
        "family": predictor.family,
        "decision_space": list(predictor.decision_space.decisions),
        "input_schema": list(predictor.input_names),
        "parameters": {k: v.tolist() for k, v in sorted(predictor.params.items())},
        "train_config": asdict(predictor.train_config) if predictor.train_config else None,
        "metrics": dict(predictor.metrics),
    }


def predictor_from_dict(doc: Mapping) -> Predictor:
    try:
        cfg = doc.get("train_config")
        return Predictor(
            family=doc["family"],
            decision_space=DecisionSpace(tuple(doc["decision_space"])),
            input_names=tuple(doc["input_schema"]),
            params={k: np.asarray(v, dtype=float) for k, v in doc["parameters"].items()},
            train_config=TrainConfig(**cfg) if cfg else None,
            metrics=dict(doc.get("metrics") or {}),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaMismatch(f"malformed predictor document: {exc}") from exc


def save_predictor(predictor: Predictor, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(predictor_to_dict(predictor), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_predictor(path: str | Path) -> Predictor:
    return predictor_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
