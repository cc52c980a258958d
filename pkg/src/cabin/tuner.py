"""Context tuning: choose values of the QoS node's tunable parents that make
a target QoS value most probable."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bayesnet import QOS_METRIC, BayesianNetworkModel, Evidence, infer_marginal
from .discretizer import _real, label_to_value
from .errors import NotAQosNode, TunableEvidence

DEFAULT_P_MIN = 0.5


@dataclass(frozen=True)
class TuningRecommendation:
    qos_node: str
    target_label: int
    assignment: Mapping[str, int]
    probability: float
    # every target's best probability under the chosen assignment search
    target_probabilities: tuple[float, ...] = field(default=(), compare=False)

    def to_dict(self, model: BayesianNetworkModel | None = None) -> dict:
        schemes = model.schemes if model is not None else {}
        out = {
            "qos_node": self.qos_node,
            "target_label": int(self.target_label),
            "target_value": _scheme_value(schemes, self.qos_node, self.target_label),
            "assignment": {
                name: {"label": int(label), "value": _scheme_value(schemes, name, label)}
                for name, label in self.assignment.items()
            },
            "probability": _real(self.probability),
        }
        return out

    def to_json(self, model: BayesianNetworkModel | None = None) -> str:
        return json.dumps(self.to_dict(model), indent=2)


def _scheme_value(schemes, name, label):
    scheme = schemes.get(name)
    return None if scheme is None else _real(label_to_value(scheme, int(label)))


def _require_qos(model: BayesianNetworkModel, qos_node: str):
    if model.node(qos_node).role != QOS_METRIC:
        raise NotAQosNode(f"{qos_node} is not a QoS metric node")


def tunable_parents(model: BayesianNetworkModel, qos_node: str) -> tuple[str, ...]:
    """Parents of the QoS node that are flagged tunable, in DAG order."""
    _require_qos(model, qos_node)
    return tuple(p for p in model.dag.parents(qos_node) if model.node(p).tunable)


def _as_population(observed) -> list[dict]:
    if isinstance(observed, Mapping):
        return [dict(observed)]
    population = [dict(o) for o in observed]
    if not population:
        raise ValueError("need at least one observation")
    return population


def assignment_table(model: BayesianNetworkModel, qos_node: str, observed) -> tuple[tuple[str, ...], list, np.ndarray]:
    """Posterior of the QoS node for every tunable-parent assignment.

    ``observed`` is one evidence mapping or a sequence of them (one per
    participant sharing the same knob); with several, the posteriors are
    averaged.  Returns ``(tunables, assignments, probs)`` with
    ``probs[i, q] = P(qos = q | assignments[i], observed)``; assignments come
    in lexicographic order of their label vectors.
    """
    tunables = tunable_parents(model, qos_node)
    population = _as_population(observed)
    for obs in population:
        bad = [n for n in obs if model.node(n).tunable]
        if bad:
            raise TunableEvidence(f"tunable nodes are outputs, not evidence: {bad}")
    cards = [model.node(t).cardinality for t in tunables]
    assignments = list(itertools.product(*[range(r) for r in cards]))
    r_q = model.node(qos_node).cardinality
    probs = np.zeros((len(assignments), r_q))
    for i, labels in enumerate(assignments):
        setting = dict(zip(tunables, labels))
        acc = np.zeros(r_q)
        for obs in population:
            acc += infer_marginal(model, {**obs, **setting}, qos_node)
        probs[i] = acc / len(population)
    return tunables, assignments, probs


def _recommend_from_table(qos_node, target, tunables, assignments, probs) -> TuningRecommendation:
    column = probs[:, target]
    # first maximum = lexicographically smallest label vector among ties
    best = int(np.argmax(column))
    return TuningRecommendation(
        qos_node=qos_node,
        target_label=int(target),
        assignment=dict(zip(tunables, (int(x) for x in assignments[best]))),
        probability=float(column[best]),
        target_probabilities=tuple(float(x) for x in probs.max(axis=0)),
    )


def recommend(model: BayesianNetworkModel, qos_node: str, target: int, observed) -> TuningRecommendation:
    """Tunable-parent assignment maximising ``P(qos = target | assignment, observed)``.

    Every joint assignment is enumerated; non-parent contexts are never part
    of the result.
    """
    r_q = model.node(qos_node).cardinality
    if not 0 <= target < r_q:
        raise ValueError(f"target {target} outside [0, {r_q})")
    table = assignment_table(model, qos_node, observed)
    return _recommend_from_table(qos_node, target, *table)


def recommend_best(model: BayesianNetworkModel, qos_node: str, preference: Sequence[int], observed,
                   p_min: float = DEFAULT_P_MIN) -> TuningRecommendation:
    """First target in ``preference`` reachable with probability ``>= p_min``.

    Falls back to the (target, assignment) pair with the highest probability
    overall when no target qualifies.
    """
    r_q = model.node(qos_node).cardinality
    if sorted(preference) != list(range(r_q)):
        raise ValueError("preference must be a permutation of the QoS labels")
    table = assignment_table(model, qos_node, observed)
    recs = [_recommend_from_table(qos_node, q, *table) for q in preference]
    for rec in recs:
        if rec.probability >= p_min:
            return rec
    return max(recs, key=lambda r: r.probability)


def preference_by_value(model: BayesianNetworkModel, qos_node: str, descending: bool = True) -> list[int]:
    """QoS labels ordered by their class mean (best first when ``descending``)."""
    scheme = model.schemes.get(qos_node)
    labels = list(range(model.node(qos_node).cardinality))
    if scheme is None:
        return labels[::-1] if descending else labels
    return sorted(labels, key=lambda q: -scheme.terms[q].b if descending else scheme.terms[q].b)
