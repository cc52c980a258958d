"""Discrete Bayesian networks: K2 structure learning, Dirichlet parameter
learning and exact inference by variable elimination."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .discretizer import DiscretizationScheme, _real
from .errors import (
    ImpossibleEvidence,
    MissingColumn,
    StateSpaceTooLarge,
    UnknownNode,
)

QOS_METRIC = "qos_metric"
CONTEXT = "context"
DEFAULT_MAX_PARENTS = 3
DEFAULT_ALPHA = 1.0
ENUMERATION_LIMIT = 10**7

Evidence = Mapping[str, int]


@dataclass(frozen=True)
class NodeSpec:
    name: str
    cardinality: int
    role: str = CONTEXT
    tunable: bool = False

    def __post_init__(self):
        if self.cardinality < 1:
            raise ValueError(f"{self.name}: cardinality must be >= 1")
        if self.role not in (QOS_METRIC, CONTEXT):
            raise ValueError(f"{self.name}: unknown role {self.role!r}")


class TraceDataset:
    """Complete discrete data: one integer label column per variable."""

    def __init__(self, columns: Sequence[str], rows, cardinalities: Mapping[str, int] | None = None):
        self.columns = tuple(columns)
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column names")
        data = np.asarray(rows, dtype=np.int64)
        if data.size == 0:
            data = data.reshape(0, len(self.columns))
        if data.ndim != 2 or data.shape[1] != len(self.columns):
            raise ValueError(f"rows must have shape (N, {len(self.columns)})")
        if data.size and data.min() < 0:
            raise ValueError("labels must be non-negative")
        if cardinalities is None:
            cardinalities = {c: int(data[:, i].max()) + 1 if data.shape[0] else 1
                             for i, c in enumerate(self.columns)}
        self.cardinalities = {c: int(cardinalities[c]) for c in self.columns}
        for i, c in enumerate(self.columns):
            if data.shape[0] and data[:, i].max() >= self.cardinalities[c]:
                raise ValueError(f"column {c}: label exceeds cardinality {self.cardinalities[c]}")
        data.flags.writeable = False
        self.data = data
        self._index = {c: i for i, c in enumerate(self.columns)}

    @classmethod
    def from_columns(cls, columns: Mapping[str, Iterable[int]], cardinalities=None) -> "TraceDataset":
        names = list(columns)
        rows = np.column_stack([np.asarray(list(columns[c]), dtype=np.int64) for c in names]) if names else []
        return cls(names, rows, cardinalities)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.data[:, self._index[name]]
        except KeyError:
            raise MissingColumn(name) from None

    def __contains__(self, name):
        return name in self._index


@dataclass(frozen=True)
class Dag:
    nodes: tuple[NodeSpec, ...]
    edges: frozenset[tuple[str, str]]
    ordering: tuple[str, ...]

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if sorted(names) != sorted(self.ordering):
            raise ValueError("ordering must be a permutation of the nodes")
        pos = {n: i for i, n in enumerate(self.ordering)}
        for u, v in self.edges:
            if u not in pos or v not in pos:
                raise UnknownNode(f"edge {u}->{v} refers to an unknown node")
            if pos[u] >= pos[v]:
                raise ValueError(f"edge {u}->{v} violates the node ordering")

    @property
    def names(self) -> tuple[str, ...]:
        return self.ordering

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise UnknownNode(name)

    def parents(self, name: str) -> tuple[str, ...]:
        self.node(name)
        return tuple(u for u in self.ordering if (u, name) in self.edges)

    def children(self, name: str) -> tuple[str, ...]:
        self.node(name)
        return tuple(v for v in self.ordering if (name, v) in self.edges)

    def topological_order(self) -> list[str]:
        """Kahn's algorithm; raises ValueError on a cycle."""
        indeg = {n.name: 0 for n in self.nodes}
        for _, v in self.edges:
            indeg[v] += 1
        ready = sorted(n for n, d in indeg.items() if d == 0)
        out = []
        while ready:
            u = ready.pop(0)
            out.append(u)
            for v in sorted(v for (x, v) in self.edges if x == u):
                indeg[v] -= 1
                if indeg[v] == 0:
                    ready.append(v)
        if len(out) != len(self.nodes):
            raise ValueError("graph has a cycle")
        return out


def parents_of(dag: Dag, node: str) -> frozenset[str]:
    return frozenset(dag.parents(node))


def markov_blanket(dag: Dag, node: str) -> frozenset[str]:
    """Parents, children and the children's other parents."""
    blanket = set(dag.parents(node))
    for child in dag.children(node):
        blanket.add(child)
        blanket.update(dag.parents(child))
    blanket.discard(node)
    return frozenset(blanket)


@dataclass(frozen=True)
class Cpt:
    """``table[j, k] = P(node = k | parent configuration j)``.

    Configurations are indexed mixed-radix over ``parents`` with the last
    parent varying fastest (C order).
    """

    node: str
    parents: tuple[str, ...]
    table: np.ndarray

    def __post_init__(self):
        table = np.array(self.table, dtype=float)
        if table.ndim != 2:
            raise ValueError(f"{self.node}: CPT table must be 2-D")
        table.flags.writeable = False
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "parents", tuple(self.parents))

    def factor(self, cardinalities: Mapping[str, int]) -> "Factor":
        shape = [cardinalities[p] for p in self.parents] + [cardinalities[self.node]]
        return Factor(self.parents + (self.node,), self.table.reshape(shape))


@dataclass
class Factor:
    variables: tuple[str, ...]
    values: np.ndarray

    def reduce(self, evidence: Evidence) -> "Factor":
        index = []
        keep = []
        for v in self.variables:
            if v in evidence:
                index.append(evidence[v])
            else:
                index.append(slice(None))
                keep.append(v)
        return Factor(tuple(keep), self.values[tuple(index)])

    def __mul__(self, other: "Factor") -> "Factor":
        variables = self.variables + tuple(v for v in other.variables if v not in self.variables)
        return Factor(variables, self._expand(variables) * other._expand(variables))

    def _expand(self, variables: Sequence[str]) -> np.ndarray:
        # transpose into the target order, then insert broadcast axes
        order = [v for v in variables if v in self.variables]
        arr = np.transpose(self.values, [self.variables.index(v) for v in order])
        shape = [arr.shape[order.index(v)] if v in self.variables else 1 for v in variables]
        return arr.reshape(shape)

    def sum_out(self, var: str) -> "Factor":
        axis = self.variables.index(var)
        return Factor(self.variables[:axis] + self.variables[axis + 1:], self.values.sum(axis=axis))


@dataclass
class BayesianNetworkModel:
    dag: Dag
    cpts: dict[str, Cpt]
    schemes: dict[str, DiscretizationScheme] = field(default_factory=dict)

    def __post_init__(self):
        for n in self.dag.nodes:
            if n.name not in self.cpts:
                raise ValueError(f"missing CPT for {n.name}")
            if self.cpts[n.name].parents != self.dag.parents(n.name):
                raise ValueError(f"CPT parents of {n.name} disagree with the DAG")
        self._cache: dict = {}

    @property
    def cardinalities(self) -> dict[str, int]:
        return {n.name: n.cardinality for n in self.dag.nodes}

    @property
    def qos_node(self) -> str | None:
        for n in self.dag.nodes:
            if n.role == QOS_METRIC:
                return n.name
        return None

    def node(self, name: str) -> NodeSpec:
        return self.dag.node(name)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "nodes": [{"name": n.name, "cardinality": n.cardinality, "role": n.role, "tunable": n.tunable}
                      for n in self.dag.nodes],
            "ordering": list(self.dag.ordering),
            "edges": [[u, v] for u, v in sorted(self.dag.edges,
                                                key=lambda e: (self.dag.ordering.index(e[1]),
                                                               self.dag.ordering.index(e[0])))],
            "cpts": {
                name: {"parents": list(self.cpts[name].parents),
                       "rows": [[_real(p) for p in row] for row in self.cpts[name].table]}
                for name in self.dag.ordering
            },
            "schemes": {name: self.schemes[name].to_dict() for name in self.dag.ordering if name in self.schemes},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BayesianNetworkModel":
        nodes = tuple(NodeSpec(n["name"], int(n["cardinality"]), n["role"], bool(n["tunable"])) for n in d["nodes"])
        dag = Dag(nodes, frozenset((u, v) for u, v in d["edges"]), tuple(d["ordering"]))
        cpts = {name: Cpt(name, tuple(c["parents"]), np.array(c["rows"], dtype=float))
                for name, c in d["cpts"].items()}
        schemes = {name: DiscretizationScheme.from_dict(s) for name, s in d.get("schemes", {}).items()}
        return cls(dag, cpts, schemes)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BayesianNetworkModel":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# structure learning


def _joint_index(data: TraceDataset, names: Sequence[str]) -> tuple[np.ndarray, int]:
    """Mixed-radix configuration index of each row over ``names``."""
    idx = np.zeros(data.n_rows, dtype=np.int64)
    size = 1
    for name in names:
        r = data.cardinalities[name]
        idx = idx * r + data.column(name)
        size *= r
    return idx, size


def mutual_information(data: TraceDataset, x: str, y: str) -> float:
    """Plug-in mutual information (nats) from the empirical joint counts."""
    n = data.n_rows
    if n == 0:
        return 0.0
    rx, ry = data.cardinalities[x], data.cardinalities[y]
    counts = np.zeros((rx, ry))
    np.add.at(counts, (data.column(x), data.column(y)), 1)
    pxy = counts / n
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))


def conditional_mutual_information(data: TraceDataset, x: str, y: str, given: Sequence[str]) -> float:
    """Plug-in I(x; y | given) in nats."""
    n = data.n_rows
    if n == 0:
        return 0.0
    z, rz = _joint_index(data, list(given))
    rx, ry = data.cardinalities[x], data.cardinalities[y]
    counts = np.zeros((rz, rx, ry))
    np.add.at(counts, (z, data.column(x), data.column(y)), 1)
    nz_ = counts.sum(axis=(1, 2), keepdims=True)
    nxz = counts.sum(axis=2, keepdims=True)
    nyz = counts.sum(axis=1, keepdims=True)
    m = counts > 0
    ratio = (counts * nz_ / np.where(nxz * nyz > 0, nxz * nyz, 1))[m]
    return float(np.sum(counts[m] / n * np.log(ratio)))


def order_nodes(data: TraceDataset, qos_node: str) -> tuple[str, ...]:
    """Contexts by decreasing mutual information with the QoS node, QoS last."""
    if qos_node not in data:
        raise MissingColumn(qos_node)
    if len(data.columns) < 2:
        raise ValueError("need at least one context column besides the QoS node")
    contexts = [c for c in data.columns if c != qos_node]
    scored = [(-mutual_information(data, c, qos_node), c) for c in contexts]
    return tuple(c for _, c in sorted(scored)) + (qos_node,)


def family_counts(node: str, parents: Sequence[str], data: TraceDataset) -> np.ndarray:
    """Counts ``N_ijk`` as a (parent configurations x node values) array."""
    j, q = _joint_index(data, list(parents))
    r = data.cardinalities[node]
    counts = np.bincount(j * r + data.column(node), minlength=q * r)
    return counts.reshape(q, r).astype(float)


def ch_score(node: str, parents: Sequence[str], data: TraceDataset) -> float:
    """Log Cooper-Herskovits (K2) family score.

    ``sum_j [lnG(r) - lnG(N_ij + r) + sum_k lnG(N_ijk + 1)]``.  Unobserved
    parent configurations contribute zero.
    """
    if node in parents:
        raise ValueError(f"{node} cannot be its own parent")
    counts = family_counts(node, parents, data)
    r = counts.shape[1]
    n_ij = counts.sum(axis=1)
    return float(np.sum(gammaln(r) - gammaln(n_ij + r)) + np.sum(gammaln(counts + 1)))


def k2_learn(data: TraceDataset, ordering: Sequence[str], max_parents: int = DEFAULT_MAX_PARENTS,
             nodes: Sequence[NodeSpec] | None = None) -> Dag:
    """Greedy K2 parent search under a fixed node ordering."""
    ordering = tuple(ordering)
    if sorted(ordering) != sorted(data.columns):
        raise ValueError("ordering must be a permutation of the dataset columns")
    if max_parents < 1:
        raise ValueError("max_parents must be >= 1")
    if nodes is None:
        nodes = [NodeSpec(c, data.cardinalities[c]) for c in ordering]
    edges = set()
    if data.n_rows > 0:
        for i, node in enumerate(ordering):
            parents: list[str] = []
            score = ch_score(node, parents, data)
            candidates = list(ordering[:i])
            while len(parents) < max_parents:
                best = None
                for cand in candidates:
                    if cand in parents:
                        continue
                    s = ch_score(node, parents + [cand], data)
                    if best is None or s > best[0]:
                        best = (s, cand)
                if best is None or best[0] <= score:
                    break
                score = best[0]
                parents.append(best[1])
            edges.update((p, node) for p in parents)
    return Dag(tuple(nodes), frozenset(edges), ordering)


def learn_parameters(dag: Dag, data: TraceDataset, alpha: float = DEFAULT_ALPHA) -> dict[str, Cpt]:
    """Posterior-mean CPTs under a symmetric Dirichlet(alpha) prior."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    cpts = {}
    for node in dag.names:
        parents = dag.parents(node)
        counts = family_counts(node, parents, data) if data.n_rows else \
            np.zeros((int(np.prod([dag.node(p).cardinality for p in parents], dtype=np.int64)),
                      dag.node(node).cardinality))
        r = counts.shape[1]
        table = (counts + alpha) / (counts.sum(axis=1, keepdims=True) + r * alpha)
        cpts[node] = Cpt(node, parents, table)
    return cpts


def learn_model(data: TraceDataset, qos_node: str, tunable: Iterable[str] = (),
                max_parents: int = DEFAULT_MAX_PARENTS, alpha: float = DEFAULT_ALPHA,
                schemes: Mapping[str, DiscretizationScheme] | None = None,
                ordering: Sequence[str] | None = None) -> BayesianNetworkModel:
    """Order nodes, learn the structure with K2 and fit the CPTs."""
    tunable = set(tunable)
    if ordering is None:
        ordering = order_nodes(data, qos_node)
    nodes = [NodeSpec(c, data.cardinalities[c], QOS_METRIC if c == qos_node else CONTEXT, c in tunable)
             for c in ordering]
    dag = k2_learn(data, ordering, max_parents, nodes=nodes)
    return BayesianNetworkModel(dag, learn_parameters(dag, data, alpha), dict(schemes or {}))


# ---------------------------------------------------------------------------
# inference


def _check_query(model: BayesianNetworkModel, evidence: Evidence, query: str):
    card = model.cardinalities
    if query not in card:
        raise UnknownNode(query)
    for name, label in evidence.items():
        if name not in card:
            raise UnknownNode(name)
        if not 0 <= int(label) < card[name]:
            raise ValueError(f"evidence {name}={label} outside [0, {card[name]})")


def _point_mass(r: int, k: int) -> np.ndarray:
    out = np.zeros(r)
    out[k] = 1.0
    return out


def _normalize(values: np.ndarray) -> np.ndarray:
    total = values.sum()
    if not total > 0:
        raise ImpossibleEvidence("evidence has zero probability under the model")
    return values / total


def _min_degree_order(factors: list[Factor], to_eliminate: set[str]) -> list[str]:
    neighbours = {v: set() for v in to_eliminate}
    scopes = [set(f.variables) for f in factors]
    order = []
    remaining = set(to_eliminate)
    while remaining:
        for v in remaining:
            neighbours[v] = set().union(*[s for s in scopes if v in s]) - {v}
        v = min(remaining, key=lambda x: (len(neighbours[x]), x))
        merged = neighbours[v]
        scopes = [s for s in scopes if v not in s] + [merged]
        remaining.discard(v)
        order.append(v)
    return order


def infer_marginal(model: BayesianNetworkModel, evidence: Evidence, query: str) -> np.ndarray:
    """Exact ``P(query | evidence)`` by variable elimination (min-degree order)."""
    evidence = {k: int(v) for k, v in evidence.items()}
    _check_query(model, evidence, query)
    card = model.cardinalities
    if query in evidence:
        return _point_mass(card[query], evidence[query])
    key = (query, tuple(sorted(evidence.items())))
    cached = model._cache.get(key)
    if cached is not None:
        return cached.copy()

    # only ancestors of query and evidence matter (barren nodes sum to one)
    relevant = _ancestral_set(model.dag, {query} | set(evidence))
    factors = [model.cpts[n].factor(card).reduce(evidence) for n in model.dag.names if n in relevant]
    hidden = {v for f in factors for v in f.variables} - {query}
    for var in _min_degree_order(factors, hidden):
        touching = [f for f in factors if var in f.variables]
        factors = [f for f in factors if var not in f.variables]
        product = touching[0]
        for f in touching[1:]:
            product = product * f
        factors.append(product.sum_out(var))
    result = Factor((), np.array(1.0))
    for f in factors:
        result = result * f
    out = _normalize(np.asarray(result.values, dtype=float).reshape(card[query]))
    out.flags.writeable = False
    model._cache[key] = out
    return out.copy()


def _ancestral_set(dag: Dag, names: set[str]) -> set[str]:
    out = set()
    stack = list(names)
    while stack:
        n = stack.pop()
        if n in out:
            continue
        out.add(n)
        stack.extend(dag.parents(n))
    return out


def joint_enumerate(model: BayesianNetworkModel, evidence: Evidence, query: str) -> np.ndarray:
    """Brute-force ``P(query | evidence)`` from the full joint table.

    Builds ``prod_v P(v | parents(v))`` over every complete assignment and
    sums out everything but the query; used as a test oracle.
    """
    evidence = {k: int(v) for k, v in evidence.items()}
    _check_query(model, evidence, query)
    names = list(model.dag.names)
    card = model.cardinalities
    shape = [card[n] for n in names]
    if int(np.prod(shape, dtype=np.int64)) > ENUMERATION_LIMIT:
        raise StateSpaceTooLarge(f"joint state space {shape} exceeds {ENUMERATION_LIMIT}")
    grids = np.indices(shape, sparse=True)
    axis = {n: i for i, n in enumerate(names)}
    joint = np.ones(shape)
    for n in names:
        cpt = model.cpts[n]
        j = np.zeros([1] * len(names), dtype=np.int64)
        for p in cpt.parents:
            j = j * card[p] + grids[axis[p]]
        joint = joint * cpt.table[j, grids[axis[n]]]
    mask = np.ones(shape, dtype=bool)
    for name, label in evidence.items():
        mask &= grids[axis[name]] == label
    joint = np.where(mask, joint, 0.0)
    other = tuple(i for i, n in enumerate(names) if n != query)
    return _normalize(joint.sum(axis=other))


def sample(model: BayesianNetworkModel, n: int, rng: np.random.Generator) -> TraceDataset:
    """Ancestral sampling of ``n`` complete rows."""
    names = model.dag.topological_order()
    card = model.cardinalities
    cols: dict[str, np.ndarray] = {}
    for name in names:
        cpt = model.cpts[name]
        j = np.zeros(n, dtype=np.int64)
        for p in cpt.parents:
            j = j * card[p] + cols[p]
        cdf = np.cumsum(cpt.table[j], axis=1)
        u = rng.random(n)[:, None]
        cols[name] = np.minimum((u >= cdf).sum(axis=1), card[name] - 1)
    ordered = list(model.dag.names)
    return TraceDataset(ordered, np.column_stack([cols[c] for c in ordered]), card)


def random_model(rng: np.random.Generator, n_nodes: int = 5, card_range=(2, 4), edge_prob: float = 0.5,
                 max_parents: int | None = None, concentration: float = 1.0) -> BayesianNetworkModel:
    """Random DAG over ``X0..X{n-1}`` (edges follow index order) with Dirichlet CPTs."""
    names = [f"X{i}" for i in range(n_nodes)]
    cards = {n: int(rng.integers(card_range[0], card_range[1] + 1)) for n in names}
    edges = set()
    for j in range(n_nodes):
        cands = [i for i in range(j) if rng.random() < edge_prob]
        if max_parents is not None and len(cands) > max_parents:
            cands = sorted(rng.choice(cands, size=max_parents, replace=False).tolist())
        edges.update((names[i], names[j]) for i in cands)
    nodes = tuple(NodeSpec(n, cards[n]) for n in names)
    dag = Dag(nodes, frozenset(edges), tuple(names))
    cpts = {}
    for n in names:
        parents = dag.parents(n)
        q = int(np.prod([cards[p] for p in parents], dtype=np.int64))
        cpts[n] = Cpt(n, parents, rng.dirichlet([concentration] * cards[n], size=q))
    return BayesianNetworkModel(dag, cpts)
