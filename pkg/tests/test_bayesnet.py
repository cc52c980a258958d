import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _models import build_model, chain_model, v_model
from cabin.bayesnet import (
    BayesianNetworkModel,
    Dag,
    NodeSpec,
    TraceDataset,
    ch_score,
    conditional_mutual_information,
    infer_marginal,
    joint_enumerate,
    k2_learn,
    learn_model,
    learn_parameters,
    markov_blanket,
    mutual_information,
    order_nodes,
    parents_of,
    random_model,
    sample,
)
from cabin.errors import ImpossibleEvidence, MissingColumn, StateSpaceTooLarge, UnknownNode


def dataset(**cols):
    return TraceDataset.from_columns(cols)


# -- ordering ------------------------------------------------------------------


def test_informative_context_ordered_first():
    rng = np.random.default_rng(0)
    q = rng.integers(0, 3, 2000)
    data = dataset(B=rng.integers(0, 3, 2000), A=(q + 1) % 3, qos=q)
    assert order_nodes(data, "qos") == ("A", "B", "qos")


def test_single_context_order():
    data = dataset(C=[0, 1, 0, 1], qos=[1, 0, 1, 1])
    assert order_nodes(data, "qos") == ("C", "qos")


def test_duplicate_columns_tie_break_by_name():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 2, 500)
    data = dataset(zeta=x, alpha=x.copy(), qos=(x + rng.integers(0, 2, 500)) % 2)
    assert order_nodes(data, "qos") == ("alpha", "zeta", "qos")


def test_ordering_needs_qos_column():
    with pytest.raises(MissingColumn):
        order_nodes(dataset(A=[0, 1]), "qos")


def test_mutual_information_by_direct_counting():
    data = dataset(x=[0, 0, 1, 1], y=[0, 0, 1, 1])
    assert mutual_information(data, "x", "y") == pytest.approx(math.log(2))
    assert mutual_information(dataset(x=[0, 1, 0, 1], y=[0, 0, 1, 1]), "x", "y") == pytest.approx(0.0, abs=1e-15)


def test_conditional_mi_vanishes_given_the_common_cause():
    rng = np.random.default_rng(2)
    z = rng.integers(0, 2, 20_000)
    flip = lambda: np.where(rng.random(z.size) < 0.1, 1 - z, z)  # noqa: E731
    data = dataset(x=flip(), y=flip(), z=z)
    assert mutual_information(data, "x", "y") > 0.2
    assert conditional_mutual_information(data, "x", "y", ["z"]) < 1e-3


# -- scoring -----------------------------------------------------------------------


def test_score_of_empty_dataset_is_zero():
    data = TraceDataset(["A", "B"], np.zeros((0, 2)), {"A": 3, "B": 2})
    assert ch_score("A", [], data) == 0.0
    assert ch_score("A", ["B"], data) == 0.0


def test_score_closed_form_three_one():
    data = dataset(X=[0, 0, 0, 1])
    expected = math.log(math.factorial(1) * math.factorial(3) * math.factorial(1) / math.factorial(5))
    assert ch_score("X", [], data) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(math.log(0.05))


def test_perfect_parent_beats_no_parent():
    rng = np.random.default_rng(3)
    p = rng.integers(0, 2, 1000)
    data = dataset(P=p, X=p.copy())
    assert ch_score("X", ["P"], data) > ch_score("X", [], data)


def test_score_matches_lgamma_oracle():
    rng = np.random.default_rng(4)
    data = dataset(P=rng.integers(0, 3, 200), X=rng.integers(0, 4, 200))
    expected = 0.0
    for j in range(3):
        rows = data.column("X")[data.column("P") == j]
        counts = np.bincount(rows, minlength=4)
        expected += math.lgamma(4) - math.lgamma(counts.sum() + 4) + sum(math.lgamma(c + 1) for c in counts)
    assert ch_score("X", ["P"], data) == pytest.approx(expected, rel=1e-12)


def test_node_cannot_parent_itself():
    with pytest.raises(ValueError):
        ch_score("X", ["X"], dataset(X=[0, 1]))


# -- structure ---------------------------------------------------------------------


def test_single_node_has_no_edges():
    dag = k2_learn(dataset(A=[0, 1, 1, 0]), ["A"])
    assert dag.edges == frozenset()


def test_chain_recovered():
    rng = np.random.default_rng(5)
    data = sample(chain_model(rng), 5000, rng)
    assert k2_learn(data, ["A", "B", "C"], max_parents=2).edges == {("A", "B"), ("B", "C")}


def test_v_structure_recovered():
    rng = np.random.default_rng(6)
    data = sample(v_model(rng), 5000, rng)
    assert k2_learn(data, ["A", "B", "C"], max_parents=2).edges == {("A", "C"), ("B", "C")}


def test_max_parents_caps_in_degree():
    rng = np.random.default_rng(7)
    data = sample(v_model(rng), 2000, rng)
    dag = k2_learn(data, ["A", "B", "C"], max_parents=1)
    assert len(dag.parents("C")) == 1


def test_ordering_must_cover_the_columns():
    with pytest.raises(ValueError):
        k2_learn(dataset(A=[0], B=[1]), ["A"])


def test_learn_model_marks_roles():
    rng = np.random.default_rng(8)
    data = sample(chain_model(rng), 1000, rng)
    model = learn_model(data, "C", tunable={"B"})
    assert model.qos_node == "C"
    assert model.node("B").tunable and not model.node("A").tunable
    assert model.dag.ordering[-1] == "C"


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_nodes=st.integers(1, 6), rows=st.integers(0, 300),
       max_parents=st.integers(1, 3))
def test_learned_structure_is_acyclic_and_respects_order(seed, n_nodes, rows, max_parents):
    rng = np.random.default_rng(seed)
    truth = random_model(rng, n_nodes)
    data = sample(truth, rows, rng)
    ordering = list(rng.permutation(list(truth.dag.names)))
    dag = k2_learn(data, ordering, max_parents=max_parents)
    dag.topological_order()  # raises on a cycle
    pos = {n: i for i, n in enumerate(ordering)}
    assert all(pos[u] < pos[v] for u, v in dag.edges)
    assert all(len(dag.parents(n)) <= max_parents for n in dag.names)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_score_depends_only_on_the_family(seed):
    rng = np.random.default_rng(seed)
    truth = random_model(rng, 4)
    data = sample(truth, 200, rng)
    noise = rng.integers(0, 3, 200)
    widened = TraceDataset(list(data.columns) + ["N"], np.column_stack([data.data, noise]),
                           {**data.cardinalities, "N": 3})
    assert ch_score("X3", ["X0", "X1"], widened) == ch_score("X3", ["X0", "X1"], data)


# -- parameters --------------------------------------------------------------------


def _lone(name, r):
    return Dag((NodeSpec(name, r),), frozenset(), (name,))


def test_binary_counts_with_unit_prior():
    data = dataset(X=[0] * 7 + [1] * 3)
    cpt = learn_parameters(_lone("X", 2), data, alpha=1.0)["X"]
    assert cpt.table[0] == pytest.approx([8 / 12, 4 / 12])


def test_unseen_parent_configuration_is_uniform():
    nodes = (NodeSpec("P", 2), NodeSpec("X", 4))
    dag = Dag(nodes, frozenset({("P", "X")}), ("P", "X"))
    data = TraceDataset(["P", "X"], [[0, 1], [0, 2], [0, 1]], {"P": 2, "X": 4})
    cpt = learn_parameters(dag, data)["X"]
    assert cpt.table[1] == pytest.approx([0.25] * 4)


def test_vanishing_prior_gives_frequencies():
    rng = np.random.default_rng(9)
    p = rng.integers(0, 2, 400)
    x = (p + (rng.random(400) < 0.3)) % 3
    data = TraceDataset(["P", "X"], np.column_stack([p, x]), {"P": 2, "X": 3})
    dag = Dag((NodeSpec("P", 2), NodeSpec("X", 3)), frozenset({("P", "X")}), ("P", "X"))
    table = learn_parameters(dag, data, alpha=1e-12)["X"].table
    for j in range(2):
        freq = np.bincount(x[p == j], minlength=3) / np.sum(p == j)
        assert table[j] == pytest.approx(freq, abs=1e-9)


def test_alpha_must_be_positive():
    with pytest.raises(ValueError):
        learn_parameters(_lone("X", 2), dataset(X=[0, 1]), alpha=0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rows=st.integers(0, 200), alpha=st.floats(0.01, 10))
def test_cpt_rows_are_strictly_positive_distributions(seed, rows, alpha):
    rng = np.random.default_rng(seed)
    truth = random_model(rng, 4)
    for cpt in learn_parameters(truth.dag, sample(truth, rows, rng), alpha).values():
        assert np.all(cpt.table > 0)
        assert cpt.table.sum(axis=1) == pytest.approx(np.ones(cpt.table.shape[0]), abs=1e-12)


# -- inference ------------------------------------------------------------------------


def test_single_node_marginal_is_its_table():
    model = build_model({"X": 2}, set(), {"X": [[0.3, 0.7]]})
    assert infer_marginal(model, {}, "X") == pytest.approx([0.3, 0.7], abs=1e-15)
    assert joint_enumerate(model, {}, "X") == pytest.approx([0.3, 0.7], abs=1e-15)


def test_evidence_on_the_query_is_a_point_mass():
    rng = np.random.default_rng(10)
    model = random_model(rng, 3, card_range=(3, 3))
    assert infer_marginal(model, {"X1": 2}, "X1").tolist() == [0.0, 0.0, 1.0]


def test_deterministic_copy_inverts():
    model = build_model({"A": 2, "B": 2}, {("A", "B")}, {"A": [[0.6, 0.4]], "B": [[1, 0], [0, 1]]})
    assert joint_enumerate(model, {"B": 1}, "A") == pytest.approx([0, 1])
    assert infer_marginal(model, {"B": 1}, "A") == pytest.approx([0, 1])


def test_impossible_evidence_is_reported():
    model = build_model({"A": 2, "B": 2}, {("A", "B")}, {"A": [[1.0, 0.0]], "B": [[1, 0], [0, 1]]})
    with pytest.raises(ImpossibleEvidence):
        infer_marginal(model, {"B": 1}, "A")


def test_unknown_names_rejected():
    model = build_model({"X": 2}, set(), {"X": [[0.5, 0.5]]})
    with pytest.raises(UnknownNode):
        infer_marginal(model, {}, "Y")
    with pytest.raises(UnknownNode):
        infer_marginal(model, {"Y": 0}, "X")
    with pytest.raises(ValueError):
        infer_marginal(model, {"X": 3}, "X")


def test_enumeration_refuses_huge_joints():
    names = {f"V{i}": 10 for i in range(8)}
    model = build_model(names, set(), {n: [[0.1] * 10] for n in names})
    with pytest.raises(StateSpaceTooLarge):
        joint_enumerate(model, {}, "V0")


def test_cached_result_is_not_shared_mutable_state():
    model = build_model({"X": 2}, set(), {"X": [[0.3, 0.7]]})
    first = infer_marginal(model, {}, "X")
    first[0] = 99.0
    assert infer_marginal(model, {}, "X") == pytest.approx([0.3, 0.7])


def test_inference_agrees_with_hand_computation():
    # A -> B, query A given B=1: Bayes rule by hand
    model = build_model({"A": 2, "B": 2}, {("A", "B")}, {"A": [[0.2, 0.8]], "B": [[0.9, 0.1], [0.4, 0.6]]})
    num = np.array([0.2 * 0.1, 0.8 * 0.6])
    assert infer_marginal(model, {"B": 1}, "A") == pytest.approx(num / num.sum(), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_nodes=st.integers(1, 6))
def test_elimination_matches_enumeration(seed, n_nodes):
    rng = np.random.default_rng(seed)
    model = random_model(rng, n_nodes, concentration=0.7)
    names = list(model.dag.names)
    query = names[int(rng.integers(len(names)))]
    observed = [n for n in names if n != query and rng.random() < 0.4]
    evidence = {n: int(rng.integers(model.cardinalities[n])) for n in observed}
    try:
        oracle = joint_enumerate(model, evidence, query)
    except ImpossibleEvidence:
        return
    assert np.max(np.abs(infer_marginal(model, evidence, query) - oracle)) <= 1e-9


# -- blankets ---------------------------------------------------------------------------


def test_isolated_node_has_empty_sets():
    dag = Dag((NodeSpec("A", 2), NodeSpec("B", 2)), frozenset(), ("A", "B"))
    assert parents_of(dag, "A") == frozenset() and markov_blanket(dag, "A") == frozenset()


def test_blanket_of_a_sink_is_its_parents():
    edges = {("bw", "loss"), ("rate", "loss"), ("bw", "psnr"), ("rate", "psnr"), ("loss", "psnr")}
    dag = Dag(tuple(NodeSpec(n, 2) for n in ("bw", "rate", "loss", "psnr")), frozenset(edges),
              ("bw", "rate", "loss", "psnr"))
    assert markov_blanket(dag, "psnr") == parents_of(dag, "psnr") == {"bw", "rate", "loss"}


def test_blanket_includes_spouses():
    dag = Dag(tuple(NodeSpec(n, 2) for n in "ABC"), frozenset({("A", "C"), ("B", "C")}), ("A", "B", "C"))
    assert markov_blanket(dag, "A") == {"C", "B"}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_nodes=st.integers(2, 6))
def test_blanket_matches_definition(seed, n_nodes):
    dag = random_model(np.random.default_rng(seed), n_nodes).dag
    for x in dag.names:
        children = {v for (u, v) in dag.edges if u == x}
        spouses = {u for (u, v) in dag.edges if v in children} - {x}
        parents = {u for (u, v) in dag.edges if v == x}
        assert markov_blanket(dag, x) == parents | children | spouses


# -- serialization -----------------------------------------------------------------------


def test_dag_rejects_edges_against_the_ordering():
    with pytest.raises(ValueError):
        Dag((NodeSpec("A", 2), NodeSpec("B", 2)), frozenset({("B", "A")}), ("A", "B"))


def test_model_json_round_trip():
    rng = np.random.default_rng(11)
    data = sample(chain_model(rng), 800, rng)
    model = learn_model(data, "C", tunable={"A"})
    text = model.to_json()
    again = BayesianNetworkModel.from_json(text)
    assert again.to_json() == text
    assert again.dag == model.dag
    body = json.loads(text)
    assert set(body) == {"nodes", "ordering", "edges", "cpts", "schemes"}
    for name in model.dag.names:
        assert np.allclose(again.cpts[name].table, model.cpts[name].table, rtol=1e-11, atol=0)
    for evidence in itertools.islice(itertools.product(range(3), repeat=2), 5):
        ev = dict(zip(("A", "B"), evidence))
        assert infer_marginal(again, ev, "C") == pytest.approx(infer_marginal(model, ev, "C"), abs=1e-10)
