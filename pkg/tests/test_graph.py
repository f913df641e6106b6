import pytest
from hypothesis import given, settings, strategies as st

from cigm.errors import CyclicGraph, DuplicateEdge, DuplicateNode, ParseError, UnknownNode
from cigm.graph import (CausalGraph, complete_from_ordering, load_graph, mutilate, parse_assignment,
                        parse_graph, reverse, serialize_graph, topological_order)

CELEBA_ORDER = ["Young", "Male", "Eyeglasses", "Bald", "Mustache", "Smiling", "Wearing_Lipstick",
                "Mouth_Slightly_Open", "Narrow_Eyes"]


def test_parse_chain():
    g = parse_graph("A -> B\nB -> C")
    assert g.nodes == ("A", "B", "C")
    assert g.edges == {("A", "B"), ("B", "C")}


def test_parse_single_node():
    g = parse_graph("A")
    assert g.nodes == ("A",) and not g.edges


def test_parse_comments_and_blank_lines():
    g = parse_graph("# header\n\nB   # root\nA -> B  # edge\n")
    assert g.nodes == ("B", "A")
    assert g.edges == {("A", "B")}


@pytest.mark.parametrize("text,err", [
    ("A -> B\nB -> A", CyclicGraph),
    ("A -> A", CyclicGraph),
    ("A -> B\nA -> B", DuplicateEdge),
    ("A -> B -> C", ParseError),
    ("A B", ParseError),
    ("-> B", ParseError),
])
def test_parse_errors(text, err):
    with pytest.raises(err):
        parse_graph(text)


def test_parse_error_reports_line():
    with pytest.raises(ParseError) as exc:
        parse_graph("A\nB\nA B C")
    assert exc.value.line == 3


def test_topological_order_examples():
    assert topological_order(CausalGraph([])) == ()
    assert topological_order(parse_graph("A -> B")) == ("A", "B")
    assert topological_order(load_graph("cg1")) == tuple(CELEBA_ORDER)


def test_topological_ties_follow_insertion_order():
    g = parse_graph("C\nB\nA\nA -> B")
    assert topological_order(g) == ("C", "A", "B")


def test_complete_from_ordering():
    assert complete_from_ordering(["A", "B"]).edges == {("A", "B")}
    assert len(complete_from_ordering(CELEBA_ORDER).edges) == 36
    assert not complete_from_ordering(["A"]).edges
    with pytest.raises(DuplicateNode):
        complete_from_ordering(["A", "A"])


def test_reverse():
    assert reverse(parse_graph("A -> B")).edges == {("B", "A")}
    cg1 = load_graph("cg1")
    assert reverse(reverse(cg1)) == cg1
    assert reverse(CausalGraph([])) == CausalGraph([])


def test_bundled_graph_files_agree():
    cg1, rcg1 = load_graph("cg1"), load_graph("rcg1")
    assert cg1 == complete_from_ordering(CELEBA_ORDER)
    assert rcg1.edges == reverse(cg1).edges
    g1 = load_graph("g1")
    assert set(g1.nodes) == set(CELEBA_ORDER)
    assert g1.edges <= cg1.edges
    for child in ("Bald", "Mustache", "Wearing_Lipstick"):
        assert "Male" in g1.parents(child)
    for child in ("Mouth_Slightly_Open", "Narrow_Eyes"):
        assert "Smiling" in g1.parents(child)
    assert not g1.parents("Young") and not g1.parents("Male")


def test_mutilate_examples():
    chain = parse_graph("A -> B\nB -> C")
    assert mutilate(chain, {"B": 1}).edges == {("B", "C")}
    assert mutilate(chain, {"A": 0}) == chain
    complete = parse_graph("A -> B\nB -> C\nA -> C")
    assert mutilate(complete, {"C": 1}).edges == {("A", "B")}
    with pytest.raises(UnknownNode):
        mutilate(chain, {"Z": 1})


def test_parse_assignment():
    assert parse_assignment("Male=1, Young=0") == {"Male": 1, "Young": 0}
    with pytest.raises(ParseError):
        parse_assignment("Male=2")
    with pytest.raises(DuplicateNode):
        parse_assignment("Male=1,Male=0")


@st.composite
def dags(draw, max_nodes=7):
    n = draw(st.integers(0, max_nodes))
    names = [f"v{i}" for i in range(n)]
    # edges only go forward in a hidden permutation, so the result is acyclic
    perm = draw(st.permutations(names))
    pairs = [(perm[i], perm[j]) for i in range(n) for j in range(i + 1, n)]
    edges = [p for p in pairs if draw(st.booleans())]
    return CausalGraph(names, edges)


@settings(max_examples=60, deadline=None)
@given(dags(), st.data())
def test_surgery_keeps_a_valid_order(g, data):
    s = {n: 1 for n in g.nodes if data.draw(st.booleans())}
    m = mutilate(g, s)
    pos = {n: i for i, n in enumerate(topological_order(m))}
    assert all(pos[u] < pos[v] for u, v in m.edges)
    assert m.edges <= g.edges
    assert all(v not in s for _, v in m.edges)


@settings(max_examples=60, deadline=None)
@given(dags())
def test_completion_is_a_supergraph(g):
    assert g.edges <= complete_from_ordering(topological_order(g)).edges


@settings(max_examples=60, deadline=None)
@given(dags())
def test_serialize_round_trip(g):
    assert parse_graph(serialize_graph(g)) == g
