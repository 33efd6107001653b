import networkx as nx
import pytest

from csync.topology import chain13, three_cluster
from oracles import adjacency, connected_atlas, election_oracle, relabel


def as_graph(topo):
    g = nx.Graph()
    g.add_nodes_from(topo.nodes)
    g.add_edges_from(topo.edges())
    return g


def test_atlas_counts():
    # connected graphs on 1..6 unlabeled nodes
    sizes = [g.number_of_nodes() for g in connected_atlas(6)]
    assert [sizes.count(n) for n in range(1, 7)] == [1, 1, 2, 6, 21, 112]


def test_relabel_keeps_shape():
    g = connected_atlas(6)[100]
    h = relabel(g, 7)
    assert nx.is_isomorphic(g, h) and min(h) >= 1


def test_oracle_three_cluster():
    want = election_oracle(adjacency(as_graph(three_cluster())))
    assert {a for a, r in want["roles"].items() if r == "CH"} == {201, 202, 203}
    assert want["cbh"] == {(201, 202): 11, (202, 203): 12}
    assert want["slot"] == {201: 1, 202: 2, 203: 1}
    assert want["lc"] == {202}


def test_oracle_chain():
    want = election_oracle(adjacency(as_graph(chain13())))
    heads = sorted(a for a, r in want["roles"].items() if r == "CH")
    assert heads == [101, 103, 105, 107, 109, 111]
    assert [want["slot"][a] for a in heads] == [1, 2, 3, 3, 2, 1]
    assert want["lc"] == {105, 107}


@pytest.mark.parametrize("edges, ch", [([(1, 2)], {2}), ([(1, 2), (2, 3)], {2})])
def test_oracle_tiny(edges, ch):
    want = election_oracle(adjacency(nx.Graph(edges)))
    assert {a for a, r in want["roles"].items() if r == "CH"} == ch
