from __future__ import annotations

import pytest

from avan.edges import EdgeGraph, SynapseEdge, load_edges, save_edges


def test_edge_normalizes_and_compares_on_ids():
    a = SynapseEdge(3, (5, 2), (7,), pre_scores={2: 0.4, 5: 0.6})
    b = SynapseEdge(3, [2, 5], [7], flags=("pre_tie",))
    assert a.pre_ids == (2, 5)
    assert a == b
    assert a.same_partners(b)
    assert not a.is_diadic
    assert SynapseEdge(1, (1,), (2,)).is_diadic


def test_edge_requires_both_sides():
    with pytest.raises(ValueError):
        SynapseEdge(1, (), (2,))


def test_graph_rejects_duplicates_and_iterates_sorted():
    g = EdgeGraph([SynapseEdge(9, (1,), (2,)), SynapseEdge(4, (3,), (1,))])
    assert list(g) == [4, 9]
    with pytest.raises(ValueError, match="duplicate"):
        EdgeGraph([SynapseEdge(1, (1,), (2,)), SynapseEdge(1, (3,), (4,))])


def test_graph_roundtrip(tmp_path):
    g = EdgeGraph(
        [SynapseEdge(2, (1,), (3, 4), {1: 0.9}, {3: 0.7, 4: 0.6}, ("post_fallback",), (1, 2, 3))],
        provenance={"seed": 0},
    )
    back = load_edges(save_edges(g, tmp_path / "e.json"))
    e = back[2]
    assert e == g[2]
    assert e.post_scores == {3: 0.7, 4: 0.6}
    assert e.flags == ("post_fallback",) and e.center == (1, 2, 3)
    assert back.provenance == {"seed": 0}
    assert EdgeGraph.from_dict([g[2].to_dict()])[2] == g[2]
