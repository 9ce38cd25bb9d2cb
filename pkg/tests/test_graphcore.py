import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ria.graphcore import (AttributedGraph, EnvDataset, LabeledGraph, degree, degrees,
                           from_json_record, induced_subgraph, inverse_permutation, max_degree,
                           permute, read_jsonl, to_json_record, validate, write_jsonl)


@st.composite
def graphs(draw, max_nodes=8, max_dim=3):
    n = draw(st.integers(1, max_nodes))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    edges = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    d = draw(st.integers(0, max_dim))
    x = draw(st.lists(st.floats(-5, 5), min_size=n * d, max_size=n * d))
    return AttributedGraph.build(n, edges, np.array(x).reshape(n, d))


def test_build_normalizes_edges():
    g = AttributedGraph.build(3, [(2, 0), (1, 2)])
    assert g.edges == frozenset({(0, 2), (1, 2)})
    assert g.features.shape == (3, 0)


def test_features_are_copied_and_readonly():
    x = np.ones((2, 2))
    g = AttributedGraph.build(2, [(0, 1)], x)
    x[0, 0] = 5.0
    assert g.features[0, 0] == 1.0
    with pytest.raises(ValueError):
        g.features[0, 0] = 3.0


@pytest.mark.parametrize("kwargs,msg", [
    (dict(num_nodes=2, edges=frozenset({(0, 0)}), features=np.zeros((2, 0))), "self-loop"),
    (dict(num_nodes=2, edges=frozenset({(0, 2)}), features=np.zeros((2, 0))), "endpoint range"),
    (dict(num_nodes=2, edges=frozenset(), features=np.zeros((3, 1))), "row count"),
    (dict(num_nodes=1, edges=frozenset(), features=np.array([[np.nan]])), "non-finite feature"),
])
def test_validate_reports_violation(kwargs, msg):
    g = AttributedGraph(**kwargs)
    assert validate(g) == msg


def test_validate_ok():
    assert validate(AttributedGraph.build(3, [(0, 1), (1, 2)])) is None


def test_degree_queries():
    g = AttributedGraph.build(4, [(0, 1), (0, 2), (0, 3)])
    assert degree(g, 0) == 3
    assert list(degrees(g)) == [3, 1, 1, 1]
    assert max_degree(g) == 3
    with pytest.raises(IndexError):
        degree(g, 4)
    with pytest.raises(ValueError):
        max_degree(AttributedGraph.build(0))


def test_permute_moves_rows():
    x = np.arange(6, dtype=float).reshape(3, 2)
    g = AttributedGraph.build(3, [(0, 1)], x)
    p = permute(g, [2, 0, 1])
    assert p.edges == frozenset({(0, 2)})
    np.testing.assert_array_equal(p.features[2], x[0])
    with pytest.raises(ValueError):
        permute(g, [0, 0, 1])


@given(graphs(), st.randoms())
@settings(max_examples=50, deadline=None)
def test_permute_inverse_roundtrip(g, r):
    perm = list(range(g.num_nodes))
    r.shuffle(perm)
    back = permute(permute(g, perm), inverse_permutation(perm))
    assert back == g
    assert sorted(degrees(permute(g, perm))) == sorted(degrees(g))


def test_induced_subgraph_relabels():
    g = AttributedGraph.build(4, [(0, 1), (1, 3), (2, 3)], np.eye(4))
    s = induced_subgraph(g, [1, 3])
    assert s.num_nodes == 2 and s.edges == frozenset({(0, 1)})
    np.testing.assert_array_equal(s.features, np.eye(4)[[1, 3]])


@given(graphs(), st.integers(0, 3), st.integers(0, 5))
@settings(max_examples=50, deadline=None)
def test_json_record_roundtrip(g, y, env):
    rec = json.loads(json.dumps(to_json_record(LabeledGraph(g, y, env))))
    back = from_json_record(rec)
    assert back.graph == g and back.label == y and back.env == env


@pytest.mark.parametrize("rec", [
    {"n": 2, "edges": [[1, 0]], "x": [[], []], "y": 0, "env": 0},
    {"n": 2, "edges": [[0, 1], [0, 1]], "x": [[], []], "y": 0, "env": 0},
    {"n": 2, "edges": [[0, 2]], "x": [[], []], "y": 0, "env": 0},
    {"n": 2, "edges": [], "x": [[1.0]], "y": 0, "env": 0},
])
def test_json_record_rejects(rec):
    with pytest.raises(ValueError):
        from_json_record(rec)


def test_jsonl_error_has_line_number(tmp_path):
    good = to_json_record(LabeledGraph(AttributedGraph.build(2, [(0, 1)]), 0, 0))
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps(good) + "\n" + json.dumps({**good, "edges": [[1, 1]]}) + "\n")
    with pytest.raises(ValueError, match=":2:"):
        read_jsonl(p)


def test_jsonl_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    samples = [LabeledGraph(AttributedGraph.build(3, [(0, 1), (1, 2)], rng.normal(size=(3, 2))), i % 2, i // 2)
               for i in range(4)]
    write_jsonl(samples, tmp_path / "d.jsonl")
    ds = read_jsonl(tmp_path / "d.jsonl", num_classes=2)
    assert ds.env_ids == (0, 1)
    assert all(a.graph == b.graph for a, b in zip(ds.samples, samples))


def test_env_dataset_checks():
    g = AttributedGraph.build(1)
    with pytest.raises(ValueError):
        EnvDataset((LabeledGraph(g, 2, 0),), 2)
    with pytest.raises(ValueError):
        EnvDataset((LabeledGraph(g, 0, 0),), 2, env_ids=(1,))
    ds = EnvDataset((LabeledGraph(g, 0, 0), LabeledGraph(g, 1, 3)), 2)
    assert ds.subset([3]).env_ids == (3,)
    assert {e: len(v) for e, v in ds.by_env().items()} == {0: 1, 3: 1}
