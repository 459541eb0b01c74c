"""Taxonomy parsing, the two similarity measures, and the class matrix.

Frozen oracle values (tree depth D = 4, natural logs):
  path similarity   1/(1+d):   d=1 -> 0.5,  d=2 -> 1/3
  LCh  -ln((d+1)/(2D)):        d=0 -> ln 8 = 2.0794415416798357
                               d=1 -> ln 4 = 1.3862943611198906
"""

import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sake.errors import NodeLookupError, TaxonomyParseError
from sake.taxonomy import (Taxonomy, build_similarity_matrix, lch_similarity,
                           load_class_map, load_taxonomy,
                           nearest_original_lch, path_similarity)

LN8 = 2.0794415416798357
LN4 = 1.3862943611198906


def write_tax(tmp_path, text, name="t.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ------------------------------------------------------------------ parsing

def test_minimal_two_edge_tree(tmp_path):
    t = load_taxonomy(write_tax(tmp_path, "entity\tanimal\nentity\tvehicle\n"))
    assert t.root == "entity"
    assert t.depth == 2
    assert sorted(t.leaves()) == ["animal", "vehicle"]
    assert len(t) == 3


def test_comments_and_blank_lines_are_skipped(tmp_path):
    t = load_taxonomy(write_tax(tmp_path, "# header\n\na\tb\n\n# tail\na\tc\n"))
    assert t.root == "a" and len(t) == 3


def test_cycle_without_root_is_rejected(tmp_path):
    with pytest.raises(TaxonomyParseError) as exc:
        load_taxonomy(write_tax(tmp_path, "a\tb\nb\ta\n"))
    assert "cycle" in str(exc.value)


def test_cycle_off_the_root_is_rejected(tmp_path):
    with pytest.raises(TaxonomyParseError) as exc:
        load_taxonomy(write_tax(tmp_path, "r\ta\nb\tc\nc\tb\n"))
    assert "cycle" in str(exc.value)


def test_multiple_roots_are_rejected(tmp_path):
    with pytest.raises(TaxonomyParseError) as exc:
        load_taxonomy(write_tax(tmp_path, "a\tb\nc\td\n"))
    assert "multiple roots" in str(exc.value)


def test_duplicate_child_cites_its_line(tmp_path):
    with pytest.raises(TaxonomyParseError) as exc:
        load_taxonomy(write_tax(tmp_path, "a\tb\nc\tb\n"))
    assert exc.value.line_no == 2


def test_self_loop_is_rejected(tmp_path):
    with pytest.raises(TaxonomyParseError):
        load_taxonomy(write_tax(tmp_path, "a\ta\n"))


def test_malformed_line_cites_its_line(tmp_path):
    with pytest.raises(TaxonomyParseError) as exc:
        load_taxonomy(write_tax(tmp_path, "a\tb\nno-tab-here\n"))
    assert exc.value.line_no == 2


def test_empty_file_is_rejected(tmp_path):
    with pytest.raises(TaxonomyParseError):
        load_taxonomy(write_tax(tmp_path, "# nothing\n"))


def test_builtin_taxonomy_shape(tax):
    assert tax.depth == 4
    assert len(tax.leaves()) == 40
    # root + 4 groups + 8 families + 40 leaves
    assert len(tax) == 53


# --------------------------------------------------------------- similarity

def test_path_similarity_identity_parent_sibling(tax):
    assert path_similarity(tax, "round_blob_1", "round_blob_1") == 1.0
    assert path_similarity(tax, "round_blob", "round_blob_1") == 0.5
    assert path_similarity(tax, "round_blob_1", "round_blob_2") == \
        pytest.approx(1 / 3, abs=1e-15)


def test_lch_oracle_values(tax):
    assert lch_similarity(tax, "few_gon_2", "few_gon_2") == \
        pytest.approx(LN8, abs=1e-12)
    assert lch_similarity(tax, "few_gon", "few_gon_2") == \
        pytest.approx(LN4, abs=1e-12)


def test_lch_strictly_decreases_with_distance(tax):
    # distances 0..6 are all realized between nodes of the built-in tree
    pairs = [("round_blob_1", "round_blob_1"),   # d=0
             ("round_blob", "round_blob_1"),     # d=1
             ("round_blob_1", "round_blob_2"),   # d=2
             ("curved", "round_blob_1"),         # d=2 via ancestor
             ("round_blob_1", "flat_blob_1"),    # d=4
             ("round_blob_1", "few_gon_1")]      # d=6
    values = [lch_similarity(tax, u, v) for u, v in pairs]
    assert values[0] > values[1] > values[2] == values[3] > values[4] > values[5]


def test_cross_family_path_similarities(tax):
    assert path_similarity(tax, "round_blob_1", "flat_blob_1") == \
        pytest.approx(1 / 5, abs=1e-15)
    assert path_similarity(tax, "round_blob_1", "few_gon_1") == \
        pytest.approx(1 / 7, abs=1e-15)


def test_unknown_node_raises_lookup_error(tax):
    with pytest.raises(NodeLookupError):
        path_similarity(tax, "round_blob_1", "no_such_node")
    with pytest.raises(NodeLookupError):
        tax.path_distance("ghost", "round_blob_1")


def _bfs_distance(parent: dict, u: str, v: str) -> int:
    """Independent oracle: BFS over the undirected tree adjacency."""
    adj: dict[str, list[str]] = {n: [] for n in parent}
    for child, par in parent.items():
        if par is not None:
            adj[child].append(par)
            adj[par].append(child)
    seen = {u: 0}
    q = deque([u])
    while q:
        node = q.popleft()
        if node == v:
            return seen[node]
        for nxt in adj[node]:
            if nxt not in seen:
                seen[nxt] = seen[node] + 1
                q.append(nxt)
    raise AssertionError("disconnected")


def test_path_distance_matches_bfs_oracle_everywhere(tax):
    nodes = sorted(tax.parent)
    rng = np.random.default_rng(0)
    for _ in range(200):
        u, v = rng.choice(nodes, size=2)
        assert tax.path_distance(u, v) == _bfs_distance(tax.parent, u, v)


_BUILTIN = None


def _builtin():
    global _BUILTIN
    if _BUILTIN is None:
        from sake.taxonomy import builtin_taxonomy_path
        _BUILTIN = load_taxonomy(builtin_taxonomy_path())
    return _BUILTIN


@given(st.data())
@settings(max_examples=100, deadline=None)
def test_similarities_are_symmetric(data):
    tax = _builtin()
    nodes = sorted(tax.parent)
    u = data.draw(st.sampled_from(nodes))
    v = data.draw(st.sampled_from(nodes))
    assert path_similarity(tax, u, v) == path_similarity(tax, v, u)
    assert lch_similarity(tax, u, v) == lch_similarity(tax, v, u)


def test_path_similarity_is_one_iff_identical(tax):
    nodes = sorted(tax.parent)
    for u in nodes[:12]:
        for v in nodes:
            sim = path_similarity(tax, u, v)
            assert (sim == 1.0) == (u == v)
            assert 0.0 < sim <= 1.0


# ------------------------------------------------------------- class matrix

def test_matrix_toy_instance_matches_brute_force(tmp_path):
    t = load_taxonomy(write_tax(
        tmp_path, "root\tleft\nroot\tright\nleft\ta\nleft\tb\nright\tc\n"))
    nodes = {0: "a", 1: "b", 2: "c", 3: "left", 4: "right", 5: "root", 6: "a"}
    mat = build_similarity_matrix(t, nodes, [0, 1, 2], [3, 4, 5, 6])
    for i, k in enumerate([0, 1, 2]):
        for j, m in enumerate([3, 4, 5, 6]):
            d = _bfs_distance(t.parent, nodes[k], nodes[m])
            assert mat.values[i, j] == pytest.approx(1 / (1 + d), abs=1e-7)


def test_matrix_colocated_class_scores_one(tax, class_map):
    # class 0 sits in both the source and original sets of the default split
    mat = build_similarity_matrix(tax, class_map, [0, 3], [0, 1])
    assert mat.values[0, 0] == 1.0
    assert mat.row(0)[0] == 1.0
    assert np.all(mat.values > 0.0) and np.all(mat.values <= 1.0)


def test_matrix_row_lookup_and_unknown_class(tax, class_map):
    mat = build_similarity_matrix(tax, class_map, [0, 3], [0, 1])
    assert np.array_equal(mat.row(3), mat.values[1])
    with pytest.raises(NodeLookupError):
        mat.row(99)
    with pytest.raises(NodeLookupError):
        build_similarity_matrix(tax, class_map, [0, 777], [0])


def test_nearest_original_lch_picks_the_sibling(tax, class_map):
    # target class 4 (round_blob_5): nearest originals are sibling leaves
    # at distance 2 -> -ln(3/8)
    out = nearest_original_lch(tax, class_map, [4], [0, 1, 35])
    assert out[4] == pytest.approx(-math.log(3 / 8), abs=1e-12)
    # an original class queried against itself scores the d=0 ceiling
    assert nearest_original_lch(tax, class_map, [0], [0, 1])[0] == \
        pytest.approx(LN8, abs=1e-12)


# ---------------------------------------------------------------- class map

def test_class_map_parses_builtin(tax, class_map):
    assert len(class_map) == 40
    assert class_map[0] == "round_blob_1"
    assert class_map[39] == "plus_cross_5"


def test_class_map_rejects_bad_rows(tmp_path, tax):
    for text, fragment in [
        ("0\tround_blob_1\n0\tflat_blob_1\n", "duplicate"),
        ("0\tno_such_leaf\n", "unknown node"),
        ("x\tround_blob_1\n", "bad class id"),
        ("0 round_blob_1\n", "expected"),
    ]:
        with pytest.raises(TaxonomyParseError) as exc:
            load_class_map(write_tax(tmp_path, text, "m.tsv"), tax)
        assert fragment in str(exc.value)


def test_class_map_error_carries_line_number(tmp_path, tax):
    text = "0\tround_blob_1\n# fine\n1\tghost_node\n"
    with pytest.raises(TaxonomyParseError) as exc:
        load_class_map(write_tax(tmp_path, text, "m.tsv"), tax)
    assert exc.value.line_no == 3


def test_taxonomy_constructor_distance_identity():
    t = Taxonomy({"r": None, "a": "r", "b": "a"}, "r")
    assert t.path_distance("b", "r") == 2
    assert t.depth == 3
