"""Rooted concept tree with the two tree-based similarity measures.

Path similarity 1/(1+d) feeds the class-level similarity matrix used to
blend teacher logits; Leacock-Chodorow similarity -ln((d+1)/(2D)) is
used by the improvement-group analysis. d counts edges on the unique
tree path, D is the maximum node depth with the root at depth 1.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import NodeLookupError, TaxonomyParseError


class Taxonomy:
    """Immutable rooted tree of named concepts."""

    def __init__(self, parent: dict[str, str | None], root: str):
        self.parent = dict(parent)
        self.root = root
        self.depths: dict[str, int] = {root: 1}
        children: dict[str, list[str]] = {n: [] for n in parent}
        for child, par in parent.items():
            if par is not None:
                children[par].append(child)
        stack = [root]
        while stack:
            node = stack.pop()
            for ch in children[node]:
                self.depths[ch] = self.depths[node] + 1
                stack.append(ch)
        self.depth = max(self.depths.values())

    def __contains__(self, node: str) -> bool:
        return node in self.parent

    def __len__(self) -> int:
        return len(self.parent)

    def _require(self, node: str) -> None:
        if node not in self.parent:
            raise NodeLookupError(node)

    def leaves(self) -> list[str]:
        non_leaf = {p for p in self.parent.values() if p is not None}
        return [n for n in self.parent if n not in non_leaf]

    def path_distance(self, u: str, v: str) -> int:
        """Edge count of the unique path between two nodes."""
        self._require(u)
        self._require(v)
        if u == v:
            return 0
        du, dv = self.depths[u], self.depths[v]
        a, b, dist = u, v, 0
        while du > dv:
            a = self.parent[a]
            du -= 1
            dist += 1
        while dv > du:
            b = self.parent[b]
            dv -= 1
            dist += 1
        while a != b:
            a = self.parent[a]
            b = self.parent[b]
            dist += 2
        return dist


def path_similarity(tax: Taxonomy, u: str, v: str) -> float:
    """1 / (1 + d(u, v)); equals 1 exactly when u == v."""
    return 1.0 / (1.0 + tax.path_distance(u, v))


def lch_similarity(tax: Taxonomy, u: str, v: str) -> float:
    """-ln((d(u, v) + 1) / (2 * D)) with D the taxonomy's node depth."""
    d = tax.path_distance(u, v)
    return float(-np.log((d + 1) / (2.0 * tax.depth)))


def _data_lines(path) -> Iterable[tuple[int, str]]:
    text = Path(path).read_text(encoding="utf-8")
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield i, line


def load_taxonomy(path) -> Taxonomy:
    """Parse a tab-separated ``parent<TAB>child`` edge list into a tree.

    Blank lines and '#' comments are skipped. Raises
    :class:`TaxonomyParseError` on duplicate children, self-loops,
    cycles, or multiple roots, citing the offending line.
    """
    parent: dict[str, str | None] = {}
    first_line: dict[str, int] = {}
    for line_no, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0] or not fields[1]:
            raise TaxonomyParseError(line_no, f"expected 'parent<TAB>child', got {line!r}")
        par, child = fields
        if par == child:
            raise TaxonomyParseError(line_no, f"self-loop on {par!r}")
        if child in parent and parent[child] is not None:
            raise TaxonomyParseError(line_no, f"duplicate child {child!r}")
        parent.setdefault(par, None)
        parent[child] = par
        first_line.setdefault(par, line_no)
        first_line.setdefault(child, line_no)
    if not parent:
        raise TaxonomyParseError(0, "empty taxonomy")
    roots = [n for n, p in parent.items() if p is None]
    if not roots:
        some = min(parent, key=lambda n: first_line[n])
        raise TaxonomyParseError(first_line[some], "cycle: no root node exists")
    if len(roots) > 1:
        extra = sorted(roots, key=lambda n: first_line[n])[1]
        raise TaxonomyParseError(
            first_line[extra],
            f"multiple roots: {', '.join(sorted(roots))}")
    tax = Taxonomy(parent, roots[0])
    unreachable = [n for n in parent if n not in tax.depths]
    if unreachable:
        bad = min(unreachable, key=lambda n: first_line[n])
        raise TaxonomyParseError(first_line[bad],
                                 f"cycle involving {bad!r}: unreachable from root")
    return tax


def load_class_map(path, tax: Taxonomy) -> dict[int, str]:
    """Parse ``class_id<TAB>node_name`` lines; every node must exist."""
    mapping: dict[int, str] = {}
    for line_no, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise TaxonomyParseError(line_no, f"expected 'class_id<TAB>node', got {line!r}")
        try:
            cid = int(fields[0])
        except ValueError:
            raise TaxonomyParseError(line_no, f"bad class id {fields[0]!r}") from None
        if cid in mapping:
            raise TaxonomyParseError(line_no, f"duplicate class id {cid}")
        if fields[1] not in tax:
            raise TaxonomyParseError(line_no, f"unknown node {fields[1]!r}")
        mapping[cid] = fields[1]
    return mapping


def builtin_taxonomy_path() -> Path:
    return Path(importlib.resources.files("sake") / "assets" / "taxonomy.tsv")


def builtin_class_map_path() -> Path:
    return Path(importlib.resources.files("sake") / "assets" / "class_map.tsv")


@dataclass
class SimilarityMatrix:
    """Dense class-to-class path similarities, rows = source classes,
    columns = original classes. Entries lie in (0, 1], with 1 exactly on
    co-located classes."""

    source_classes: list[int]
    original_classes: list[int]
    values: np.ndarray  # (|source|, |original|), float32

    def __post_init__(self):
        self._row_of = {c: i for i, c in enumerate(self.source_classes)}

    def row(self, class_id: int) -> np.ndarray:
        if class_id not in self._row_of:
            raise NodeLookupError(class_id)
        return self.values[self._row_of[class_id]]

    def rows(self, class_ids: np.ndarray) -> np.ndarray:
        idx = np.array([self._row_of[int(c)] for c in class_ids])
        return self.values[idx]


def build_similarity_matrix(tax: Taxonomy, class_nodes: dict[int, str],
                            source_classes: list[int],
                            original_classes: list[int]) -> SimilarityMatrix:
    """Precompute path similarity for every (source, original) class pair."""
    for cid in list(source_classes) + list(original_classes):
        if cid not in class_nodes:
            raise NodeLookupError(cid)
    values = np.empty((len(source_classes), len(original_classes)),
                      dtype=np.float32)
    for i, k in enumerate(source_classes):
        for j, m in enumerate(original_classes):
            values[i, j] = path_similarity(tax, class_nodes[k], class_nodes[m])
    return SimilarityMatrix(list(source_classes), list(original_classes), values)


def nearest_original_lch(tax: Taxonomy, class_nodes: dict[int, str],
                         classes, original_classes) -> dict[int, float]:
    """For each class, its highest LCh similarity to any original class."""
    out = {}
    for cid in classes:
        out[int(cid)] = max(
            lch_similarity(tax, class_nodes[cid], class_nodes[o])
            for o in original_classes)
    return out
