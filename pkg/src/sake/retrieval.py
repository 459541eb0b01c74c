"""Ranking, retrieval metrics, evaluation, and the improvement analysis.

Queries rank the full gallery by cosine distance over embeddings or
Hamming distance over binary codes; ties break by ascending gallery id.
Average precision is the non-interpolated form normalized by the total
relevant count (truncated at K for the @K variants). `evaluate` guards
the zero-shot premise: every query and gallery class must belong to the
declared target set.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ZeroShotViolation
from .hashing import BinaryCode, ItqCodec, encode_many, hamming_many
from .model import ModelParams, classify_original, embed_samples


@dataclass
class RankedList:
    query_id: int
    gallery_ids: np.ndarray  # gallery positions, best match first
    distances: np.ndarray    # non-decreasing
    relevance: np.ndarray    # uint8, aligned with gallery_ids


@dataclass
class MetricReport:
    metric: str
    map_all: float
    map_at: dict[int, float]
    prec_at: dict[int, float]
    per_class_ap: dict[int, float]
    query_count: int
    excluded_queries: int = 0
    code_length: int | None = None

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "map_all": self.map_all,
            "map_at": {str(k): v for k, v in sorted(self.map_at.items())},
            "prec_at": {str(k): v for k, v in sorted(self.prec_at.items())},
            "per_class_ap": {str(c): v for c, v in
                             sorted(self.per_class_ap.items())},
            "query_count": self.query_count,
            "excluded_queries": self.excluded_queries,
            "code_length": self.code_length,
        }


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cosine similarity, in [0, 2]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ContractViolation("cosine distance undefined for a zero vector")
    return float(1.0 - (u @ v) / (nu * nv))


def _cosine_distances(query: np.ndarray, gallery: np.ndarray,
                      query_id: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ContractViolation(f"query {query_id} embeds to the zero vector")
    gn = np.linalg.norm(g, axis=1)
    zero = np.flatnonzero(gn == 0.0)
    if zero.size:
        raise ContractViolation(
            f"gallery item {int(zero[0])} embeds to the zero vector")
    return 1.0 - (g @ q) / (gn * qn)


def rank(query, gallery, metric: str, query_label=None, gallery_labels=None,
         query_id: int = 0) -> RankedList:
    """Sort the whole gallery for one query; ties break by ascending id."""
    if metric == "cosine":
        if isinstance(query, BinaryCode):
            raise ContractViolation("cosine metric expects real vectors")
        dists = _cosine_distances(query, np.asarray(gallery), query_id)
    elif metric == "hamming":
        if not isinstance(query, BinaryCode):
            raise ContractViolation("hamming metric expects binary codes")
        dists = hamming_many(query, list(gallery)).astype(np.float64)
    else:
        raise ContractViolation(f"unknown metric '{metric}'")
    ids = np.arange(len(dists))
    order = np.lexsort((ids, dists))
    relevance = np.zeros(len(dists), dtype=np.uint8)
    if query_label is not None and gallery_labels is not None:
        relevance = (np.asarray(gallery_labels)[order]
                     == query_label).astype(np.uint8)
    return RankedList(query_id, order, dists[order], relevance)


def average_precision(relevance, total_relevant: int) -> float:
    """Non-interpolated AP: mean of precision at each hit, over R."""
    if total_relevant < 1:
        raise ContractViolation("average precision needs >= 1 relevant item")
    bits = np.asarray(relevance, dtype=np.float64)
    hits = np.cumsum(bits)
    precisions = hits / np.arange(1, len(bits) + 1)
    return float((precisions * bits).sum() / total_relevant)


def precision_at_k(relevance, k: int) -> float:
    """Fraction relevant among the top min(k, n)."""
    if k < 1:
        raise ContractViolation("K must be >= 1")
    bits = np.asarray(relevance, dtype=np.float64)
    top = min(k, len(bits))
    return float(bits[:top].sum() / top)


def _per_query_metrics(order_relevance: np.ndarray, total_relevant: int,
                       ks) -> dict:
    out = {"ap": average_precision(order_relevance, total_relevant)}
    for k in ks:
        r_k = min(total_relevant, k)
        out[("map", k)] = average_precision(order_relevance[:k], r_k)
        out[("prec", k)] = precision_at_k(order_relevance, k)
    return out


def _thread_count(n_queries: int) -> int:
    raw = os.environ.get("SAKE_THREADS", "1")
    try:
        requested = max(1, int(raw))
    except ValueError:
        requested = 1
    return max(1, min(requested, n_queries))


def evaluate(queries, gallery, params: ModelParams, metric: str = "cosine",
             ks=(50, 100), codec: ItqCodec | None = None,
             target_classes=None, exclude_self: bool = False) -> MetricReport:
    """Retrieval metrics for query samples against a gallery.

    With metric="hamming" a fitted codec is required: embeddings are
    encoded and ranked by Hamming distance. `exclude_self` removes
    gallery position i from query i's candidate list (photo-query mode,
    where the query set is the gallery itself).
    """
    if not queries or not gallery:
        raise ContractViolation("queries and gallery must be non-empty")
    if target_classes is not None:
        allowed = set(int(c) for c in target_classes)
        for s in queries:
            if s.class_id not in allowed:
                raise ZeroShotViolation(
                    f"query class {s.class_id} is not a target class")
        for s in gallery:
            if s.class_id not in allowed:
                raise ZeroShotViolation(
                    f"gallery class {s.class_id} is not a target class")
    if exclude_self and len(queries) != len(gallery):
        raise ContractViolation(
            "self-exclusion requires queries aligned with the gallery")

    q_feats = embed_samples(params, queries)
    g_feats = embed_samples(params, gallery)
    if metric == "hamming":
        if codec is None:
            raise ContractViolation("hamming metric requires a fitted codec")
        q_codes = encode_many(codec, q_feats)
        g_codes = encode_many(codec, g_feats)
    elif metric != "cosine":
        raise ContractViolation(f"unknown metric '{metric}'")

    g_labels = np.array([s.class_id for s in gallery])
    q_labels = np.array([s.class_id for s in queries])

    def one(i: int) -> dict | None:
        if metric == "cosine":
            dists = _cosine_distances(q_feats[i], g_feats, i)
        else:
            dists = hamming_many(q_codes[i], g_codes).astype(np.float64)
        ids = np.arange(len(gallery))
        keep = ids != i if exclude_self else slice(None)
        dists, ids = dists[keep], ids[keep]
        order = np.lexsort((ids, dists))
        rel = (g_labels[ids][order] == q_labels[i]).astype(np.float64)
        total = int(rel.sum())
        if total == 0:
            return None
        return _per_query_metrics(rel, total, ks)

    workers = _thread_count(len(queries))
    if workers == 1:
        results = [one(i) for i in range(len(queries))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(len(queries))))

    kept = [(i, r) for i, r in enumerate(results) if r is not None]
    if not kept:
        raise ContractViolation("every query had zero relevant gallery items")
    aps = np.array([r["ap"] for _, r in kept])
    report = MetricReport(
        metric=metric,
        map_all=float(aps.mean()),
        map_at={k: float(np.mean([r[("map", k)] for _, r in kept]))
                for k in ks},
        prec_at={k: float(np.mean([r[("prec", k)] for _, r in kept]))
                 for k in ks},
        per_class_ap={},
        query_count=len(kept),
        excluded_queries=len(results) - len(kept),
        code_length=codec.code_length if metric == "hamming" else None,
    )
    by_class: dict[int, list[float]] = {}
    for i, r in kept:
        by_class.setdefault(int(q_labels[i]), []).append(r["ap"])
    report.per_class_ap = {c: float(np.mean(v))
                           for c, v in sorted(by_class.items())}
    return report


def format_report(report: MetricReport, class_nodes=None) -> str:
    """Aligned plain-text rendering of a MetricReport."""
    lines = [f"metric: {report.metric}"
             + (f" (c={report.code_length})" if report.code_length else ""),
             f"queries: {report.query_count}"
             + (f" (+{report.excluded_queries} excluded)"
                if report.excluded_queries else ""),
             f"mAP@all: {report.map_all:.4f}"]
    for k in sorted(report.map_at):
        lines.append(f"mAP@{k}: {report.map_at[k]:.4f}")
    for k in sorted(report.prec_at):
        lines.append(f"Prec@{k}: {report.prec_at[k]:.4f}")
    lines.append("")
    lines.append(f"{'class':>8}  {'AP':>8}  name")
    for cid, ap in sorted(report.per_class_ap.items()):
        name = class_nodes.get(cid, "") if class_nodes else ""
        lines.append(f"{cid:>8}  {ap:>8.4f}  {name}")
    return "\n".join(lines) + "\n"


def export_embeddings_csv(path, samples, feats: np.ndarray) -> None:
    """(id, class, modality, M feature columns) — external-plotting hook."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "class", "modality"]
                        + [f"e{j}" for j in range(feats.shape[1])])
        for i, s in enumerate(samples):
            writer.writerow([i, s.class_id, s.modality]
                            + [f"{v:.6g}" for v in feats[i]])


def teacher_confidences(teacher: ModelParams, samples) -> dict[int, float]:
    """Per-class mean of the teacher's top softmax probability."""
    feats = embed_samples(teacher, samples)
    probs = classify_original(feats, teacher)
    top = probs.max(axis=1)
    by_class: dict[int, list[float]] = {}
    for s, conf in zip(samples, top):
        by_class.setdefault(s.class_id, []).append(float(conf))
    return {c: float(np.mean(v)) for c, v in sorted(by_class.items())}


def analyze_improvement_groups(deltas: dict[int, float],
                               confidences: dict[int, float],
                               lch: dict[int, float]) -> dict:
    """Tercile summary of per-class mAP improvements.

    Classes sort by (delta, class id); the low/medium/high groups take
    n//3 classes each, with any remainder dropped between the medium and
    high groups (the extremes stay intact) and reported.
    """
    classes = sorted(deltas)
    n = len(classes)
    if n < 3:
        raise ContractViolation(f"need >= 3 classes to form terciles, got {n}")
    if set(confidences) != set(classes) or set(lch) != set(classes):
        raise ContractViolation("confidence/similarity tables must cover "
                                "exactly the delta classes")
    ordered = sorted(classes, key=lambda c: (deltas[c], c))
    g = n // 3
    groups = {
        "low": ordered[:g],
        "medium": ordered[g:2 * g],
        "high": ordered[n - g:],
    }
    dropped = ordered[2 * g:n - g]
    values = [deltas[c] for c in classes]
    degenerate = len(set(values)) < len(values)

    summary = []
    for name in ("low", "medium", "high"):
        members = groups[name]
        summary.append({
            "group": name,
            "classes": [int(c) for c in members],
            "mean_delta": float(np.mean([deltas[c] for c in members])),
            "mean_teacher_confidence": float(
                np.mean([confidences[c] for c in members])),
            "mean_lch_to_nearest_original": float(
                np.mean([lch[c] for c in members])),
        })
    conf_means = [s["mean_teacher_confidence"] for s in summary]
    lch_means = [s["mean_lch_to_nearest_original"] for s in summary]
    return {
        "groups": summary,
        "dropped_classes": [int(c) for c in dropped],
        "degenerate_ties": degenerate,
        "confidence_high_ge_low": conf_means[2] >= conf_means[0],
        "confidence_monotone": conf_means[0] <= conf_means[1] <= conf_means[2],
        "lch_high_ge_low": lch_means[2] >= lch_means[0],
        "lch_monotone": lch_means[0] <= lch_means[1] <= lch_means[2],
    }


def format_analysis(analysis: dict) -> str:
    lines = [f"{'group':>8}  {'classes':>16}  {'mean dmAP':>10}  "
             f"{'teacher conf':>12}  {'LCh nearest':>11}"]
    for g in analysis["groups"]:
        cls = ",".join(str(c) for c in g["classes"])
        lines.append(f"{g['group']:>8}  {cls:>16}  {g['mean_delta']:>10.4f}  "
                     f"{g['mean_teacher_confidence']:>12.4f}  "
                     f"{g['mean_lch_to_nearest_original']:>11.4f}")
    if analysis["dropped_classes"]:
        lines.append(f"dropped: {analysis['dropped_classes']}")
    if analysis["degenerate_ties"]:
        lines.append("note: tied deltas broken by class id (degenerate)")
    lines.append(f"confidence high >= low: {analysis['confidence_high_ge_low']}")
    lines.append(f"LCh high >= low: {analysis['lch_high_ge_low']}")
    return "\n".join(lines) + "\n"
