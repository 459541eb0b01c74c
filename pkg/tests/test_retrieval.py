"""Ranking, AP/precision oracles, evaluate vs brute force, terciles."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sake.data import PHOTO, SKETCH, Sample
from sake.errors import ContractViolation, ZeroShotViolation
from sake.model import ModelConfig, classify_original, embed_samples, init_params
from sake.retrieval import (MetricReport, analyze_improvement_groups,
                            average_precision, cosine_distance,
                            evaluate, format_analysis, format_report,
                            precision_at_k, rank, teacher_confidences)

TINY = ModelConfig(input_size=8, channels=(3, 5), reduction=2, embed_dim=6,
                   num_source_classes=4, num_original_classes=3)


def make_samples(rng, n, classes, modality=PHOTO):
    out = []
    for i in range(n):
        img = rng.random((1, 8, 8), dtype=np.float32)
        out.append(Sample(img, modality, int(classes[i % len(classes)]), i))
    return out


# ------------------------------------------------------------ AP / Prec@K

def test_average_precision_fixtures():
    assert average_precision([1, 0, 1], 2) == (1.0 + 2.0 / 3.0) / 2.0
    assert average_precision([0, 1, 0, 1], 2) == 0.5


def test_average_precision_prefix_of_hits_is_perfect():
    assert average_precision([1, 1, 1, 0, 0], 3) == 1.0


def test_average_precision_normalizes_by_total_relevant():
    # two of four relevant items fell outside the truncated list
    assert average_precision([1, 0, 1], 4) == (1.0 + 2.0 / 3.0) / 4.0


def test_average_precision_rejects_zero_relevant():
    with pytest.raises(ContractViolation):
        average_precision([0, 0], 0)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=40).filter(sum))
def test_average_precision_bounds_and_perfection(bits):
    ap = average_precision(bits, sum(bits))
    assert 0.0 < ap <= 1.0
    prefix = all(b == 1 for b in bits[:sum(bits)])
    assert (ap == 1.0) == prefix


def test_precision_at_k_oracles():
    rel = [1, 0, 1, 0]
    assert precision_at_k(rel, 1) == 1.0
    assert precision_at_k(rel, 2) == 0.5
    assert precision_at_k(rel, 3) == 2.0 / 3.0
    assert precision_at_k(rel, 10) == 0.5  # truncates at n
    with pytest.raises(ContractViolation):
        precision_at_k(rel, 0)


# ------------------------------------------------------------------ rank

def test_rank_orders_by_distance():
    q = np.array([1.0, 0.0])
    gallery = np.array([[0.0, 1.0], [1.0, 0.1], [-1.0, 0.0]])
    ranked = rank(q, gallery, "cosine")
    assert list(ranked.gallery_ids) == [1, 0, 2]
    assert (np.diff(ranked.distances) >= 0).all()


def test_rank_breaks_ties_by_ascending_id():
    q = np.array([1.0, 0.0])
    gallery = np.array([[2.0, 0.0], [0.0, 3.0], [5.0, 0.0], [1.0, 0.0]])
    ranked = rank(q, gallery, "cosine")
    assert list(ranked.gallery_ids) == [0, 2, 3, 1]


def test_rank_relevance_aligns_with_order():
    q = np.array([1.0, 0.0])
    gallery = np.array([[0.0, 1.0], [1.0, 0.0]])
    ranked = rank(q, gallery, "cosine", query_label=7,
                  gallery_labels=[7, 9])
    assert list(ranked.gallery_ids) == [1, 0]
    assert list(ranked.relevance) == [0, 1]


def test_rank_is_scale_invariant():
    rng = np.random.default_rng(0)
    q = rng.standard_normal(6)
    gallery = rng.standard_normal((30, 6))
    base = rank(q, gallery, "cosine")
    scaled_q = rank(q * 37.0, gallery, "cosine")
    scaled_g = rank(q, gallery * 0.003, "cosine")
    assert np.array_equal(base.gallery_ids, scaled_q.gallery_ids)
    assert np.array_equal(base.gallery_ids, scaled_g.gallery_ids)


def test_rank_metric_type_guards():
    vec = np.ones(4)
    with pytest.raises(ContractViolation):
        rank(vec, np.ones((2, 4)), "euclidean")
    with pytest.raises(ContractViolation):
        rank(vec, np.ones((2, 4)), "hamming")  # real vector, not a code


def test_cosine_distance_oracles():
    assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert cosine_distance([1.0, 2.0], [2.0, 4.0]) == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ContractViolation):
        cosine_distance([0.0, 0.0], [1.0, 0.0])


# ------------------------------------------------- evaluate vs brute force

def brute_force_report(queries, gallery, params, ks, exclude_self=False):
    """Independent exhaustive evaluation: per-pair distances, python sort."""
    qf = embed_samples(params, queries)
    gf = embed_samples(params, gallery)
    kept_ap, kept = [], []
    per_class = {}
    for i in range(len(queries)):
        pairs = sorted(
            (cosine_distance(qf[i], gf[j]), j)
            for j in range(len(gallery)) if not (exclude_self and j == i))
        rel = np.array([float(gallery[j].class_id == queries[i].class_id)
                        for _, j in pairs])
        total = int(rel.sum())
        if total == 0:
            continue
        prec = np.cumsum(rel) / np.arange(1, len(rel) + 1)
        row = {"ap": float((prec * rel).sum() / total)}
        for k in ks:
            top = rel[:k]
            row[("map", k)] = float((np.cumsum(top) / np.arange(1, len(top) + 1)
                                     * top).sum() / min(total, k))
            row[("prec", k)] = float(top[:min(k, len(top))].mean())
        kept.append((i, row))
        kept_ap.append(row["ap"])
        per_class.setdefault(queries[i].class_id, []).append(row["ap"])
    return {
        "map_all": float(np.mean(kept_ap)),
        "map_at": {k: float(np.mean([r[("map", k)] for _, r in kept]))
                   for k in ks},
        "prec_at": {k: float(np.mean([r[("prec", k)] for _, r in kept]))
                    for k in ks},
        "per_class_ap": {c: float(np.mean(v))
                         for c, v in sorted(per_class.items())},
        "query_count": len(kept),
        "excluded_queries": len(queries) - len(kept),
    }


@pytest.fixture(scope="module")
def tiny_params():
    return init_params(TINY, seed=7)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_evaluate_matches_brute_force(tiny_params, seed):
    rng = np.random.default_rng(seed)
    queries = make_samples(rng, 8, [1, 2, 3], modality=SKETCH)
    gallery = make_samples(rng, 30, [1, 2, 3, 4])
    report = evaluate(queries, gallery, tiny_params, ks=(3, 7))
    oracle = brute_force_report(queries, gallery, tiny_params, ks=(3, 7))
    assert report.map_all == oracle["map_all"]
    assert report.map_at == oracle["map_at"]
    assert report.prec_at == oracle["prec_at"]
    assert report.per_class_ap == oracle["per_class_ap"]
    assert report.query_count == oracle["query_count"]
    assert report.excluded_queries == oracle["excluded_queries"]


def test_evaluate_self_exclusion_matches_brute_force(tiny_params):
    rng = np.random.default_rng(11)
    gallery = make_samples(rng, 12, [5, 6])
    with_self = evaluate(gallery, gallery, tiny_params, ks=(5,))
    without = evaluate(gallery, gallery, tiny_params, ks=(5,),
                       exclude_self=True)
    oracle = brute_force_report(gallery, gallery, tiny_params, ks=(5,),
                                exclude_self=True)
    assert without.map_all == oracle["map_all"]
    assert without.per_class_ap == oracle["per_class_ap"]
    # the trivial self-match at distance zero inflates the inclusive run
    assert with_self.map_all > without.map_all


def test_evaluate_excludes_queries_without_relevant_items(tiny_params):
    rng = np.random.default_rng(3)
    queries = make_samples(rng, 4, [1, 9])  # class 9 absent from gallery
    gallery = make_samples(rng, 10, [1, 2])
    report = evaluate(queries, gallery, tiny_params, ks=(3,))
    assert report.excluded_queries == 2
    assert report.query_count == 2
    assert set(report.per_class_ap) == {1}


def test_evaluate_raises_when_no_query_has_relevant_items(tiny_params):
    rng = np.random.default_rng(4)
    queries = make_samples(rng, 3, [8])
    gallery = make_samples(rng, 6, [1, 2])
    with pytest.raises(ContractViolation):
        evaluate(queries, gallery, tiny_params, ks=(3,))


def test_evaluate_guards(tiny_params):
    rng = np.random.default_rng(5)
    queries = make_samples(rng, 3, [1])
    gallery = make_samples(rng, 5, [1, 2])
    with pytest.raises(ContractViolation):
        evaluate([], gallery, tiny_params)
    with pytest.raises(ContractViolation):
        evaluate(queries, [], tiny_params)
    with pytest.raises(ContractViolation):
        evaluate(queries, gallery, tiny_params, metric="hamming")
    with pytest.raises(ContractViolation):
        evaluate(queries, gallery, tiny_params, metric="manhattan")
    with pytest.raises(ContractViolation):
        evaluate(queries, gallery, tiny_params, exclude_self=True)


def test_evaluate_enforces_zero_shot_premise(tiny_params):
    rng = np.random.default_rng(6)
    queries = make_samples(rng, 3, [1])
    gallery = make_samples(rng, 5, [1, 2])
    with pytest.raises(ZeroShotViolation):
        evaluate(queries, gallery, tiny_params, target_classes=[1])
    with pytest.raises(ZeroShotViolation):
        evaluate(queries, gallery, tiny_params, target_classes=[2, 3])
    report = evaluate(queries, gallery, tiny_params, target_classes=[1, 2],
                      ks=(3,))
    assert report.query_count == 3


def test_evaluate_thread_count_does_not_change_results(tiny_params,
                                                       monkeypatch):
    rng = np.random.default_rng(9)
    queries = make_samples(rng, 6, [1, 2], modality=SKETCH)
    gallery = make_samples(rng, 20, [1, 2, 3])
    monkeypatch.setenv("SAKE_THREADS", "1")
    serial = evaluate(queries, gallery, tiny_params, ks=(5,))
    monkeypatch.setenv("SAKE_THREADS", "4")
    threaded = evaluate(queries, gallery, tiny_params, ks=(5,))
    monkeypatch.setenv("SAKE_THREADS", "not-a-number")
    fallback = evaluate(queries, gallery, tiny_params, ks=(5,))
    assert serial.to_dict() == threaded.to_dict() == fallback.to_dict()


def test_metric_report_to_dict_is_json_serializable(tiny_params):
    rng = np.random.default_rng(10)
    queries = make_samples(rng, 4, [1, 2])
    gallery = make_samples(rng, 10, [1, 2])
    report = evaluate(queries, gallery, tiny_params, ks=(3,))
    text = json.dumps(report.to_dict())
    assert json.loads(text)["metric"] == "cosine"


def test_format_report_renders_headline_and_class_rows():
    report = MetricReport(metric="cosine", map_all=0.5,
                          map_at={50: 0.6}, prec_at={50: 0.4},
                          per_class_ap={3: 0.7, 1: 0.3}, query_count=12)
    text = format_report(report, class_nodes={1: "ring_L2"})
    assert "mAP@all: 0.5000" in text
    assert "mAP@50: 0.6000" in text
    assert "Prec@50: 0.4000" in text
    assert "ring_L2" in text


# --------------------------------------------------- teacher confidence

def test_teacher_confidences_match_direct_computation(tiny_params):
    rng = np.random.default_rng(12)
    samples = make_samples(rng, 9, [4, 5, 6])
    table = teacher_confidences(tiny_params, samples)
    feats = embed_samples(tiny_params, samples)
    probs = classify_original(feats, tiny_params)
    for cid in (4, 5, 6):
        rows = [i for i, s in enumerate(samples) if s.class_id == cid]
        assert table[cid] == pytest.approx(
            float(np.mean(probs[rows].max(axis=1))), abs=1e-12)
    assert list(table) == sorted(table)
    assert all(1.0 / 3.0 <= v <= 1.0 for v in table.values())


# ------------------------------------------------------------- terciles

def balanced_tables(n, conf_slope=1.0):
    deltas = {c: 0.01 * c for c in range(n)}
    confid = {c: 0.5 + conf_slope * 0.01 * c for c in range(n)}
    lch = {c: 1.0 + 0.1 * c for c in range(n)}
    return deltas, confid, lch


def test_terciles_partition_nine_classes_evenly():
    deltas, confid, lch = balanced_tables(9)
    out = analyze_improvement_groups(deltas, confid, lch)
    assert [g["classes"] for g in out["groups"]] == \
        [[0, 1, 2], [3, 4, 5], [6, 7, 8]]
    assert out["dropped_classes"] == []
    assert out["confidence_high_ge_low"] and out["confidence_monotone"]
    assert out["lch_high_ge_low"] and out["lch_monotone"]
    assert not out["degenerate_ties"]


def test_terciles_drop_remainder_between_medium_and_high():
    deltas, confid, lch = balanced_tables(10)
    out = analyze_improvement_groups(deltas, confid, lch)
    assert [g["classes"] for g in out["groups"]] == \
        [[0, 1, 2], [3, 4, 5], [7, 8, 9]]
    assert out["dropped_classes"] == [6]
    deltas, confid, lch = balanced_tables(11)
    out = analyze_improvement_groups(deltas, confid, lch)
    assert out["dropped_classes"] == [6, 7]
    assert len(out["groups"][0]["classes"]) == 3


def test_terciles_detect_reversed_confidence():
    deltas, confid, lch = balanced_tables(9, conf_slope=-1.0)
    out = analyze_improvement_groups(deltas, confid, lch)
    assert not out["confidence_high_ge_low"]
    assert not out["confidence_monotone"]


def test_terciles_flag_tied_deltas_and_break_by_class_id():
    deltas = {c: 0.0 for c in range(6)}
    confid = {c: 0.5 for c in range(6)}
    lch = {c: 1.0 for c in range(6)}
    out = analyze_improvement_groups(deltas, confid, lch)
    assert out["degenerate_ties"]
    assert out["groups"][0]["classes"] == [0, 1]
    assert out["groups"][2]["classes"] == [4, 5]


def test_terciles_ignore_dict_insertion_order():
    deltas, confid, lch = balanced_tables(9)
    shuffled = dict(sorted(deltas.items(), key=lambda kv: -kv[0]))
    out1 = analyze_improvement_groups(deltas, confid, lch)
    out2 = analyze_improvement_groups(shuffled, confid, lch)
    assert out1 == out2


def test_terciles_guards():
    deltas, confid, lch = balanced_tables(2)
    with pytest.raises(ContractViolation):
        analyze_improvement_groups(deltas, confid, lch)
    deltas, confid, lch = balanced_tables(9)
    confid.pop(0)
    with pytest.raises(ContractViolation):
        analyze_improvement_groups(deltas, confid, lch)


def test_format_analysis_renders_three_group_table():
    deltas, confid, lch = balanced_tables(10)
    text = format_analysis(analyze_improvement_groups(deltas, confid, lch))
    for g in ("low", "medium", "high"):
        assert g in text
    assert "dropped: [6]" in text
    assert "confidence high >= low: True" in text
