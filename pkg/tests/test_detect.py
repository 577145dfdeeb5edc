import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zssmnet import detect
from zssmnet.detect import (CaseHits, DegenerateLabelsError, EvalReport, ExtractParams,
                            NoPositivesError, auroc, average_precision, case_score,
                            extract_lesions, froc_points, match_hits, ranking_score)


# ------------------------------------------------------------ oracles

def ap_bruteforce(cases):
    n_gt = sum(c.n_gt for c in cases)
    hits = [h for c in cases for h in c.hits]
    ap, prev_r = 0.0, 0.0
    for t in sorted({h[0] for h in hits}, reverse=True):
        tp = sum(1 for conf, ok in hits if conf >= t and ok)
        fp = sum(1 for conf, ok in hits if conf >= t and not ok)
        r = tp / n_gt
        ap += (r - prev_r) * tp / (tp + fp)
        prev_r = r
    return ap


def froc_bruteforce(cases):
    n_gt = sum(c.n_gt for c in cases)
    hits = [h for c in cases for h in c.hits]
    best = {}
    for t in {h[0] for h in hits}:
        tp = sum(1 for conf, ok in hits if conf >= t and ok)
        fp = sum(1 for conf, ok in hits if conf >= t and not ok)
        rate = fp / len(cases)
        best[rate] = max(best.get(rate, 0.0), tp / n_gt if n_gt else 0.0)
    return sorted(best.items())


def auroc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def random_instance(r):
    n_cases = int(r.integers(1, 11))
    budget = int(r.integers(1, 21))
    levels = r.random(int(r.integers(1, 6)))  # few distinct values -> many ties
    cases = []
    for _ in range(n_cases):
        k = int(r.integers(0, budget + 1)) if len(cases) < n_cases - 1 else budget
        k = min(k, budget)
        budget -= k
        hits = [(float(r.choice(levels)), bool(r.random() < 0.5)) for _ in range(k)]
        n_tp = sum(ok for _, ok in hits)
        cases.append(CaseHits(hits, n_tp + int(r.integers(0, 3)), 0))
    return cases


# ------------------------------------------------------------ metrics

def test_sweeps_match_bruteforce_on_random_instances():
    r = np.random.default_rng(2024)
    for _ in range(1000):
        cases = random_instance(r)
        if sum(c.n_gt for c in cases) == 0:
            with pytest.raises(NoPositivesError):
                average_precision(cases)
            continue
        if not any(c.hits for c in cases):
            assert average_precision(cases)[0] == 0.0
            continue
        assert abs(average_precision(cases)[0] - ap_bruteforce(cases)) <= 1e-12
        got = froc_points(cases)
        want = froc_bruteforce(cases)
        assert len(got) == len(want)
        for (a, b), (c, d) in zip(got, want):
            assert abs(a - c) <= 1e-12 and abs(b - d) <= 1e-12


@given(st.lists(st.tuples(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]), st.booleans()),
                min_size=2, max_size=10))
def test_auroc_matches_pairs(pairs):
    scores, labels = zip(*pairs)
    if len(set(labels)) < 2:
        with pytest.raises(DegenerateLabelsError):
            auroc(scores, labels)
        return
    assert abs(auroc(scores, labels)[0] - auroc_pairs(scores, labels)) <= 1e-12


@given(st.lists(st.floats(0, 1), min_size=4, max_size=10))
def test_auroc_rank_invariance(scores):
    labels = [k % 2 == 0 for k in range(len(scores))]
    a = auroc(scores, labels)[0]
    b = auroc([2.0 * s for s in scores], labels)[0]  # exact, order-preserving
    assert abs(a - b) <= 1e-12


def test_auroc_examples():
    ex = ([0.9, 0.4, 0.35, 0.8], [1, 0, 1, 0])
    # pairs: .9>.4, .9>.8, .35<.4, .35<.8
    assert auroc(*ex)[0] == auroc_pairs(*ex) == 0.5
    assert auroc([0.5] * 6, [1, 0] * 3)[0] == 0.5
    assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[0] == 1.0


def test_ap_examples():
    assert average_precision([CaseHits([(0.9, True), (0.5, False), (0.3, True)], 2, 0)])[0] == \
        pytest.approx(5 / 6)
    assert average_precision([CaseHits([(0.9, False)], 1, 1)])[0] == 0.0
    assert average_precision([CaseHits([(0.9, True)], 1, 0), CaseHits([(0.4, True)], 1, 0)])[0] == 1.0
    with pytest.raises(NoPositivesError):
        average_precision([CaseHits([(0.5, False)], 0, 0)])


def test_froc_examples():
    assert froc_points([CaseHits([(0.9, True)], 1, 0)]) == [(0.0, 1.0)]
    pts = froc_points([CaseHits([(0.9, True), (0.2, False), (0.1, False)], 2, 1),
                       CaseHits([], 0, 0)])
    assert pts[-1] == (1.0, 0.5)


def test_ranking_score_table_values():
    assert ranking_score(0.633, 0.881) == pytest.approx(0.757, abs=5e-4)
    assert ranking_score(0.690, 0.909) == pytest.approx(0.7995, abs=1e-12)
    assert round(ranking_score(0.690, 0.909), 2) == 0.80
    assert ranking_score(1, 1) == 1
    with pytest.raises(detect.UndefinedMetricError):
        ranking_score(float("nan"), 0.5)


# ------------------------------------------------------------ extraction and matching

def test_extract_two_plateaus():
    prob = np.zeros((4, 10, 10))
    prob[1:3, 1:4, 1:4] = 0.6
    prob[1:3, 6:9, 6:9] = 0.9
    cands, det = extract_lesions(prob)
    assert [c.confidence for c in cands] == [0.9, 0.6]
    assert det.max() == pytest.approx(0.9) and case_score(det) == pytest.approx(0.9)
    assert set(np.unique(det)) == {0.0, np.float32(0.6), np.float32(0.9)}


def test_extract_below_min_conf_and_empty():
    prob = np.full((2, 5, 5), 0.05)
    assert extract_lesions(prob)[0] == []
    cands, det = extract_lesions(np.zeros((2, 3, 3)))
    assert cands == [] and not det.any() and case_score(det) == 0.0


def test_extract_discards_small_regions_but_zeroes_them():
    prob = np.zeros((2, 8, 8))
    prob[0, 0, 0] = 0.95  # single voxel, below min_size
    prob[1, 3:7, 3:7] = 0.5
    cands, det = extract_lesions(prob)
    assert [c.confidence for c in cands] == [0.5]
    assert det[0, 0, 0] == 0


def test_extract_cap_and_disjointness():
    prob = np.zeros((2, 40, 40))
    for k in range(7):
        prob[:, 5 * k + 1:5 * k + 4, 2:6] = 0.2 + 0.1 * k
    cands, _ = extract_lesions(prob, ExtractParams(max_candidates=5, min_size=5))
    assert len(cands) == 5
    conf = [c.confidence for c in cands]
    assert conf == sorted(conf, reverse=True)
    all_idx = np.concatenate([c.index for c in cands])
    assert len(np.unique(all_idx)) == len(all_idx)


def test_extract_rejects_out_of_range():
    with pytest.raises(ValueError):
        extract_lesions(np.full((2, 2, 2), 1.5))


def _cube(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return m


def test_match_examples():
    shape = (4, 8, 8)
    gt = _cube(shape, (0, 0, 0), (2, 4, 4))
    same = detect.LesionCandidate(np.flatnonzero(gt.ravel()), 0.8, (0, 0, 0))
    h = match_hits([same], gt)
    assert h.hits == [(0.8, True)] and h.n_fn == 0
    far = detect.LesionCandidate(np.flatnonzero(_cube(shape, (2, 5, 5), (4, 8, 8)).ravel()), .7,
                                 (3, 6, 6))
    h = match_hits([far], gt)
    assert h.hits == [(0.7, False)] and h.n_fn == 1
    # half-overlapping cubes: IoU = 1/3
    half = _cube(shape, (0, 2, 0), (2, 6, 4))
    cand = detect.LesionCandidate(np.flatnonzero(half.ravel()), 0.5, (0, 3.5, 1.5))
    assert detect._iou(cand.index, np.flatnonzero(gt.ravel())) == pytest.approx(1 / 3)
    assert match_hits([cand], gt).hits == [(0.5, True)]


def test_match_consumes_gt_once():
    gt = _cube((2, 6, 6), (0, 0, 0), (2, 3, 3))
    idx = np.flatnonzero(gt.ravel())
    a = detect.LesionCandidate(idx, 0.9, (0.5, 1, 1))
    b = detect.LesionCandidate(idx, 0.9, (0.5, 1, 2))
    h = match_hits([b, a], gt)
    assert h.hits == [(0.9, True), (0.9, False)]


def test_evaluate_perfect_and_report_roundtrip(tmp_path):
    shape = (2, 8, 8)
    gts, dets, labels = {}, {}, {}
    for k in range(4):
        m = _cube(shape, (0, 1, 1), (2, 4, 4)) if k % 2 else np.zeros(shape, bool)
        gts[f"c{k}"] = m
        dets[f"c{k}"] = m * 0.9
        labels[f"c{k}"] = bool(k % 2)
    rep = detect.evaluate(dets, gts, labels)
    assert rep.summary_line() == "AP=1.000, AUROC=1.000, score=1.000"
    again = EvalReport.from_json(rep.to_json())
    assert again.to_json() == rep.to_json()
    rep.write_curves(tmp_path)
    assert (tmp_path / "pr.csv").read_text().startswith("threshold,precision,recall")
    assert (tmp_path / "froc.csv").read_text().startswith("fp_per_case,sensitivity")
    assert (tmp_path / "roc.csv").read_text().startswith("fpr,tpr")


def test_evaluate_without_lesions_reports_nan():
    dets = {"a": np.zeros((1, 3, 3)), "b": np.zeros((1, 3, 3))}
    rep = detect.evaluate(dets, {"a": None, "b": None}, {"a": False, "b": False})
    assert rep.summary_line() == "AP=nan, AUROC=nan, score=nan"


def test_write_candidates(tmp_path):
    prob = np.zeros((2, 6, 6))
    prob[:, 1:4, 1:4] = 0.7
    cands, _ = extract_lesions(prob)
    detect.write_candidates(tmp_path / "c.jsonl", {"x": cands})
    import json
    rec = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert rec["case_id"] == "x" and rec["voxels"] == 18
