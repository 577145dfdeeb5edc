"""Lesion candidates from probability maps, hit matching and the
lesion/patient-level metrics.
"""
import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .zonal import label_components


class UndefinedMetricError(ValueError):
    pass


class NoPositivesError(UndefinedMetricError):
    """AP needs at least one ground-truth lesion."""


class DegenerateLabelsError(UndefinedMetricError):
    """AUROC needs both positive and negative cases."""


@dataclass(frozen=True)
class ExtractParams:
    min_conf: float = 0.10
    rel_frac: float = 0.4
    max_candidates: int = 5
    min_size: int = 10


@dataclass(frozen=True, eq=False)
class LesionCandidate:
    index: np.ndarray  # flat voxel indices into the map
    confidence: float
    centroid: tuple

    @property
    def size(self):
        return int(self.index.size)


def _as_map(prob):
    arr = getattr(prob, "data", prob)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("probability volume must have one channel")
        arr = arr[0]
    return arr


def extract_lesions(prob, params=ExtractParams()):
    """Greedy peak-growing extraction.

    Repeatedly take the global maximum ``p``, grow its 26-connected region
    of voxels ``>= max(rel_frac * p, min_conf)``, zero it, and keep it as a
    candidate with confidence ``p`` if it has at least ``min_size`` voxels.
    Returns ``(candidates, detection_map)``.
    """
    work = _as_map(prob).copy()
    if work.size and (work.min() < 0 or work.max() > 1 or not np.isfinite(work).all()):
        raise ValueError("probabilities must lie in [0, 1]")
    shape = work.shape
    det = np.zeros(shape, dtype=np.float32)
    cands = []
    while len(cands) < params.max_candidates and work.size:
        peak = int(np.argmax(work))
        p = float(work.flat[peak])
        if p < params.min_conf or p <= 0:
            break
        thr = max(params.rel_frac * p, params.min_conf)
        comp, _ = label_components(work >= thr)
        flat = comp.ravel()
        idx = np.flatnonzero(flat == flat[peak])
        work.flat[idx] = 0
        if idx.size < params.min_size:
            continue
        coords = np.array(np.unravel_index(idx, shape), dtype=np.float64)
        cands.append(LesionCandidate(idx, p, tuple(coords.mean(axis=1))))
        det.flat[idx] = p
    return cands, det


def case_score(detection_map):
    m = _as_map(detection_map)
    return float(m.max()) if m.size else 0.0


def gt_components(gt_mask):
    comp, n = label_components(np.asarray(gt_mask, dtype=bool))
    flat = comp.ravel()
    return [np.flatnonzero(flat == k) for k in range(1, n + 1)]


def _iou(a, b):
    inter = np.intersect1d(a, b, assume_unique=True).size
    return inter / (a.size + b.size - inter) if inter else 0.0


@dataclass
class CaseHits:
    hits: list  # [(confidence, is_tp)] in matching order
    n_gt: int
    n_fn: int


def match_hits(candidates, gt, iou_min=0.10):
    """Greedy one-to-one matching in confidence order.

    ``gt`` is a binary mask or a list of flat-index components. Ties in
    confidence are broken by centroid order.
    """
    comps = gt if isinstance(gt, list) else gt_components(gt)
    order = sorted(candidates, key=lambda c: (-c.confidence, c.centroid))
    free = list(range(len(comps)))
    hits = []
    for cand in order:
        best, best_iou = None, 0.0
        for k in free:
            v = _iou(cand.index, comps[k])
            if v > best_iou:
                best, best_iou = k, v
        if best is not None and best_iou >= iou_min:
            free.remove(best)
            hits.append((cand.confidence, True))
        else:
            hits.append((cand.confidence, False))
    return CaseHits(hits, len(comps), len(free))


# ------------------------------------------------------------ sweeps

def _sweep(cases):
    """Cumulative (threshold, TP, FP) at each distinct confidence, descending."""
    pairs = [h for c in cases for h in c.hits]
    if not pairs:
        return np.zeros(0), np.zeros(0, int), np.zeros(0, int)
    conf = np.array([p[0] for p in pairs], dtype=np.float64)
    tp = np.array([p[1] for p in pairs], dtype=np.int64)
    order = np.argsort(-conf, kind="stable")
    conf, tp = conf[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    last = np.r_[conf[1:] != conf[:-1], True]
    return conf[last], ctp[last], cfp[last]


def average_precision(cases):
    """All-points AP over the pooled candidates; returns (AP, PR points).

    PR points are ``(threshold, precision, recall)`` per distinct threshold.
    """
    n_gt = sum(c.n_gt for c in cases)
    if n_gt == 0:
        raise NoPositivesError("no ground-truth lesions")
    thr, tp, fp = _sweep(cases)
    if thr.size == 0:
        return 0.0, []
    precision = tp / (tp + fp)
    recall = tp / n_gt
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return ap, list(zip(thr.tolist(), precision.tolist(), recall.tolist()))


def froc_points(cases, n_cases=None):
    """``(fp_per_case, sensitivity)`` operating points sorted by FP rate.

    Thresholds sharing an FP rate collapse onto their best sensitivity.
    """
    n_cases = len(cases) if n_cases is None else n_cases
    n_gt = sum(c.n_gt for c in cases)
    thr, tp, fp = _sweep(cases)
    best = {}
    for t, f in zip(tp, fp):
        rate = f / n_cases
        sens = t / n_gt if n_gt else 0.0
        best[rate] = max(best.get(rate, 0.0), sens)
    return sorted((float(r), float(s)) for r, s in best.items())


def auroc(scores, labels):
    """Mann-Whitney AUROC with half credit for ties; returns (AUROC, ROC points)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError(f"need both classes, got {n_pos} positive / {n_neg} negative")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tps = np.cumsum(y_sorted)[last]
    fps = np.cumsum(~y_sorted)[last]
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    # trapezoids over tie groups give exactly the concordance statistic
    conc = np.sum((fps - np.r_[0, fps[:-1]]) * (np.r_[0, tps[:-1]] + tps)) / 2.0
    value = float(conc / (n_pos * n_neg))
    return value, list(zip(fpr.tolist(), tpr.tolist()))


def ranking_score(ap, auc):
    if ap is None or auc is None or np.isnan(ap) or np.isnan(auc):
        raise UndefinedMetricError("ranking score needs both AP and AUROC")
    return (ap + auc) / 2.0


# ------------------------------------------------------------ report

@dataclass
class EvalReport:
    ap: float
    auroc: float
    score: float
    pr_points: list
    froc_points: list
    roc_points: list
    case_scores: dict
    params: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        for key in ("pr_points", "froc_points", "roc_points"):
            d[key] = [tuple(p) for p in d[key]]
        return cls(**d)

    def summary_line(self):
        def f(x):
            return "nan" if x is None or np.isnan(x) else f"{x:.3f}"
        return f"AP={f(self.ap)}, AUROC={f(self.auroc)}, score={f(self.score)}"

    def write_curves(self, directory):
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _write_csv(d / "pr.csv", ("threshold", "precision", "recall"), self.pr_points)
        _write_csv(d / "froc.csv", ("fp_per_case", "sensitivity"), self.froc_points)
        _write_csv(d / "roc.csv", ("fpr", "tpr"), self.roc_points)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_candidates(path, per_case):
    """Line-delimited candidate dump from ``{case_id: [LesionCandidate]}``."""
    with open(path, "w") as fh:
        for cid, cands in per_case.items():
            for c in cands:
                fh.write(json.dumps({"case_id": cid, "confidence": c.confidence,
                                     "voxels": c.size, "centroid": list(c.centroid)}) + "\n")


def evaluate(detection_maps, gt_masks, labels, iou_min=0.10, extract_params=None):
    """Lesion- and patient-level evaluation of per-case detection maps.

    All three arguments are dicts keyed by case id; ``gt_masks`` values
    may be ``None`` for cases without lesion annotation.
    """
    cases, scores, y = [], {}, []
    ids = sorted(detection_maps)
    for cid in ids:
        det = _as_map(detection_maps[cid])
        cands = _candidates_from_map(det)
        gt = gt_masks.get(cid)
        comps = [] if gt is None else gt_components(gt)
        cases.append(match_hits(cands, comps, iou_min))
        scores[cid] = case_score(det)
        y.append(bool(labels[cid]))
    try:
        ap, pr = average_precision(cases)
    except NoPositivesError:
        ap, pr = float("nan"), []
    try:
        auc, roc = auroc([scores[c] for c in ids], y)
    except DegenerateLabelsError:
        auc, roc = float("nan"), []
    score = (ap + auc) / 2.0
    params = {"iou_min": iou_min}
    if extract_params is not None:
        params["extract"] = asdict(extract_params)
    return EvalReport(ap, auc, score, pr, froc_points(cases, len(ids)), roc, scores, params)


def _candidates_from_map(det):
    """Recover candidates from a sparse detection map (one region per value)."""
    cands = []
    for value in np.unique(det[det > 0])[::-1]:
        comp, n = label_components(det == value)
        flat = comp.ravel()
        for k in range(1, n + 1):
            idx = np.flatnonzero(flat == k)
            coords = np.array(np.unravel_index(idx, det.shape), dtype=np.float64)
            cands.append(LesionCandidate(idx, float(value), tuple(coords.mean(axis=1))))
    return cands
