"""Proposal recall (AR-AN) and detection average precision.

Inputs are plain mappings keyed by video id:

* proposals: ``{video: (rows (P, 2), scores (P,))}``
* ground truth: ``{video: (rows (G, 2), labels (G,))}``
* detections: ``{video: list of (rows, label, scores)}`` or a flat list of
  ``(video, start, end, score, label)`` tuples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .segments import tiou_matrix

PROPOSAL_TIOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(11))
AN_GRID = (10, 20, 50, 100, 200)
DETECTION_TIOUS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class EvalConfig:
    proposal_tious: tuple[float, ...] = PROPOSAL_TIOUS
    an_grid: tuple[int, ...] = AN_GRID
    detection_tious: tuple[float, ...] = DETECTION_TIOUS

    def __post_init__(self):
        for t in self.proposal_tious + self.detection_tious:
            if not 0 < t <= 1:
                raise ValueError(f"tIoU threshold {t} outside (0, 1]")


def _ranked(rows, scores) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 2)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return rows[order]


def greedy_match(iou: np.ndarray, threshold: float) -> np.ndarray:
    """Match ranked predictions (rows of ``iou``) to gts one-to-one.

    Each prediction in turn takes the unmatched gt it overlaps most, if that
    overlap reaches ``threshold``. Returns the matched gt per prediction
    (-1 for none).
    """
    n, m = iou.shape
    taken = np.zeros(m, dtype=bool)
    out = np.full(n, -1, dtype=np.int64)
    if m == 0:
        return out
    for i in range(n):
        cand = np.where(taken, -1.0, iou[i])
        j = int(np.argmax(cand))
        if cand[j] >= threshold:
            taken[j] = True
            out[i] = j
    return out


def _recall_counts(proposals, gts, tious: Sequence[float], an: int) -> tuple[np.ndarray, int]:
    hits = np.zeros(len(tious))
    n_gt = 0
    for vid, (g_rows, _) in gts.items():
        g_rows = np.asarray(g_rows, dtype=np.float64).reshape(-1, 2)
        n_gt += len(g_rows)
        if vid not in proposals or not len(g_rows):
            continue
        p_rows = _ranked(*proposals[vid])[:an]
        iou = tiou_matrix(p_rows, g_rows)
        for k, thr in enumerate(tious):
            hits[k] += np.count_nonzero(greedy_match(iou, thr) >= 0)
    return hits, n_gt


def recall(proposals: Mapping, gts: Mapping, tiou_thr: float, an: int) -> float:
    """Fraction of gts matched by the top ``an`` proposals of their video."""
    hits, n_gt = _recall_counts(proposals, gts, [tiou_thr], an)
    if n_gt == 0:
        raise ValueError("no ground-truth instances")
    return float(hits[0] / n_gt)


def average_recall(proposals: Mapping, gts: Mapping, an: int, tious: Sequence[float] = PROPOSAL_TIOUS) -> float:
    hits, n_gt = _recall_counts(proposals, gts, tious, an)
    if n_gt == 0:
        raise ValueError("no ground-truth instances")
    return float(np.mean(hits / n_gt))


def ar_an_curve(
    proposals: Mapping,
    gts: Mapping,
    an_grid: Sequence[int] = AN_GRID,
    tious: Sequence[float] = PROPOSAL_TIOUS,
) -> tuple[list[tuple[int, float, float]], dict[int, float]]:
    """Recall for every (AN, tIoU) pair plus AR per AN."""
    rows = []
    ar = {}
    for an in an_grid:
        hits, n_gt = _recall_counts(proposals, gts, tious, an)
        if n_gt == 0:
            raise ValueError("no ground-truth instances")
        rec = hits / n_gt
        rows.extend((an, float(t), float(r)) for t, r in zip(tious, rec))
        ar[an] = float(rec.mean())
    return rows, ar


# --------------------------------------------------------------------------
# average precision


def flatten_detections(detections) -> list[tuple[str, float, float, float, int]]:
    if isinstance(detections, Mapping):
        flat = []
        for vid in detections:
            for rows, label, scores in detections[vid]:
                for (a, b), s in zip(np.asarray(rows).reshape(-1, 2), scores):
                    flat.append((vid, float(a), float(b), float(s), int(label)))
        return flat
    return [tuple(d) for d in detections]


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    if n_gt == 0:
        raise ValueError("no ground truth for this class")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], rec[:-1]])
    return float(np.sum((rec - prev) * envelope))


def average_precision(detections, gts: Mapping, label: int, tiou_thr: float) -> float:
    """AP of one class; ties in score are ordered by video id then start."""
    flat = [d for d in flatten_detections(detections) if d[4] == label]
    flat.sort(key=lambda d: (-d[3], d[0], d[1]))
    gt_rows = {}
    n_gt = 0
    for vid, (rows, labels) in gts.items():
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, 2)
        sel = rows[np.asarray(labels) == label]
        gt_rows[vid] = sel
        n_gt += len(sel)
    taken = {vid: np.zeros(len(r), dtype=bool) for vid, r in gt_rows.items()}
    tp = np.zeros(len(flat))
    for i, (vid, a, b, _, _) in enumerate(flat):
        g = gt_rows.get(vid)
        if g is None or not len(g):
            continue
        iou = tiou_matrix(np.array([[a, b]]), g)[0]
        iou = np.where(taken[vid], -1.0, iou)
        j = int(np.argmax(iou))
        if iou[j] >= tiou_thr:
            taken[vid][j] = True
            tp[i] = 1
    return interpolated_ap(tp, n_gt)


def gt_classes(gts: Mapping) -> list[int]:
    labels: set[int] = set()
    for _, lab in gts.values():
        labels.update(int(x) for x in np.asarray(lab).reshape(-1))
    return sorted(labels)


def mean_ap(detections, gts: Mapping, tiou_thr: float) -> tuple[float, dict[int, float]]:
    """mAP over classes that occur in the ground truth, and per-class AP."""
    flat = flatten_detections(detections)
    per_class = {c: average_precision(flat, gts, c, tiou_thr) for c in gt_classes(gts)}
    if not per_class:
        raise ValueError("no ground-truth instances")
    return float(np.mean(list(per_class.values()))), per_class


def map_table(detections, gts: Mapping, tious: Iterable[float] = DETECTION_TIOUS) -> list[tuple[str, float, float]]:
    """Rows ``(class, tiou, ap)``; class ``"mean"`` carries the mAP."""
    flat = flatten_detections(detections)
    out = []
    for t in tious:
        m, per_class = mean_ap(flat, gts, t)
        out.extend((str(c), float(t), ap) for c, ap in per_class.items())
        out.append(("mean", float(t), m))
    return out
