"""Temporal interval geometry: overlap, offset coding, NMS and label assignment.

Segments live in feature-cell coordinates as half-open ``[start, end)``.
Bulk routines take ``(N, 2)`` arrays of ``(start, end)`` rows; the small
dataclasses are for call sites that handle one item at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1

CENTER_WEIGHT = 10.0
LENGTH_WEIGHT = 5.0


@dataclass(frozen=True)
class Segment:
    start: float
    end: float

    def __post_init__(self):
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise ValueError(f"segment bounds must be finite: {self}")
        if self.end <= self.start:
            raise ValueError(f"segment end must exceed start: {self}")

    @property
    def center(self) -> float:
        return (self.start + self.end) / 2

    @property
    def length(self) -> float:
        return self.end - self.start

    def as_row(self) -> tuple[float, float]:
        return (self.start, self.end)


@dataclass(frozen=True)
class Anchor:
    center: float
    length: float
    scale_index: int = 0

    @property
    def segment(self) -> Segment:
        return Segment(self.center - self.length / 2, self.center + self.length / 2)


@dataclass(frozen=True)
class Offsets:
    center_shift: float
    log_scale: float


@dataclass(frozen=True)
class ScoredSegment:
    segment: Segment
    score: float


@dataclass(frozen=True)
class Detection:
    segment: Segment
    label: int
    score: float

    def __post_init__(self):
        if self.label < 1:
            raise ValueError("background (label 0) is never a detection")


def as_rows(segments) -> np.ndarray:
    """Coerce Segments, (start, end) pairs or an array to an (N, 2) float array."""
    if isinstance(segments, np.ndarray):
        return segments.reshape(-1, 2).astype(np.float64, copy=False)
    rows = [s.as_row() if isinstance(s, Segment) else tuple(s) for s in segments]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


# --------------------------------------------------------------------------
# overlap


def tiou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def tiou_matrix(a, b) -> np.ndarray:
    """Pairwise tIoU between the rows of ``a`` (N, 2) and ``b`` (M, 2)."""
    a, b = as_rows(a), as_rows(b)
    inter = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    inter = np.maximum(inter, 0.0)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# --------------------------------------------------------------------------
# offset parameterization


def encode(gts, refs) -> np.ndarray:
    """Offsets (N, 2) of segments ``gts`` relative to reference segments ``refs``.

    The pair is ``10 (center - ref_center) / ref_length`` and
    ``5 ln(length / ref_length)``.
    """
    g, r = as_rows(gts), as_rows(refs)
    gc, gl = (g[:, 0] + g[:, 1]) / 2, g[:, 1] - g[:, 0]
    rc, rl = (r[:, 0] + r[:, 1]) / 2, r[:, 1] - r[:, 0]
    return np.stack([CENTER_WEIGHT * (gc - rc) / rl, LENGTH_WEIGHT * np.log(gl / rl)], axis=1)


def decode(offsets, refs) -> np.ndarray:
    """Inverse of :func:`encode`; returns (N, 2) ``(start, end)`` rows."""
    t = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    r = as_rows(refs)
    rc, rl = (r[:, 0] + r[:, 1]) / 2, r[:, 1] - r[:, 0]
    c = rc + t[:, 0] * rl / CENTER_WEIGHT
    # cap the exponent so wild untrained outputs stay finite
    length = rl * np.exp(np.minimum(t[:, 1] / LENGTH_WEIGHT, 20.0))
    return np.stack([c - length / 2, c + length / 2], axis=1)


def encode_offsets(gt: Segment, anchor: Anchor | Segment) -> Offsets:
    ref = anchor.segment if isinstance(anchor, Anchor) else anchor
    gc, gl = gt.center, gt.length
    return Offsets(CENTER_WEIGHT * (gc - ref.center) / ref.length, LENGTH_WEIGHT * float(np.log(gl / ref.length)))


def decode_offsets(offsets: Offsets, anchor: Anchor | Segment) -> Segment:
    ca, la = anchor.center, anchor.length
    c = ca + offsets.center_shift * la / CENTER_WEIGHT
    length = la * float(np.exp(offsets.log_scale / LENGTH_WEIGHT))
    return Segment(c - length / 2, c + length / 2)


# --------------------------------------------------------------------------
# anchors


def anchor_grid(T: int, scales: Sequence[int]) -> np.ndarray:
    """Anchor segments for every (scale, cell), scale-major: row ``k * T + t``.

    The anchor at cell t has centre ``t + 0.5`` and length equal to the scale.
    """
    centers = np.arange(T, dtype=np.float64) + 0.5
    rows = [np.stack([centers - s / 2, centers + s / 2], axis=1) for s in scales]
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, 2))


def anchors(T: int, scales: Sequence[int]) -> list[Anchor]:
    return [Anchor(t + 0.5, float(s), k) for k, s in enumerate(scales) for t in range(T)]


def clip_to_bounds(segment: Segment, T: float) -> Segment | None:
    """Intersect with ``[0, T)``; None when nothing of positive length remains."""
    if T <= 0:
        raise ValueError("T must be positive")
    start, end = max(segment.start, 0.0), min(segment.end, float(T))
    if not end > start:
        return None
    return Segment(start, end)


def clip_rows(rows: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`clip_to_bounds`; returns clipped rows and a keep mask."""
    out = np.clip(rows, 0.0, float(T))
    keep = np.isfinite(out).all(axis=1) & (out[:, 1] > out[:, 0])
    return out, keep


# --------------------------------------------------------------------------
# non-maximum suppression


def nms_indices(segments, scores, threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS; returns kept indices in keep order.

    Candidates are visited by descending score with ties going to the lower
    index. A candidate is dropped when its tIoU with any kept item is strictly
    above ``threshold``. With ``max_keep`` the scan stops once that many
    items are kept, which gives the same prefix as a full run.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    rows = as_rows(segments)
    scores = np.asarray(scores, dtype=np.float64)
    if len(rows) == 0:
        return np.zeros(0, dtype=np.intp)
    order = np.argsort(-scores, kind="stable")
    starts, ends = rows[order, 0], rows[order, 1]
    lengths = ends - starts
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = slice(i + 1, None)
        inter = np.minimum(ends[i], ends[rest]) - np.maximum(starts[i], starts[rest])
        inter = np.maximum(inter, 0.0)
        union = lengths[i] + lengths[rest] - inter
        overlap = np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        alive[rest] &= ~(overlap > threshold)
    return np.asarray(keep, dtype=np.intp)


def nms(items: Sequence[ScoredSegment | Detection], threshold: float) -> list:
    if not items:
        return []
    keep = nms_indices([it.segment for it in items], [it.score for it in items], threshold)
    return [items[i] for i in keep]


# --------------------------------------------------------------------------
# label assignment


def match_anchors(
    anchor_rows,
    gts,
    pos_threshold: float = 0.7,
    neg_threshold: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors positive / negative / ignore against ground truth.

    Returns ``(labels, matched)``: labels use POSITIVE, NEGATIVE, IGNORE and
    ``matched`` is the index of the gt each anchor is tied to (-1 if none).
    Every gt additionally claims its best anchor as a positive, so no gt is
    left without a positive anchor.
    """
    a = as_rows(anchor_rows)
    g = as_rows(gts)
    n = len(a)
    labels = np.full(n, IGNORE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(g) == 0:
        labels[:] = NEGATIVE
        return labels, matched
    iou = tiou_matrix(a, g)
    best = iou.max(axis=1)
    arg = iou.argmax(axis=1)
    labels[best < neg_threshold] = NEGATIVE
    pos = best > pos_threshold
    labels[pos] = POSITIVE
    matched[pos] = arg[pos]

    claimed: set[int] = set()
    for j in range(len(g)):
        col = iou[:, j].copy()
        if claimed:
            col[list(claimed)] = -1.0
        i = int(np.argmax(col))
        if col[i] <= 0:
            continue
        claimed.add(i)
        labels[i] = POSITIVE
        matched[i] = j
    return labels, matched


def assign_proposal_labels(
    proposals,
    gts,
    gt_labels: Sequence[int],
    fg_threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Class label and regression target for each proposal.

    A proposal takes the class of its most-overlapped gt when that tIoU is
    above ``fg_threshold``; otherwise it is background (0) and its target row
    is left at zero.
    """
    p = as_rows(proposals)
    g = as_rows(gts)
    labels = np.zeros(len(p), dtype=np.int64)
    targets = np.zeros((len(p), 2), dtype=np.float64)
    if len(g) == 0 or len(p) == 0:
        return labels, targets
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    iou = tiou_matrix(p, g)
    arg = iou.argmax(axis=1)
    fg = iou[np.arange(len(p)), arg] > fg_threshold
    labels[fg] = gt_labels[arg[fg]]
    if fg.any():
        targets[fg] = encode(g[arg[fg]], p[fg])
    return labels, targets
