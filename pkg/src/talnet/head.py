"""Second stage: segment-of-interest pooling and the per-proposal classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import segments as seg
from .tensor import (
    ParamStore,
    Tensor,
    add,
    linear,
    record,
    relu,
    reshape,
    scale,
    smooth_l1,
    softmax,
    softmax_cross_entropy,
    take_rows,
)


@dataclass(frozen=True)
class SoIConfig:
    num_classes: int
    output_bins: int = 7
    context: bool = False
    hidden_width: int = 256

    def __post_init__(self):
        if self.output_bins < 1:
            raise ValueError("output_bins must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


def pooling_extent(rows: np.ndarray, T: int, context: bool) -> np.ndarray:
    """Input extent of each proposal, optionally grown by half its length per side, clipped to [0, T)."""
    rows = seg.as_rows(rows)
    if context:
        half = (rows[:, 1] - rows[:, 0]) / 2
        rows = np.stack([rows[:, 0] - half, rows[:, 1] + half], axis=1)
    clipped = np.clip(rows, 0.0, float(T))
    if np.any(clipped[:, 1] <= clipped[:, 0]):
        raise ValueError("proposal lies entirely outside the feature grid")
    return clipped


def bin_cells(extent: np.ndarray, bins: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """First and one-past-last cell index covered by each bin, shape (N, bins)."""
    frac = np.arange(bins + 1, dtype=np.float64) / bins
    edges = extent[:, :1] + (extent[:, 1:] - extent[:, :1]) * frac[None, :]
    lo = np.floor(edges[:, :-1]).astype(np.intp)
    hi = np.ceil(edges[:, 1:]).astype(np.intp)
    lo = np.clip(lo, 0, T - 1)
    hi = np.clip(np.maximum(hi, lo + 1), 1, T)
    return lo, hi


def soi_pool(features: Tensor, proposals, config: SoIConfig) -> Tensor:
    """Max-pool each proposal's extent into ``output_bins`` bins.

    A bin takes the channel-wise max over every cell ``[j, j+1)`` that
    overlaps it. Returns an (N, bins, D) tensor; gradient flows to the argmax
    cell of each bin, the earliest cell on ties.
    """
    x = features.data
    T, D = x.shape
    extent = pooling_extent(proposals, T, config.context)
    lo, hi = bin_cells(extent, config.output_bins, T)
    N, B = lo.shape
    if N == 0:
        return record(np.zeros((0, B, D), dtype=x.dtype), (features,), lambda g: (np.zeros_like(x),))
    width = int((hi - lo).max())
    idx = lo[..., None] + np.arange(width)[None, None, :]
    idx = np.minimum(idx, hi[..., None] - 1)  # repeats of the last cell never win a tie
    gathered = x[idx]  # (N, B, W, D)
    arg = gathered.argmax(axis=2)
    src = np.take_along_axis(idx, arg, axis=2)  # (N, B, D) source cell per output
    out = np.take_along_axis(gathered, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(g):
        gx = np.zeros_like(x)
        cols = np.broadcast_to(np.arange(D), src.shape)
        np.add.at(gx, (src.reshape(-1), cols.reshape(-1)), g.reshape(-1))
        return (gx,)

    return record(out, (features,), backward)


def soi_pool_reference(x: np.ndarray, proposal: seg.Segment, config: SoIConfig) -> np.ndarray:
    """Slow per-bin pooling used as a test oracle."""
    T = x.shape[0]
    start, end = proposal.start, proposal.end
    if config.context:
        half = (end - start) / 2
        start, end = start - half, end + half
    start, end = max(start, 0.0), min(end, float(T))
    out = np.empty((config.output_bins, x.shape[1]), dtype=x.dtype)
    step = (end - start) / config.output_bins
    for b in range(config.output_bins):
        b0 = start + b * step
        b1 = start + (b + 1) * step
        cells = [j for j in range(T) if j < b1 and j + 1 > b0]
        out[b] = x[cells].max(axis=0)
    return out


@dataclass
class ClassifierHead:
    config: SoIConfig
    d_in: int
    params: ParamStore
    prefix: str = "head"

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]


def build_head(config: SoIConfig, d_in: int, params: ParamStore, rng: np.random.Generator, prefix: str = "head"):
    H, B, C = config.hidden_width, config.output_bins, config.num_classes
    params.init_uniform(f"{prefix}.reduce.w", (d_in, H), d_in, rng)
    params.init_zeros(f"{prefix}.reduce.b", (H,))
    params.init_uniform(f"{prefix}.fc.w", (B * H, H), B * H, rng)
    params.init_zeros(f"{prefix}.fc.b", (H,))
    params.init_uniform(f"{prefix}.cls.w", (H, C + 1), H, rng)
    params.init_zeros(f"{prefix}.cls.b", (C + 1,))
    params.init_uniform(f"{prefix}.reg.w", (H, 2 * C), H, rng)
    params.init_zeros(f"{prefix}.reg.b", (2 * C,))
    return ClassifierHead(config, d_in, params, prefix)


def head_forward(head: ClassifierHead, pooled: Tensor) -> tuple[Tensor, Tensor]:
    """Class logits (N, C+1) and per-class offsets (N, 2C) for pooled features."""
    N, B, D = pooled.shape
    if B != head.config.output_bins or D != head.d_in:
        raise ValueError(f"pooled shape {pooled.shape} does not match head ({head.config.output_bins}, {head.d_in})")
    h = relu(linear(pooled, head.p("reduce.w"), head.p("reduce.b")))
    h = reshape(h, (N, B * head.config.hidden_width))
    h = relu(linear(h, head.p("fc.w"), head.p("fc.b")))
    logits = linear(h, head.p("cls.w"), head.p("cls.b"))
    offsets = linear(h, head.p("reg.w"), head.p("reg.b"))
    return logits, offsets


def classify(head: ClassifierHead, features: Tensor, proposals) -> tuple[Tensor, Tensor]:
    return head_forward(head, soi_pool(features, proposals, head.config))


def class_offsets(offsets: Tensor, labels: np.ndarray) -> Tensor:
    """Rows of the labeled class's (center_shift, log_scale) pair; labels must be foreground."""
    N, twoC = offsets.shape
    C = twoC // 2
    flat = reshape(offsets, (N * C, 2))
    return take_rows(flat, np.arange(N) * C + (np.asarray(labels) - 1))


def cls_loss(
    logits: Tensor,
    offsets: Tensor,
    labels,
    targets,
    reg_weight: float = 1.0,
) -> Tensor:
    """Mean cross-entropy plus smooth-L1 on foreground rows' class offsets.

    Background rows (label 0) contribute nothing to the regression term.
    """
    labels = np.asarray(labels, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    loss = softmax_cross_entropy(logits, labels)
    fg = np.flatnonzero(labels > 0)
    if len(fg) and reg_weight:
        pred = class_offsets(take_rows(offsets, fg), labels[fg])
        reg = smooth_l1(pred, targets[fg])
        loss = add(loss, scale(reg, reg_weight / len(fg)))
    return loss


def decode_detections(
    proposals: np.ndarray,
    logits: np.ndarray,
    offsets: np.ndarray,
    T: int,
    nms_threshold: float = 0.7,
) -> list[tuple[np.ndarray, int, np.ndarray]]:
    """Per-class decoded segments and softmax scores after per-class NMS.

    Returns a list of ``(rows, label, scores)`` per foreground class.
    """
    probs = softmax(np.asarray(logits, dtype=np.float64))
    N, C1 = probs.shape
    off = np.asarray(offsets, dtype=np.float64).reshape(N, C1 - 1, 2)
    out = []
    for c in range(1, C1):
        rows = seg.decode(off[:, c - 1], proposals)
        rows, keep = seg.clip_rows(rows, T)
        idx = np.flatnonzero(keep)
        kept = idx[seg.nms_indices(rows[idx], probs[idx, c], nms_threshold)]
        out.append((rows[kept], c, probs[kept, c]))
    return out
