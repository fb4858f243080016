"""Segment proposal network: anchor towers, proposal decoding and its loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import segments as seg
from .receptive_field import LayerSpec, conv, derive_rates, rf_extent
from .tensor import (
    FeatureGrid,
    ParamStore,
    Tensor,
    add,
    concat,
    conv1d,
    linear,
    maxpool1d,
    relu,
    reshape,
    scale,
    sigmoid,
    sigmoid_cross_entropy,
    smooth_l1,
    take_rows,
)

DEFAULT_SCALES = (1, 2, 3, 4, 5, 6, 8, 11, 16)
VARIANTS = ("single", "single-tconv", "multi-tconv", "multi-dilated")


@dataclass(frozen=True)
class SPNConfig:
    anchor_scales: tuple[int, ...] = DEFAULT_SCALES
    hidden_width: int = 256
    context: bool = False
    variant: str = "multi-dilated"
    proposal_nms_threshold: float = 0.7
    proposal_top_k: int = 300

    def __post_init__(self):
        scales = tuple(int(s) for s in self.anchor_scales)
        object.__setattr__(self, "anchor_scales", scales)
        if not scales or scales[0] < 1 or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("anchor scales must be strictly increasing positive integers")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SPN variant {self.variant!r}; expected one of {VARIANTS}")
        if self.proposal_top_k < 1:
            raise ValueError("proposal_top_k must be >= 1")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")

    @property
    def shared_tower(self) -> bool:
        return self.variant in ("single", "single-tconv")

    def tower_layers(self) -> list[tuple[LayerSpec, ...]]:
        """Layer stack of each tower (one entry for shared-tower variants)."""
        if self.variant == "single":
            return [(conv(1), conv(1))]
        if self.variant == "single-tconv":
            return [(conv(3), conv(3))]
        if self.variant == "multi-tconv":
            return [(conv(3), conv(3)) for _ in self.anchor_scales]
        return [derive_rates(s, self.context).layers for s in self.anchor_scales]

    def scale_rf(self) -> list[int]:
        layers = self.tower_layers()
        if self.shared_tower:
            layers = layers * len(self.anchor_scales)
        return [rf_extent(ls) for ls in layers]


@dataclass
class SPNOutput:
    """Per-scale objectness logits (T x 1) and offsets (T x 2)."""

    logits: list[Tensor]
    offsets: list[Tensor]

    @property
    def T(self) -> int:
        return self.logits[0].shape[0]

    def flat_logits(self) -> Tensor:
        """All logits as a (K*T,) vector in scale-major order."""
        return reshape(concat(self.logits, axis=0), (-1,))

    def flat_offsets(self) -> Tensor:
        return concat(self.offsets, axis=0)


@dataclass
class SPN:
    config: SPNConfig
    d_in: int
    params: ParamStore
    prefix: str = "spn"
    towers: list[tuple[LayerSpec, ...]] = field(default_factory=list)

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]


def build_spn(
    config: SPNConfig,
    d_in: int,
    params: ParamStore,
    rng: np.random.Generator,
    prefix: str = "spn",
) -> SPN:
    """Register SPN weights in ``params`` and return the network handle."""
    H = config.hidden_width
    net = SPN(config, d_in, params, prefix, config.tower_layers())
    params.init_uniform(f"{prefix}.reduce.w", (1, d_in, H), d_in, rng)
    params.init_zeros(f"{prefix}.reduce.b", (H,))
    for i, layers in enumerate(net.towers):
        j = 0
        for layer in layers:
            if layer.kind != "conv":
                continue
            params.init_uniform(f"{prefix}.tower{i}.conv{j}.w", (layer.kernel, H, H), layer.kernel * H, rng)
            params.init_zeros(f"{prefix}.tower{i}.conv{j}.b", (H,))
            j += 1
    n_heads = len(config.anchor_scales)
    for k in range(n_heads):
        params.init_uniform(f"{prefix}.head{k}.cls.w", (H, 1), H, rng)
        params.init_zeros(f"{prefix}.head{k}.cls.b", (1,))
        params.init_uniform(f"{prefix}.head{k}.reg.w", (H, 2), H, rng)
        params.init_zeros(f"{prefix}.head{k}.reg.b", (2,))
    return net


def _as_input(features, dtype) -> Tensor:
    if isinstance(features, Tensor):
        return features
    if isinstance(features, FeatureGrid):
        features = features.data
    return Tensor(np.asarray(features, dtype=dtype))


def run_tower(net: SPN, i: int, x: Tensor) -> Tensor:
    j = 0
    for layer in net.towers[i]:
        if layer.kind == "pool":
            x = maxpool1d(x, layer.kernel)
        else:
            x = relu(conv1d(x, net.p(f"tower{i}.conv{j}.w"), net.p(f"tower{i}.conv{j}.b"), layer.dilation))
            j += 1
    return x


def spn_forward(net: SPN, features) -> SPNOutput:
    x = _as_input(features, net.params.dtype)
    if x.shape[1] != net.d_in:
        raise ValueError(f"feature dimension {x.shape[1]} does not match network input {net.d_in}")
    base = relu(conv1d(x, net.p("reduce.w"), net.p("reduce.b")))
    logits, offsets = [], []
    shared = run_tower(net, 0, base) if net.config.shared_tower else None
    for k in range(len(net.config.anchor_scales)):
        h = shared if shared is not None else run_tower(net, k, base)
        logits.append(linear(h, net.p(f"head{k}.cls.w"), net.p(f"head{k}.cls.b")))
        offsets.append(linear(h, net.p(f"head{k}.reg.w"), net.p(f"head{k}.reg.b")))
    return SPNOutput(logits, offsets)


def scale_logit_fn(net: SPN, k: int):
    """``x -> logit grid of scale k``; used for receptive-field probes."""

    def fn(x: Tensor) -> Tensor:
        return spn_forward(net, x).logits[k]

    return fn


# --------------------------------------------------------------------------
# proposals


def propose_arrays(
    logits: np.ndarray,
    offsets: np.ndarray,
    config: SPNConfig,
    T: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode flat logits (K*T,) and offsets (K*T, 2) into NMS-filtered proposals.

    Returns ``(rows, scores)`` with at most ``proposal_top_k`` rows in keep
    order.
    """
    anchors = seg.anchor_grid(T, config.anchor_scales)
    scores = sigmoid(np.asarray(logits, dtype=np.float64).reshape(-1))
    rows = seg.decode(offsets, anchors)
    rows, keep = seg.clip_rows(rows, T)
    idx = np.flatnonzero(keep)
    kept = seg.nms_indices(rows[idx], scores[idx], config.proposal_nms_threshold, config.proposal_top_k)
    sel = idx[kept]
    return rows[sel], scores[sel]


def generate_proposals(output: SPNOutput, config: SPNConfig, T: int) -> list[seg.ScoredSegment]:
    rows, scores = propose_arrays(output.flat_logits().data, output.flat_offsets().data, config, T)
    return [seg.ScoredSegment(seg.Segment(float(a), float(b)), float(s)) for (a, b), s in zip(rows, scores)]


# --------------------------------------------------------------------------
# training loss


def sample_minibatch(
    is_pos: np.ndarray,
    is_neg: np.ndarray,
    batch_size: int,
    pos_fraction: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Pick positive and negative indices without replacement.

    Positives are capped at ``batch_size * pos_fraction``; negatives fill the
    rest of the batch.
    """
    pos = np.flatnonzero(is_pos)
    neg = np.flatnonzero(is_neg)
    cap = int(round(batch_size * pos_fraction))
    if len(pos) > cap:
        pos = np.sort(rng.choice(pos, size=cap, replace=False))
    n_neg = min(batch_size - len(pos), len(neg))
    if len(neg) > n_neg:
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
    return pos, neg


@dataclass(frozen=True)
class AnchorTargets:
    labels: np.ndarray  # POSITIVE / NEGATIVE / IGNORE per anchor
    offsets: np.ndarray  # (K*T, 2) regression targets, zero where not positive


def anchor_targets(T: int, config: SPNConfig, gts) -> AnchorTargets:
    anchors = seg.anchor_grid(T, config.anchor_scales)
    labels, matched = seg.match_anchors(anchors, gts)
    targets = np.zeros((len(anchors), 2))
    pos = labels == seg.POSITIVE
    if pos.any():
        targets[pos] = seg.encode(seg.as_rows(gts)[matched[pos]], anchors[pos])
    return AnchorTargets(labels, targets)


def spn_loss(
    output: SPNOutput,
    targets: AnchorTargets,
    rng: np.random.Generator | None = None,
    batch_size: int = 256,
    pos_fraction: float = 0.5,
    reg_weight: float = 1.0,
    sample: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Sampled objectness cross-entropy plus smooth-L1 on positive anchors.

    Pass ``sample`` to reuse a precomputed (pos, neg) index split; otherwise
    it is drawn from ``rng``.
    """
    if sample is None:
        if rng is None:
            raise ValueError("need rng or a precomputed sample")
        sample = sample_minibatch(
            targets.labels == seg.POSITIVE, targets.labels == seg.NEGATIVE, batch_size, pos_fraction, rng
        )
    pos, neg = sample
    idx = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    loss = sigmoid_cross_entropy(take_rows(output.flat_logits(), idx), y)
    if len(pos) and reg_weight:
        reg = smooth_l1(take_rows(output.flat_offsets(), pos), targets.offsets[pos])
        loss = add(loss, scale(reg, reg_weight / len(pos)))
    return loss

