"""End-to-end detectors: single stream, early fusion and late fusion.

Late fusion keeps one SPN and one classifier per stream and averages their
logits and offsets, first over anchors and then over proposals. Early fusion
concatenates the two feature maps and runs a single pipeline.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import segments as seg
from .head import ClassifierHead, SoIConfig, build_head, classify, cls_loss, decode_detections
from .io import config_digest, load_checkpoint, save_checkpoint
from .metrics import EvalConfig, ar_an_curve, map_table
from .spn import SPN, SPNConfig, anchor_targets, build_spn, propose_arrays, sample_minibatch, spn_forward, spn_loss
from .synth import VideoSample
from .tensor import AdamState, ParamStore, Tensor, adam_step, add, concat_features, no_grad

MODES = ("single", "early", "late")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    reg_weight: float = 1.0
    spn_batch: int = 256
    spn_pos_fraction: float = 0.5
    cls_batch: int = 64
    cls_fg_fraction: float = 0.25
    add_gt_proposals: bool = True
    steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("spn_pos_fraction", "cls_fg_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")


@dataclass
class StreamModel:
    params: ParamStore
    spn: SPN
    head: ClassifierHead


@dataclass
class Detector:
    mode: str
    spn_config: SPNConfig
    soi_config: SoIConfig
    d_stream: int
    streams: list[StreamModel]
    precision: str = "standard"

    @property
    def stores(self) -> list[ParamStore]:
        # a stream may be listed twice when weights are shared
        out, seen = [], set()
        for s in self.streams:
            if id(s.params) not in seen:
                seen.add(id(s.params))
                out.append(s.params)
        return out

    def describe(self) -> dict:
        return {
            "mode": self.mode,
            "spn": asdict(self.spn_config),
            "soi": asdict(self.soi_config),
            "d_stream": self.d_stream,
            "precision": self.precision,
        }


def build_stream(spn_config: SPNConfig, soi_config: SoIConfig, d_in: int, rng, precision="standard") -> StreamModel:
    params = ParamStore(precision)
    spn = build_spn(spn_config, d_in, params, rng)
    head = build_head(soi_config, d_in, params, rng)
    return StreamModel(params, spn, head)


def build_detector(
    spn_config: SPNConfig,
    soi_config: SoIConfig,
    d_stream: int,
    mode: str = "late",
    seed: int = 0,
    precision: str = "standard",
) -> Detector:
    if mode not in MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {MODES}")
    rng = np.random.default_rng([seed, 0x5EED])
    d_in = 2 * d_stream if mode == "early" else d_stream
    n = 2 if mode == "late" else 1
    streams = [build_stream(spn_config, soi_config, d_in, rng, precision) for _ in range(n)]
    return Detector(mode, spn_config, soi_config, d_stream, streams, precision)


def stream_inputs(detector: Detector, stream_a, stream_b=None) -> list[Tensor]:
    """Per-model input tensors for the detector's fusion mode."""
    dtype = detector.streams[0].params.dtype
    a = Tensor(np.asarray(getattr(stream_a, "data", stream_a), dtype=dtype))
    if detector.mode == "single":
        return [a]
    if stream_b is None:
        raise ValueError(f"{detector.mode} fusion needs two streams")
    b = Tensor(np.asarray(getattr(stream_b, "data", stream_b), dtype=dtype))
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"stream length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if detector.mode == "early":
        return [concat_features(a, b)]
    return [a, b]


def _average(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if len(arrays) == 1:
        return arrays[0]
    return (arrays[0] + arrays[1]) * arrays[0].dtype.type(0.5)


@dataclass
class VideoResult:
    proposals: np.ndarray  # (P, 2)
    proposal_scores: np.ndarray  # (P,)
    detections: list[tuple[np.ndarray, int, np.ndarray]] = field(default_factory=list)
    spn_logits: np.ndarray | None = None  # fused flat logits (K*T,)

    def detection_records(self) -> list[seg.Detection]:
        out = []
        for rows, label, scores in self.detections:
            for (a, b), s in zip(rows, scores):
                out.append(seg.Detection(seg.Segment(float(a), float(b)), label, float(s)))
        return out


def detect(detector: Detector, stream_a, stream_b=None, nms_threshold: float = 0.7) -> VideoResult:
    """Run proposal generation and classification on one video."""
    inputs = stream_inputs(detector, stream_a, stream_b)
    T = inputs[0].shape[0]
    with no_grad():
        outs = [spn_forward(m.spn, x) for m, x in zip(detector.streams, inputs)]
        logits = _average([o.flat_logits().data for o in outs])
        offsets = _average([o.flat_offsets().data for o in outs])
        rows, scores = propose_arrays(logits, offsets, detector.spn_config, T)
        if len(rows) == 0:
            return VideoResult(rows, scores, [], logits)
        heads = [classify(m.head, x, rows) for m, x in zip(detector.streams, inputs)]
        cls_logits = _average([h[0].data for h in heads])
        cls_offsets = _average([h[1].data for h in heads])
    dets = decode_detections(rows, cls_logits, cls_offsets, T, nms_threshold)
    return VideoResult(rows, scores, dets, logits)


@dataclass
class StepLosses:
    proposal: float
    classification: float

    @property
    def total(self) -> float:
        return self.proposal + self.classification


def train_step(
    detector: Detector,
    video: VideoSample,
    config: TrainConfig,
    adam: AdamState,
    rng: np.random.Generator,
) -> StepLosses:
    """One joint update of both stages on a single video.

    Every stream is trained against the same sampled anchors and proposals;
    the proposals come from the current fused SPN output.
    """
    inputs = stream_inputs(detector, video.stream_a, video.stream_b)
    T = inputs[0].shape[0]
    gts = video.gt_rows

    outs = [spn_forward(m.spn, x) for m, x in zip(detector.streams, inputs)]
    targets = anchor_targets(T, detector.spn_config, gts)
    sample = sample_minibatch(
        targets.labels == seg.POSITIVE,
        targets.labels == seg.NEGATIVE,
        config.spn_batch,
        config.spn_pos_fraction,
        rng,
    )
    prop_loss = None
    for o in outs:
        part = spn_loss(o, targets, reg_weight=config.reg_weight, sample=sample)
        prop_loss = part if prop_loss is None else add(prop_loss, part)

    logits = _average([o.flat_logits().data for o in outs])
    offsets = _average([o.flat_offsets().data for o in outs])
    rows, _ = propose_arrays(logits, offsets, detector.spn_config, T)
    if config.add_gt_proposals and len(gts):
        rows = np.concatenate([rows, gts], axis=0)
    labels, reg_targets = seg.assign_proposal_labels(rows, gts, video.gt_labels)
    fg, bg = sample_minibatch(labels > 0, labels == 0, config.cls_batch, config.cls_fg_fraction, rng)
    chosen = np.concatenate([fg, bg])
    cls_total = None
    if len(chosen):
        for m, x in zip(detector.streams, inputs):
            lg, off = classify(m.head, x, rows[chosen])
            part = cls_loss(lg, off, labels[chosen], reg_targets[chosen], config.reg_weight)
            cls_total = part if cls_total is None else add(cls_total, part)

    loss = prop_loss if cls_total is None else add(prop_loss, cls_total)
    for store in detector.stores:
        store.zero_grad()
    loss.backward()
    adam_step(detector.stores, adam)
    return StepLosses(prop_loss.item(), 0.0 if cls_total is None else cls_total.item())


@dataclass
class TrainState:
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    order: np.ndarray | None = None
    history: list[StepLosses] = field(default_factory=list)


def new_train_state(config: TrainConfig) -> TrainState:
    return TrainState(AdamState(lr=config.lr), np.random.default_rng([config.seed, 0x7A1]))


def train(
    detector: Detector,
    videos: Sequence[VideoSample],
    config: TrainConfig,
    state: TrainState | None = None,
    steps: int | None = None,
    log_every: int = 0,
    log=print,
) -> TrainState:
    """Run ``steps`` single-video updates, visiting videos in seeded epoch order."""
    if not videos:
        raise ValueError("no training videos")
    state = state or new_train_state(config)
    target = state.step + (config.steps if steps is None else steps)
    n = len(videos)
    while state.step < target:
        pos = state.step % n
        if pos == 0 or state.order is None:
            state.order = state.rng.permutation(n)
        losses = train_step(detector, videos[state.order[pos]], config, state.adam, state.rng)
        state.history.append(losses)
        state.step += 1
        if log_every and state.step % log_every == 0:
            recent = state.history[-log_every:]
            log(
                f"step {state.step}: proposal {np.mean([h.proposal for h in recent]):.4f} "
                f"classification {np.mean([h.classification for h in recent]):.4f}"
            )
    return state


# --------------------------------------------------------------------------
# checkpoints


def model_digest(detector: Detector, train_config: TrainConfig | None = None) -> str:
    desc = detector.describe()
    if train_config is not None:
        tc = asdict(train_config)
        tc.pop("steps")
        desc["train"] = tc
    return config_digest(desc)


def save_detector(path, detector: Detector, train_config: TrainConfig | None = None, state: TrainState | None = None):
    arrays = {}
    for i, store in enumerate(detector.stores):
        for name, arr in store.state().items():
            arrays[f"stream{i}/{name}"] = arr
    meta = {
        "model": detector.describe(),
        "digest": model_digest(detector, train_config),
        "train": asdict(train_config) if train_config is not None else None,
        "shared_weights": len(detector.stores) != len(detector.streams),
    }
    if state is not None:
        meta["step"] = state.step
        meta["adam"] = {"step": state.adam.step, "lr": state.adam.lr, "beta1": state.adam.beta1,
                        "beta2": state.adam.beta2, "eps": state.adam.eps}
        meta["rng"] = state.rng.bit_generator.state
        meta["order"] = None if state.order is None else [int(i) for i in state.order]
        for key, arr in state.adam.m.items():
            arrays[f"adam.m/{key}"] = arr
        for key, arr in state.adam.v.items():
            arrays[f"adam.v/{key}"] = arr
    save_checkpoint(path, arrays, meta)


def detector_from_description(desc: dict) -> Detector:
    spn_d = dict(desc["spn"])
    spn_d["anchor_scales"] = tuple(spn_d["anchor_scales"])
    return build_detector(
        SPNConfig(**spn_d), SoIConfig(**desc["soi"]), desc["d_stream"], desc["mode"], 0, desc["precision"]
    )


def load_detector(path) -> tuple[Detector, dict, TrainState | None]:
    arrays, meta = load_checkpoint(path)
    detector = detector_from_description(meta["model"])
    if meta.get("shared_weights"):
        detector.streams = [detector.streams[0]] * len(detector.streams)
    for i, store in enumerate(detector.stores):
        prefix = f"stream{i}/"
        store.load_state({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    state = None
    if "adam" in meta:
        a = meta["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
        for k, v in arrays.items():
            if k.startswith("adam.m/"):
                adam.m[k[len("adam.m/"):]] = v
            elif k.startswith("adam.v/"):
                adam.v[k[len("adam.v/"):]] = v
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        order = None if meta.get("order") is None else np.asarray(meta["order"], dtype=np.int64)
        state = TrainState(adam, rng, meta["step"], order)
    return detector, meta, state


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    ar_rows: list[tuple[int, float, float]]
    ar: dict[int, float]
    map_rows: list[tuple[str, float, float]]
    proposals: dict
    detections: dict

    def mean_ap(self, tiou: float) -> float:
        for c, t, ap in self.map_rows:
            if c == "mean" and abs(t - tiou) < 1e-9:
                return ap
        raise KeyError(f"no mAP row for tIoU {tiou}")


def ground_truth(videos: Sequence[VideoSample]) -> dict:
    return {v.id: (v.gt_rows, v.gt_labels) for v in videos}


def run_inference(detector: Detector, videos: Sequence[VideoSample]) -> tuple[dict, dict]:
    proposals, detections = {}, {}
    for v in videos:
        r = detect(detector, v.stream_a, v.stream_b)
        proposals[v.id] = (r.proposals, r.proposal_scores)
        detections[v.id] = r.detections
    return proposals, detections


def evaluate_dataset(detector: Detector, videos: Sequence[VideoSample], eval_config=None) -> EvalResult:
    if not videos:
        raise ValueError("empty dataset")
    eval_config = eval_config or EvalConfig()
    proposals, detections = run_inference(detector, videos)
    gts = ground_truth(videos)
    ar_rows, ar = ar_an_curve(proposals, gts, eval_config.an_grid, eval_config.proposal_tious)
    rows = map_table(detections, gts, eval_config.detection_tious)
    return EvalResult(ar_rows, ar, rows, proposals, detections)
