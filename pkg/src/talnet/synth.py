"""Deterministic two-stream synthetic untrimmed videos.

Each action instance writes a class signature into the features over its
span; optional flank cues of half the instance length sit just before and
after it. Stream B sees the same signal scaled by ``stream_correlation``
with its own noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .tensor import FeatureGrid


@dataclass(frozen=True)
class SynthConfig:
    num_train: int = 200
    num_test: int = 100
    T: int = 256
    D: int = 16
    num_classes: int = 3
    mean_instances: float = 3.0
    max_instances: int = 6
    min_len: int = 1
    max_len: int = 16
    noise: float = 0.5
    context_cues: bool = True
    cue_strength: float = 0.5
    channel_keep: float = 0.75
    stream_correlation: float = 0.8
    cells_per_second: float = 0.625
    seed: int = 7

    def __post_init__(self):
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.max_len > self.T:
            raise ValueError("max_len exceeds T")
        if self.num_classes < 1 or self.D < 1 or self.T < 1:
            raise ValueError("T, D and num_classes must be positive")
        if not 0 <= self.stream_correlation <= 1:
            raise ValueError("stream_correlation must lie in [0, 1]")
        if self.max_instances < 1 or self.mean_instances <= 0:
            raise ValueError("instance counts must be positive")
        if self.max_instances * footprint(self.max_len) > self.T:
            raise ValueError(
                f"infeasible packing: {self.max_instances} instances of up to {self.max_len} cells "
                f"(with flanks) do not fit in T={self.T}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VideoSample:
    id: str
    stream_a: FeatureGrid
    stream_b: FeatureGrid
    gt_rows: np.ndarray  # (n, 2) start/end in cells
    gt_labels: np.ndarray  # (n,) classes in [1, C]

    @property
    def T(self) -> int:
        return self.stream_a.T

    def instances(self) -> list[tuple[float, float, int]]:
        return [(float(a), float(b), int(c)) for (a, b), c in zip(self.gt_rows, self.gt_labels)]


@dataclass
class Dataset:
    train: list[VideoSample] = field(default_factory=list)
    test: list[VideoSample] = field(default_factory=list)
    config: SynthConfig | None = None


def footprint(length: int) -> int:
    """Cells reserved for an instance: its span plus a flank of ceil(len/2) per side."""
    return length + 2 * math.ceil(length / 2)


def class_patterns(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class (C, D) sign signatures for the action span and for flank cues."""
    rng = np.random.default_rng([config.seed, 0xC1A55])
    C, D = config.num_classes, config.D
    body = _distinct_signs(rng, C, D)
    cue = _distinct_signs(rng, C, D)
    return body, cue


def _distinct_signs(rng: np.random.Generator, n: int, D: int) -> np.ndarray:
    out: list[np.ndarray] = []
    while len(out) < n:
        v = rng.choice([-1.0, 1.0], size=D)
        if all(np.abs(v @ w) < D for w in out):
            out.append(v)
    return np.stack(out)


def _waveform(label: int, length: int) -> np.ndarray:
    """Temporal envelope of a class over its span (relative position in [0, 1))."""
    u = (np.arange(length) + 0.5) / length
    return 1.0 + 0.25 * np.cos(2 * np.pi * label * u)


def _layout(config: SynthConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    n = int(np.clip(rng.poisson(config.mean_instances), 1, config.max_instances))
    lo, hi = math.log(config.min_len), math.log(config.max_len + 1)
    lengths = np.minimum(np.floor(np.exp(rng.uniform(lo, hi, size=n))).astype(int), config.max_len)
    lengths = np.maximum(lengths, config.min_len)
    labels = rng.integers(1, config.num_classes + 1, size=n)
    prints = [footprint(int(L)) for L in lengths]
    free = config.T - sum(prints)
    cuts = np.sort(rng.integers(0, free + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts]))
    out = []
    pos = 0
    for L, c, fp, gap in zip(lengths, labels, prints, gaps):
        pos += int(gap)
        flank = (fp - int(L)) // 2
        out.append((pos + flank, pos + flank + int(L), int(c)))
        pos += fp
    return out


def generate_video(config: SynthConfig, index: int, split: str, patterns=None) -> VideoSample:
    body, cue = patterns if patterns is not None else class_patterns(config)
    split_code = 0 if split == "train" else 1
    rng = np.random.default_rng([config.seed, split_code, index])
    T, D = config.T, config.D
    signal = np.zeros((T, D))
    layout = _layout(config, rng)
    for start, end, c in layout:
        L = end - start
        keep = rng.random(D) < config.channel_keep
        if not keep.any():
            keep[rng.integers(D)] = True
        signal[start:end] += _waveform(c, L)[:, None] * (body[c - 1] * keep)[None, :]
        if config.context_cues:
            f = math.ceil(L / 2)
            signal[start - f : start] += config.cue_strength * cue[c - 1]
            signal[end : end + f] -= config.cue_strength * cue[c - 1]
    a = signal + config.noise * rng.standard_normal((T, D))
    b = config.stream_correlation * signal + config.noise * rng.standard_normal((T, D))
    rows = np.array([[s, e] for s, e, _ in layout], dtype=np.float64).reshape(-1, 2)
    labels = np.array([c for _, _, c in layout], dtype=np.int64)
    vid = f"{split}-{index:04d}"
    return VideoSample(
        vid,
        FeatureGrid(a.astype(np.float32), config.cells_per_second),
        FeatureGrid(b.astype(np.float32), config.cells_per_second),
        rows,
        labels,
    )


def generate(config: SynthConfig) -> Dataset:
    patterns = class_patterns(config)
    train = [generate_video(config, i, "train", patterns) for i in range(config.num_train)]
    test = [generate_video(config, i, "test", patterns) for i in range(config.num_test)]
    return Dataset(train, test, config)
