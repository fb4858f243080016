"""Receptive-field arithmetic for stride-1 layer stacks and tower rates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, take_rows, total


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "pool"
    kernel: int
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "pool"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.dilation < 1:
            raise ValueError("kernel and dilation must be >= 1")
        if self.kind == "pool" and self.dilation != 1:
            raise ValueError("pool layers have dilation 1")

    @property
    def reach(self) -> tuple[int, int]:
        """Cells read to the left and right of the output cell."""
        if self.kind == "pool":
            return self.kernel // 2, self.kernel - 1 - self.kernel // 2
        half = (self.kernel - 1) // 2 * self.dilation
        return half, (self.kernel - 1) * self.dilation - half


def pool(kernel: int) -> LayerSpec:
    return LayerSpec("pool", kernel)


def conv(kernel: int, dilation: int = 1) -> LayerSpec:
    return LayerSpec("conv", kernel, dilation)


def rf_extent(layers: Sequence[LayerSpec]) -> int:
    """Receptive field size in cells: ``1 + sum((k - 1) * d)``."""
    return 1 + sum((layer.kernel - 1) * layer.dilation for layer in layers)


def rf_reach(layers: Sequence[LayerSpec]) -> tuple[int, int]:
    left = sum(layer.reach[0] for layer in layers)
    right = sum(layer.reach[1] for layer in layers)
    return left, right


@dataclass(frozen=True)
class TowerSpec:
    anchor_scale: int
    context: bool
    layers: tuple[LayerSpec, ...]

    @property
    def pool_kernel(self) -> int:
        return self.layers[0].kernel

    @property
    def rates(self) -> tuple[int, int]:
        return self.layers[1].dilation, self.layers[2].dilation

    @property
    def extent(self) -> tuple[int, int]:
        return rf_reach(self.layers)

    @property
    def rf(self) -> int:
        return rf_extent(self.layers)


def base_rate(s: int) -> int:
    """``s / 6`` rounded half up, floored at 1."""
    return max(1, math.floor(s / 6 + 0.5))


def derive_rates(s: int, context: bool = False) -> TowerSpec:
    """Pool kernel and dilation rates for the tower serving anchor scale ``s``.

    Without context the tower covers roughly the anchor span; with context all
    three numbers double so the field also covers ``s/2`` on each side.
    """
    if s < 1:
        raise ValueError(f"anchor scale must be >= 1, got {s}")
    r = base_rate(s) * (2 if context else 1)
    layers = (pool(r), conv(3, r), conv(3, 2 * r))
    return TowerSpec(anchor_scale=s, context=context, layers=layers)


def empirical_rf(
    forward: Callable[[Tensor], Tensor],
    probe_length: int,
    d_in: int,
    trials: int = 16,
    seed: int = 0,
    dtype=np.float64,
) -> int:
    """Count input cells that can move the centre output of ``forward``.

    ``forward`` maps a T x d_in tensor to a T x d_out tensor. For each of
    ``trials`` random inputs the centre output row is summed and
    back-propagated; the union of cells with nonzero input gradient is
    counted. Several trials are needed because max pooling routes gradient to
    one cell per window.
    """
    if probe_length < 3:
        raise ValueError("probe too short")
    rng = np.random.default_rng(seed)
    center = probe_length // 2
    touched = np.zeros(probe_length, dtype=bool)
    for _ in range(trials):
        x = Tensor(rng.standard_normal((probe_length, d_in)).astype(dtype), requires_grad=True)
        out = forward(x)
        if out.shape[0] != probe_length:
            raise ValueError("forward must preserve temporal length")
        total(take_rows(out, [center])).backward()
        if x.grad is not None:
            touched |= np.any(x.grad != 0, axis=1)
    if touched[0] or touched[-1]:
        raise ValueError("probe too short: receptive field reaches the probe boundary")
    return int(touched.sum())


def tower_table(scales: Sequence[int], context: bool) -> list[TowerSpec]:
    return [derive_rates(s, context) for s in scales]


def format_tower_table(specs: Sequence[TowerSpec]) -> str:
    lines = []
    for t in specs:
        r1, r2 = t.rates
        left, right = t.extent
        ctx = "on" if t.context else "off"
        lines.append(f"s={t.anchor_scale} context={ctx} pool={t.pool_kernel},r1={r1},r2={r2},RF={t.rf} reach=-{left}/+{right}")
    return "\n".join(lines)
