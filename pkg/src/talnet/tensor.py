"""Small reverse-mode autodiff engine over numpy arrays.

Only the operators the detector needs are provided. Every op records its
parents and a closure that maps the output gradient to parent gradients;
``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PRECISIONS = {"standard": np.float32, "wide": np.float64}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def resolve_dtype(precision: str | np.dtype | type) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


@dataclass
class FeatureGrid:
    """One stream of one video: a T x D feature map sampled at a fixed rate."""

    data: np.ndarray
    cells_per_second: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"feature grid must be T x D with T, D >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature grid contains non-finite values")
        if not self.cells_per_second > 0:
            raise ValueError("cells_per_second must be positive")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]


class Tensor:
    """An array plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def backward(self) -> None:
        if self._backward is None:
            raise RuntimeError("backward() called on a tensor with no recorded forward graph")
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into the persistent buffer
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def record(data, parents: Iterable[Tensor], backward) -> Tensor:
    """Wrap an op result, keeping the graph edge only if a parent needs grad."""
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def mean_of(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise average of two same-shaped tensors."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in mean_of: {a.shape} vs {b.shape}")
    half = a.data.dtype.type(0.5)
    return record((a.data + b.data) * half, (a, b), lambda g: (g * half, g * half))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take_rows(a: Tensor, index) -> Tensor:
    """Gather ``a[index]`` along the first axis; repeated indices accumulate."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return record(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate(datas, axis=axis), tensors, backward)


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Stack two T x D grids along the feature axis."""
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"temporal length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return concat((a, b), axis=1)


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return record(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x of shape (..., D_in)."""
    if x.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, W {weight.shape}, b {bias.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data + bias.data

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record(out.reshape(*lead, weight.shape[1]), (x, weight, bias), backward)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Zero-padded, stride-1, same-length dilated cross-correlation.

    ``x`` is T x D_in, ``kernel`` is K x D_in x D_out with K odd. Output row t
    reads input rows ``t + (k - (K-1)/2) * dilation``.
    """
    K, d_in, d_out = kernel.shape
    if K % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {K}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if x.shape[1] != d_in or bias.shape != (d_out,):
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    T = x.shape[0]
    pad = (K - 1) // 2 * dilation
    xp = np.zeros((T + 2 * pad, d_in), dtype=x.dtype)
    xp[pad : pad + T] = x.data
    out = np.broadcast_to(bias.data, (T, d_out)).copy()
    for k in range(K):
        out += xp[k * dilation : k * dilation + T] @ kernel.data[k]

    def backward(g):
        gx = gw = None
        if kernel.requires_grad:
            gw = np.empty_like(kernel.data)
            for k in range(K):
                gw[k] = xp[k * dilation : k * dilation + T].T @ g
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[k * dilation : k * dilation + T] += g @ kernel.data[k].T
            gx = gxp[pad : pad + T]
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record(out, (x, kernel, bias), backward)


def maxpool1d(x: Tensor, kernel: int) -> Tensor:
    """Stride-1 max pooling over a centered window, edges truncated.

    Window for row t spans ``t - kernel//2 .. t + ceil(kernel/2) - 1``; rows
    outside the grid are skipped rather than zero-padded. Ties go to the
    earliest row.
    """
    if kernel < 1:
        raise ValueError(f"pool kernel must be >= 1, got {kernel}")
    if kernel == 1:
        return record(x.data.copy(), (x,), lambda g: (g,))
    T, D = x.shape
    left = kernel // 2
    xp = np.full((T + kernel - 1, D), -np.inf, dtype=x.dtype)
    xp[left : left + T] = x.data
    windows = np.stack([xp[j : j + T] for j in range(kernel)])
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def backward(g):
        gxp = np.zeros_like(xp)
        for j in range(kernel):
            gxp[j : j + T] += np.where(arg == j, g, 0)
        return (gxp[left : left + T],)

    return record(out, (x,), backward)


# --------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.intp)
    N, C = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"expected {N} labels, got shape {labels.shape}")
    if N and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(N)
    loss = -logp[rows, labels].sum() / max(N, 1)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / max(N, 1)),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def sigmoid_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of a logit vector against 0/1 targets."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"targets shape {y.shape} != logits shape {logits.shape}")
    x = logits.data
    n = max(x.size, 1)
    # log(1 + exp(-|x|)) + max(x, 0) - x*y
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / n

    def backward(g):
        return ((sigmoid(x) - y) * (g / n),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Sum of the Huber-style smooth L1 penalty with knee at 1."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"length mismatch in smooth_l1: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    absd = np.abs(diff)
    small = absd < 1
    loss = np.where(small, 0.5 * diff * diff, absd - 0.5).sum()

    def backward(g):
        return (np.where(small, diff, np.sign(diff)) * g,)

    return record(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Named learnable arrays, each with a gradient buffer of the same shape."""

    def __init__(self, precision="standard"):
        self.dtype = resolve_dtype(precision)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype)
        t = Tensor(value, requires_grad=True)
        t.grad = np.zeros_like(value)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in arrays.items():
            if v.shape != self._params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=self.dtype)
            self._params[k].grad = np.zeros_like(self._params[k].data)

    def init_uniform(self, name: str, shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def init_zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore | Sequence[ParamStore], state: AdamState) -> None:
    """Apply one bias-corrected Adam update using the stored gradients."""
    stores = [params] if isinstance(params, ParamStore) else list(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for si, store in enumerate(stores):
        for name, p in store.items():
            key = f"{si}:{name}"
            g = p.grad
            if key not in state.m:
                state.m[key] = np.zeros_like(p.data)
                state.v[key] = np.zeros_like(p.data)
            m, v = state.m[key], state.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
            p.data -= update.astype(p.dtype, copy=False)
