"""Dense float64 tensors with tape-based reverse-mode autodiff.

numpy supplies storage and vectorized arithmetic; gradient propagation is
recorded on an explicit tape (one node per executed op, in execution order)
and replayed in reverse. The tape stack is thread-local, so independent
tapes may run on separate threads; within one tape everything is
single-threaded.

Typical training step::

    with Tape() as tape:
        loss = ...            # forward pass built from the ops below
        tape.backward(loss)   # populates .grad on every requires_grad leaf
    optimizer.step()
    optimizer.zero_grad()

Ops executed while no tape is active still compute forward values (that is
inference mode); they are simply not differentiable afterwards.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7  # predictions are clamped to [BCE_EPS, 1 - BCE_EPS] before the log

# nearest representable doubles inside (0, 1); sigmoid saturates onto these
_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    ``data`` is immutable by convention once the tensor has been produced by
    a forward op; only leaf parameters are updated in place (between tapes)
    and only ``grad`` accumulates during backward.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Tape:
    """Execution-ordered op record; every node's inputs precede it."""

    def __init__(self):
        # node = (output tensor, input tensors, backward rule)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and replay the tape once, in reverse.

        Gradients accumulate additively into every requires_grad ancestor
        of ``loss``; tensors not on a path to ``loss`` keep grad None.
        """
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones((), dtype=np.float64))
        for out, _inputs, rule in reversed(self.nodes):
            if out.grad is None:
                continue
            rule(out.grad)

    def clear(self) -> None:
        self.nodes.clear()


_LOCAL = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule: Callable[[np.ndarray], None]) -> None:
    stack = _tape_stack()
    if stack and out.requires_grad:
        stack[-1].nodes.append((out, inputs, rule))


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _needs_grad(a, b))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    _record(out, (a, b), rule)
    return out


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _needs_grad(a, b))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    _record(out, (a, b), rule)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * c)

    _record(out, (a,), rule)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    _record(out, (a,), rule)
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function, computed branch-wise for stability.

    Outputs are strictly inside (0, 1): where float64 rounding would
    saturate to 0 or 1 the result is clamped to the nearest representable
    value inside the interval (error below one ulp).
    """
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    exn = np.exp(-x[pos])
    s[pos] = 1.0 - exn / (1.0 + exn)
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    np.clip(s, _SIGMOID_LO, _SIGMOID_HI, out=s)
    out = Tensor(s, a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    _record(out, (a,), rule)
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    _record(out, (a,), rule)
    return out


def flatten_row(a: Tensor) -> Tensor:
    """Flatten to a single row vector (1 x n)."""
    return reshape(a, (1, a.size))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy(), a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.T)

    _record(out, (a,), rule)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _needs_grad(*tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx: list = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    _record(out, tuple(tensors), rule)
    return out


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=0)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop].copy(), a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[start:stop] = g
            a.accumulate_grad(buf)

    _record(out, (a,), rule)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a matrix, got shape {a.shape}")
    out = Tensor(a.data[:, start:stop].copy(), a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[:, start:stop] = g
            a.accumulate_grad(buf)

    _record(out, (a,), rule)
    return out


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx].copy(), a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a.accumulate_grad(buf)

    _record(out, (a,), rule)
    return out


def tile_rows(a: Tensor, n: int) -> Tensor:
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise ShapeError(f"tile_rows expects a 1 x k row, got shape {a.shape}")
    out = Tensor(np.repeat(a.data, n, axis=0), a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.sum(axis=0, keepdims=True))

    _record(out, (a,), rule)
    return out


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Gradients: dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, _needs_grad(a, b))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    _record(out, (a, b), rule)
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    _record(out, (a,), rule)
    return out


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean(), a.requires_grad)
    n = a.data.size

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / n))

    _record(out, (a,), rule)
    return out


def rows_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row dot product of two n x k matrices, giving an n-vector."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"rows_dot: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor((a.data * b.data).sum(axis=1), _needs_grad(a, b))

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g[:, None] * b.data)
        if b.requires_grad:
            b.accumulate_grad(g[:, None] * a.data)

    _record(out, (a, b), rule)
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; each row sums to 1."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, a.requires_grad)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(y * (g - (g * y).sum(axis=1, keepdims=True)))

    _record(out, (a,), rule)
    return out


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows expects a matrix, got shape {x.shape}")
    d = x.data.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(xh * gain.data + bias.data, _needs_grad(x, gain, bias))

    def rule(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain.accumulate_grad((g * xh).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            dxh = g * gain.data
            dvar = (dxh * xc).sum(axis=1, keepdims=True) * (-0.5) * inv**3
            dmu = -dxh.sum(axis=1, keepdims=True) * inv
            x.accumulate_grad(dxh * inv + dvar * (2.0 / d) * xc + dmu / d)

    _record(out, (x, gain, bias), rule)
    return out


# ---------------------------------------------------------------------------
# attention-specific primitives


def broadcast_expand_mul(att: Tensor, v: Tensor) -> Tensor:
    """out[i, j, k] = att[i, j] * v[j, k] (explicit N x M x d expansion)."""
    if att.data.ndim != 2 or v.data.ndim != 2 or att.shape[1] != v.shape[0]:
        raise ShapeError(f"broadcast_expand_mul: incompatible shapes {att.shape} and {v.shape}")
    out = Tensor(att.data[:, :, None] * v.data[None, :, :], _needs_grad(att, v))

    def rule(g: np.ndarray) -> None:
        if att.requires_grad:
            att.accumulate_grad((g * v.data[None, :, :]).sum(axis=2))
        if v.requires_grad:
            v.accumulate_grad((g * att.data[:, :, None]).sum(axis=0))

    _record(out, (att, v), rule)
    return out


def max_pool_axis1(t: Tensor) -> Tensor:
    """Max over the middle axis of an N x M x d tensor.

    Backward routes the incoming gradient only to the argmax positions;
    ties break toward the lowest middle index, so gradient mass per (i, k)
    is preserved exactly.
    """
    if t.data.ndim != 3:
        raise ShapeError(f"max_pool_axis1 expects an N x M x d tensor, got shape {t.shape}")
    n, m, d = t.data.shape
    if m == 0:
        raise ShapeError("max_pool_axis1: empty middle axis")
    idx = np.argmax(t.data, axis=1)  # first occurrence = lowest j on ties
    out = Tensor(np.take_along_axis(t.data, idx[:, None, :], axis=1)[:, 0, :], t.requires_grad)

    def rule(g: np.ndarray) -> None:
        if t.requires_grad:
            buf = np.zeros_like(t.data)
            ii = np.arange(n)[:, None]
            kk = np.arange(d)[None, :]
            buf[ii, idx, kk] = g
            t.accumulate_grad(buf)

    _record(out, (t,), rule)
    return out


# ---------------------------------------------------------------------------
# convolution


def conv2d(img: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) cross-correlation of a C x H x W image with
    F x C x k x k kernels; output is F x H' x W' with
    H' = (H - k) // stride + 1."""
    if img.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: need CxHxW image and FxCxkxk kernels, got {img.shape} and {kernels.shape}")
    c, h, w = img.data.shape
    f, c2, k, k2 = kernels.data.shape
    if c2 != c or k != k2:
        raise ShapeError(f"conv2d: kernel shape {kernels.shape} does not match {c} input channels")
    if k > h or k > w:
        raise ShapeError(f"conv2d: kernel size {k} exceeds input {h}x{w}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    win = np.lib.stride_tricks.sliding_window_view(img.data, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * k * k)
    w2 = kernels.data.reshape(f, c * k * k)
    out = Tensor((cols @ w2.T).T.reshape(f, ho, wo), _needs_grad(img, kernels))

    def rule(g: np.ndarray) -> None:
        g2 = g.reshape(f, ho * wo)
        if kernels.requires_grad:
            kernels.accumulate_grad((g2 @ cols).reshape(f, c, k, k))
        if img.requires_grad:
            dwin = (g2.T @ w2).reshape(ho, wo, c, k, k).transpose(2, 0, 1, 3, 4)
            dimg = np.zeros_like(img.data)
            for i2 in range(k):
                for j2 in range(k):
                    dimg[:, i2 : i2 + stride * ho : stride, j2 : j2 + stride * wo : stride] += dwin[:, :, :, i2, j2]
            img.accumulate_grad(dimg)

    _record(out, (img, kernels), rule)
    return out


# ---------------------------------------------------------------------------
# losses


def bce(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy of predictions in (0, 1) against {0, 1} targets.

    Predictions are clamped to [BCE_EPS, 1 - BCE_EPS]; the clamp has zero
    gradient outside its bounds.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"bce: prediction shape {pred.shape} != target shape {target.shape}")
    t = target.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce: target values outside {0, 1}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    out = Tensor(losses.mean(), pred.requires_grad)
    n = p.size

    def rule(g: np.ndarray) -> None:
        if pred.requires_grad:
            inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)
            pred.accumulate_grad(float(g) / n * inside * (p - t) / (p * (1.0 - p)))

    _record(out, (pred, target), rule)
    return out


# ---------------------------------------------------------------------------
# parameters and optimization


class ParamStore:
    """Creates, names and owns all trainable tensors of a model.

    Weight-style entries are drawn uniformly from
    [-1/sqrt(fan_in), +1/sqrt(fan_in)] using one seeded generator, so a
    fixed construction order plus a fixed seed reproduces parameters
    bit-identically.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def _register(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=shape)
        return self._register(name, Tensor(data, requires_grad=True))

    def full(self, name: str, shape: tuple[int, ...], value: float) -> Tensor:
        return self._register(name, Tensor(np.full(shape, value), requires_grad=True))

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


class SGD:
    """Momentum SGD: v <- momentum*v + grad + weight_decay*param;
    param <- param - lr*v. Velocity buffers exist iff momentum > 0."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0 or not 0 <= momentum < 1 or weight_decay < 0:
            raise ValueError(f"bad optimizer settings lr={lr} momentum={momentum} weight_decay={weight_decay}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] | None = (
            {name: np.zeros_like(p.data) for name, p in params.items()} if momentum > 0 else None
        )

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            if self.velocity is not None:
                v = self.velocity[name]
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
