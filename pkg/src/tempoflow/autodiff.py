"""Minimal reverse-mode autodiff over dense numpy arrays.

Tape-based: each op appends an adjoint closure to the active tape and
backward() replays the closures in reverse order, visiting every recorded
op exactly once. The operator set is exactly what the vector-field network
and its training loop need; there is no graph optimization, no fusion and
no higher-order derivatives. Gradient accumulation across fan-out is
additive in recording order, so gradients are bit-deterministic for a
fixed op sequence.

Broadcasting in add/mul follows numpy semantics restricted to leading-axis
expansion plus size-1 axes (needed for per-sample time embeddings and
attention biases); anything else is rejected.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operator."""


class Tape:
    """Ordered record of executed ops, each with its adjoint closure."""

    def __init__(self):
        self._records: list[tuple[str, Callable[[], None]]] = []

    def record(self, op_name: str, adjoint: Callable[[], None]) -> None:
        self._records.append((op_name, adjoint))

    def __len__(self) -> int:
        return len(self._records)


_active_tape: Tape | None = None


@contextmanager
def tape() -> Iterator[Tape]:
    """Activate a fresh tape for the duration of the block (one per step)."""
    global _active_tape
    prev = _active_tape
    _active_tape = tp = Tape()
    try:
        yield tp
    finally:
        _active_tape = prev


class Tensor:
    """Dense real array plus an optional same-shape gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _record(op_name: str, out: Tensor, inputs: Sequence[Tensor], adjoint) -> Tensor:
    """Mark `out` as traced if any input needs grad and a tape is active."""
    if _active_tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _active_tape.record(op_name, adjoint)
    return out


def backward(tp: Tape, root: Tensor) -> None:
    """Replay adjoints in reverse; leaves accumulate d(root)/d(leaf)."""
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    root.grad = np.ones_like(root.data)
    for _, adjoint in reversed(tp._records):
        adjoint()


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def adjoint():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b.shape))

    return _record("add", out, (a, b), adjoint)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, smul(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def adjoint():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    return _record("mul", out, (a, b), adjoint)


def smul(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def adjoint():
        if out.grad is not None and a.requires_grad:
            _accumulate(a, out.grad * c)

    return _record("smul", out, (a,), adjoint)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D or batched-leading a; b may be 2-D (shared weights)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape} vs {b.shape} differ")
    out = Tensor(np.matmul(a.data, b.data))

    def adjoint():
        if out.grad is None:
            return
        g = out.grad
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, gb)

    return _record("matmul", out, (a, b), adjoint)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))

    def adjoint():
        if out.grad is not None and a.requires_grad:
            _accumulate(a, np.transpose(out.grad, inv))

    return _record("transpose", out, (a,), adjoint)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))

    def adjoint():
        if out.grad is not None and a.requires_grad:
            _accumulate(a, out.grad.reshape(a.shape))

    return _record("reshape", out, (a,), adjoint)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ref = list(ts[0].shape)
    for t in ts[1:]:
        s = list(t.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(
                f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}"
            )
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def adjoint():
        if out.grad is None:
            return
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, out.grad[tuple(idx)])

    return _record("concat", out, ts, adjoint)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}) outside axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def adjoint():
        if out.grad is not None and a.requires_grad:
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            _accumulate(a, g)

    return _record("narrow", out, (a,), adjoint)


# ----------------------------------------------------------------------------
# nonlinearities / normalization


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def adjoint():
        if out.grad is not None and a.requires_grad:
            g = out.grad
            _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _record("softmax", out, (a,), adjoint)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def adjoint():
        if out.grad is not None and a.requires_grad:
            _accumulate(a, out.grad / a.data)

    return _record("log", out, (a,), adjoint)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = Tensor(x * cdf)

    def adjoint():
        if out.grad is not None and a.requires_grad:
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            _accumulate(a, out.grad * (cdf + x * pdf))

    return _record("gelu", out, (a,), adjoint)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature dim {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def adjoint():
        if out.grad is None:
            return
        g = out.grad
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, (gx - m1 - xhat * m2) * inv)
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))

    return _record("layer_norm", out, (a, gain, bias), adjoint)


def conv1d_depthwise(a: Tensor, w: Tensor) -> Tensor:
    """Depthwise 1-D convolution along the time axis with same padding.

    a: (..., T, D), w: (k, D) with k odd. Channel d is filtered only by
    column d of the kernel.
    """
    a, w = _as_tensor(a), _as_tensor(w)
    k, d = w.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d_depthwise: kernel length {k} must be odd")
    if a.shape[-1] != d:
        raise ShapeError(f"conv1d_depthwise: channels {a.shape} vs kernel {w.shape}")
    t = a.shape[-2]
    p = k // 2

    def corr(x, kern):
        pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
        xp = np.pad(x, pad)
        acc = np.zeros_like(x)
        for j in range(k):
            acc += xp[..., j : j + t, :] * kern[j]
        return acc, xp

    y, xp = corr(a.data, w.data)
    out = Tensor(y)

    def adjoint():
        if out.grad is None:
            return
        g = out.grad
        if a.requires_grad:
            _accumulate(a, corr(g, w.data[::-1])[0])
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[j] = (xp[..., j : j + t, :] * g).reshape(-1, d).sum(axis=0)
            _accumulate(w, gw)

    return _record("conv1d_depthwise", out, (a, w), adjoint)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer index array `ids`."""
    table = _as_tensor(table)
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    out = Tensor(table.data[idx])

    def adjoint():
        if out.grad is not None and table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, idx, out.grad)
            _accumulate(table, g)

    return _record("embedding", out, (table,), adjoint)


def mean(a: Tensor, axis: int | tuple | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis))
    n = a.data.size // max(out.data.size, 1)

    def adjoint():
        if out.grad is None or not a.requires_grad:
            return
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / n)

    return _record("mean", out, (a,), adjoint)


def sum_(a: Tensor, axis: int | tuple | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def adjoint():
        if out.grad is None or not a.requires_grad:
            return
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _record("sum", out, (a,), adjoint)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    """Mean over one axis (kept as a named alias of mean for pooling use)."""
    return mean(a, axis=axis)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ----------------------------------------------------------------------------
# gradient checking


def grad_check(f, x: Tensor, eps: float = 1e-5, coords: Sequence[int] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor and must be pure. Runs in float64.
    `coords` restricts the finite-difference scan to a flat-index subset.
    Error per coordinate: |a - c| / max(1e-8, |a| + |c|).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    base = np.asarray(x.data, dtype=np.float64).copy()
    leaf = Tensor(base.copy(), requires_grad=True)
    with tape() as tp:
        out = f(leaf)
    backward(tp, out)
    analytic = (np.zeros_like(base) if leaf.grad is None else leaf.grad).ravel()

    idxs = range(base.size) if coords is None else coords
    worst = 0.0
    flat = base.ravel()
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        central = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - central) / max(1e-8, abs(analytic[i]) + abs(central))
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# checkpoint serialization: flat list of named arrays, little-endian f32

_CKPT_MAGIC = b"TFL1"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays with shape headers as little-endian float32."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = data.copy()
    return out
