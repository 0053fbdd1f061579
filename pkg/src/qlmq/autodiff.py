"""Reverse-mode automatic differentiation over dense numpy tensors.

Small by design: exactly the primitives the toy transformer and the
distillation losses need. Other modules (quantizers, distillation) register
their own primitives through :func:`record_op`, and scheme-specific backward
rules can be overridden per-tape via :meth:`Tape.register_gradient`, which is
how straight-through estimators and the learned-scaling gradient plug in.

Conventions:
  * tensors are float32 by default; every op runs unchanged at float64,
    which is what the finite-difference gradient checks use;
  * forward ops never mutate their inputs and abort the step if they
    produce NaN/Inf (quantized training instability must surface, not
    propagate);
  * backward walks the tape in exact reverse recording order, so gradient
    accumulation order (and therefore the bits) is deterministic.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import AbortedStepError, ContractError, ShapeError

_node_ids = itertools.count()

_ACTIVE_TAPE: Optional["Tape"] = None


class Tensor:
    """Dense n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constant 0-d tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not a primitive; multiply by a reciprocal")
        return mul(self, _as_tensor(1.0 / float(other), self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _OpRecord:
    __slots__ = ("kind", "inputs", "output", "ctx", "grad_fn")

    def __init__(self, kind, inputs, output, ctx, grad_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.ctx = ctx
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of operations plus a custom-gradient registry.

    Use as a context manager around a forward pass; call :meth:`backward`
    on the resulting scalar loss. Gradient rules registered under an op
    kind replace that op's default backward for this tape only.
    """

    def __init__(self):
        self._records: list[_OpRecord] = []
        self._custom: dict[str, Callable] = {}

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def register_gradient(self, kind: str, fn: Callable) -> None:
        """Override the backward rule for every recorded op of this kind."""
        self._custom[kind] = fn

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

        Visits records in exact reverse recording order; repeated calls
        accumulate (callers reset grads between steps).
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        flows: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.data)
        }
        touched: dict[int, Tensor] = {loss.node_id: loss}
        for rec in reversed(self._records):
            g = flows.get(rec.output.node_id)
            if g is None:
                continue
            rule = self._custom.get(rec.kind, rec.grad_fn)
            input_grads = rule(rec.ctx, g)
            for t, ig in zip(rec.inputs, input_grads):
                if ig is None or not t.requires_grad:
                    continue
                prev = flows.get(t.node_id)
                flows[t.node_id] = ig if prev is None else prev + ig
                touched[t.node_id] = t
        for node_id, t in touched.items():
            if not t.requires_grad:
                continue
            flow = flows[node_id]
            t.grad = flow.copy() if t.grad is None else t.grad + flow


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def record_op(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, ctx, grad_fn) -> Tensor:
    """Create the output tensor of a primitive and record it on the active tape.

    ``grad_fn(ctx, grad_out) -> tuple`` returns one gradient array (or None)
    per input. Aborts the step if the forward produced non-finite values.
    """
    if not np.isfinite(out_data).all():
        raise AbortedStepError(kind)
    tape = _ACTIVE_TAPE
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape._records.append(_OpRecord(kind, tuple(inputs), out, ctx, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    ctx = (a.data.shape, b.data.shape)

    def grad_fn(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record_op("add", (a, b), out, ctx, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    ctx = (a.data.shape, b.data.shape)

    def grad_fn(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return record_op("sub", (a, b), out, ctx, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ctx = (a.data, b.data)

    def grad_fn(ctx, g):
        da, db = ctx
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)

    return record_op("mul", (a, b), out, ctx, grad_fn)


def neg(a: Tensor) -> Tensor:
    def grad_fn(ctx, g):
        return (-g,)

    return record_op("neg", (a,), -a.data, None, grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when either operand has leading dimensions."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = np.matmul(a.data, b.data)
    ctx = (a.data, b.data, a.requires_grad, b.requires_grad)

    def grad_fn(ctx, g):
        da, db, need_a, need_b = ctx
        ga = _unbroadcast(np.matmul(g, np.swapaxes(db, -1, -2)), da.shape) if need_a else None
        gb = _unbroadcast(np.matmul(np.swapaxes(da, -1, -2), g), db.shape) if need_b else None
        return ga, gb

    return record_op("matmul", (a, b), out, ctx, grad_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(ctx, g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record_op("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)), None, grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def grad_fn(ctx, g):
        return (g.reshape(orig),)

    # reshape of a contiguous array is a view; forward data is never mutated
    # while a tape is alive, so sharing the buffer is safe
    return record_op("reshape", (a,), a.data.reshape(shape), None, grad_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ctx = (a.data.shape, axis, keepdims)

    def grad_fn(ctx, g):
        shape, ax, keep = ctx
        if ax is not None and not keep:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return record_op("sum", (a,), np.asarray(out), ctx, grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]
    ctx = (a.data.shape, axis, keepdims, count)

    def grad_fn(ctx, g):
        shape, ax, keep, n = ctx
        if ax is not None and not keep:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True) / n,)

    return record_op("mean", (a,), np.asarray(out), ctx, grad_fn)


def segment_sum(ids: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n_rows`` buckets keyed by ``ids``.

    Equivalent to ``np.add.at(out, ids, values)`` for row payloads, including
    the per-bucket accumulation order (occurrence order, via a stable sort),
    but considerably faster.
    """
    flat_ids = np.asarray(ids).reshape(-1)
    vals = np.asarray(values).reshape(flat_ids.shape[0], -1)
    out = np.zeros((n_rows, vals.shape[1]), dtype=vals.dtype)
    if flat_ids.size == 0:
        return out
    order = np.argsort(flat_ids, kind="stable")
    sorted_ids = flat_ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    out[sorted_ids[starts]] = np.add.reduceat(vals[order], starts, axis=0)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.data.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    out = table.data[ids]
    ctx = (table.data.shape, ids, table.data.dtype)

    def grad_fn(ctx, g):
        shape, idx, dt = ctx
        return (segment_sum(idx, g, shape[0]).reshape(shape).astype(dt, copy=False),)

    return record_op("embedding", (table,), out, ctx, grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _phi(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF, exact erf form."""
    return 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x), the exact (non-tanh) Gaussian error linear unit."""
    cdf = _phi(x.data).astype(x.data.dtype)
    out = x.data * cdf
    ctx = (x.data, cdf)

    def grad_fn(ctx, g):
        xd, c = ctx
        pdf = (_INV_SQRT_2PI * np.exp(-0.5 * xd * xd)).astype(xd.dtype)
        return (g * (c + xd * pdf),)

    return record_op("gelu", (x,), out, ctx, grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    ctx = (xhat, inv, gain.data, d)

    def grad_fn(ctx, g):
        xh, istd, gn, dim = ctx
        dxhat = g * gn
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xh).mean(axis=-1, keepdims=True)
        dx = istd * (dxhat - m1 - xh * m2)
        red = tuple(range(g.ndim - 1))
        return dx, (g * xh).sum(axis=red), g.sum(axis=red)

    return record_op("layer_norm", (x, gain, bias), out, ctx, grad_fn)


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability.

    ``mask`` (boolean, broadcastable to x) pins masked entries to exactly
    zero probability; the max and the normalizer only see unmasked entries.
    """
    if mask is None:
        m = x.data.max(axis=-1, keepdims=True)
        e = np.exp(x.data - m)
        denom = e.sum(axis=-1, keepdims=True)
        p = e / denom
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax mask leaves an entire row empty")
        m = np.max(np.where(mask, x.data, -np.inf), axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x.data - m, 0.0)), 0.0)
        p = e / e.sum(axis=-1, keepdims=True)
    ctx = (p,)

    def grad_fn(ctx, g):
        (prob,) = ctx
        dot = (g * prob).sum(axis=-1, keepdims=True)
        return (prob * (g - dot),)

    return record_op("softmax", (x,), p, ctx, grad_fn)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.data.shape}")
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), targets].mean()
    ctx = (np.exp(logp), targets, n)

    def grad_fn(ctx, g):
        p, tgt, rows = ctx
        gl = p.copy()
        gl[np.arange(rows), tgt] -= 1.0
        return (gl * (g / rows),)

    return record_op("cross_entropy", (logits,), np.asarray(loss, dtype=logits.data.dtype), ctx, grad_fn)
