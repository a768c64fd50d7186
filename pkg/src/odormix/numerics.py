"""A small reverse-mode autodiff over float64 numpy arrays.

Graphs are built by running ordinary code on :class:`Tensor` values; each
result remembers its parents and a closure that pushes its gradient back
to them. :func:`backward` walks the graph in reverse topological order.

Leading dimensions are treated as batch dimensions throughout, so the same
ops serve a single ``2 x d`` mixture and a ``B x 2 x d`` batch of them.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e30

DEBUG = bool(os.environ.get("ODORMIX_DEBUG"))

# Names of backward rules to perturb; only used by the self-check negative control.
_CORRUPTED: set[str] = set()


class NumericsError(ValueError):
    pass


class ShapeMismatch(NumericsError):
    pass


class AllMaskedRow(NumericsError):
    pass


class AllKeysMasked(AllMaskedRow):
    pass


class NonScalarLoss(NumericsError):
    pass


class NonFiniteValue(NumericsError):
    pass


@contextmanager
def corrupted(*ops: str):
    """Temporarily scale the named ops' backward rules by 1.01."""
    _CORRUPTED.update(ops)
    try:
        yield
    finally:
        _CORRUPTED.difference_update(ops)


def _maybe_corrupt(op: str, g: np.ndarray) -> np.ndarray:
    return g * 1.01 if op in _CORRUPTED else g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple[Tensor, ...] = (),
        _op: str = "leaf",
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        if DEBUG and not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"non-finite value produced by {_op}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self.op = _op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, -as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return add(as_tensor(other), -self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def swapaxes(self, a: int, b: int) -> Tensor:
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    return Tensor(data, _parents=tuple(parents), _op=op)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data + b.data, (a, b), "add")

    def _bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data * b.data, (a, b), "mul")

    def _bw(g):
        a._accumulate(_unbroadcast(_maybe_corrupt("mul", g * b.data), a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0.0), (x,), "relu")

    def _bw(g):
        x._accumulate(_maybe_corrupt("relu", g * (x.data > 0)))

    out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows in exp
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _node(y, (x,), "sigmoid")

    def _bw(g):
        x._accumulate(_maybe_corrupt("sigmoid", g * y * (1.0 - y)))

    out._backward = _bw
    return out


def log(x: Tensor) -> Tensor:
    out = _node(np.log(x.data), (x,), "log")

    def _bw(g):
        x._accumulate(g / x.data)

    out._backward = _bw
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = _node(np.clip(x.data, lo, hi), (x,), "clip")

    def _bw(g):
        x._accumulate(g * ((x.data >= lo) & (x.data <= hi)))

    out._backward = _bw
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = _node(y, (x,), "exp")

    def _bw(g):
        x._accumulate(g * y)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    # (..., m, k) @ (k, n) collapses to one 2-D product
    shared_b = b.ndim == 2 and a.ndim > 2
    if shared_b:
        k, n = b.shape
        y = (a.data.reshape(-1, k) @ b.data).reshape(*a.shape[:-1], n)
    else:
        y = np.matmul(a.data, b.data)
    out = _node(y, (a, b), "matmul")

    def _bw(g):
        if a.requires_grad:
            if shared_b:
                ga = (g.reshape(-1, n) @ b.data.T).reshape(a.shape)
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(_maybe_corrupt("matmul", ga), a.shape))
        if b.requires_grad:
            if shared_b:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            b._accumulate(gb)

    out._backward = _bw
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = _node(x.data.reshape(shape), (x,), "reshape")

    def _bw(g):
        x._accumulate(g.reshape(x.shape))

    out._backward = _bw
    return out


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = _node(np.swapaxes(x.data, a, b), (x,), "swapaxes")

    def _bw(g):
        x._accumulate(np.swapaxes(g, a, b))

    out._backward = _bw
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = _node(np.concatenate([x.data for x in xs], axis=axis), xs, "concat")
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def _bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            x._accumulate(part)

    out._backward = _bw
    return out


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index)
    out = _node(np.take(x.data, index, axis=axis), (x,), "take")

    def _bw(g):
        if not x.requires_grad:
            return
        gx = np.zeros(x.shape)
        gmoved = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        gxm = np.moveaxis(gx, axis, 0)
        np.add.at(gxm, index, gmoved)
        x._accumulate(gx)

    out._backward = _bw
    return out


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum")

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    out._backward = _bw
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# normalizations


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks entries allowed to receive weight.

    Masked logits are replaced by ``MASK_FILL`` before the max-shifted
    exponential and their weights are then forced to exactly zero.
    """
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
        if not np.all(mask.any(axis=-1)):
            raise AllMaskedRow("softmax row has no unmasked entries")
        d = np.where(mask, d, MASK_FILL)
    shifted = d - d.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _node(y, (x,), "softmax")

    def _bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(_maybe_corrupt("softmax", y * (g - inner)))

    out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the biased (divide-by-n) variance."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeMismatch("layer_norm needs at least two features")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatch(f"gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")

    def _bw(g):
        if x.requires_grad:
            gh = g * gain.data
            gx = inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
            x._accumulate(_maybe_corrupt("layer_norm", gx))
        gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        bias._accumulate(_unbroadcast(g, bias.shape))

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionWeights:
    """Fused projections; head ``i`` uses columns ``i*d/h:(i+1)*d/h``."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, d = x.shape
    return swapaxes(reshape(x, (*lead, s, heads, d // heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    return reshape(swapaxes(x, -2, -3), (*lead, s, h * dh))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    key_mask: np.ndarray | None,
    params: AttentionWeights,
) -> Tensor:
    """Scaled dot-product attention, ``q: (..., s, d)``, ``k, v: (..., t, d)``.

    ``key_mask`` has shape ``(..., t)``; False keys get no attention weight.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if d % heads:
        raise ShapeMismatch(f"model dim {d} not divisible by {heads} heads")
    for w in params.tensors():
        if w.shape != (d, d):
            raise ShapeMismatch(f"projection must be {d}x{d}, got {w.shape}")
    mask = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not np.all(key_mask.any(axis=-1)):
            raise AllKeysMasked("every key is masked")
        mask = key_mask[..., None, None, :]
    qh = _split_heads(q @ params.wq, heads)
    kh = _split_heads(k @ params.wk, heads)
    vh = _split_heads(v @ params.wv, heads)
    logits = (qh @ swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(d // heads))
    weights = softmax_rows(logits, mask)
    return _merge_heads(weights @ vh) @ params.wo


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
    """Populate ``.grad`` for everything ``loss`` depends on.

    Returns gradients for ``params`` in order; parameters the loss does not
    reach get zeros.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    params = list(params)
    for p in params:
        p.grad = None
    order = topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger max-norm (floored at 1e-8)."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def numeric_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    out = []
    for p in params:
        numeric = np.zeros(p.shape)
        for idx in np.ndindex(*p.shape):
            old = p.data[idx]
            p.data[idx] = old + h
            fp = float(loss_fn().data)
            p.data[idx] = old - h
            fm = float(loss_fn().data)
            p.data[idx] = old
            numeric[idx] = (fp - fm) / (2 * h)
        out.append(numeric)
    return out


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
) -> dict[str, float]:
    """Compare analytic gradients with central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values each
    call. Returns the relative error per parameter, plus the error of the
    whole gradient vector under ``"*"``; entries above ``tol`` are the
    caller's to act on.
    """
    analytic = backward(loss_fn(), params)
    numeric = numeric_gradients(loss_fn, params, h)
    names = list(names) if names is not None else [p.name or f"p{i}" for i, p in enumerate(params)]
    report = {name: relative_error(a, n) for name, a, n in zip(names, analytic, numeric)}
    flat = lambda arrs: np.concatenate([np.ravel(a) for a in arrs])  # noqa: E731
    report["*"] = relative_error(flat(analytic), flat(numeric))
    return report


def masked_extreme(x: Tensor, mask: np.ndarray, axis: int, kind: str = "max") -> Tensor:
    """Max (or min) over ``axis`` restricted to entries where ``mask`` is True.

    The gradient flows to the first extremal entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=axis)):
        raise AllMaskedRow(f"masked {kind} over an empty set")
    fill = -np.inf if kind == "max" else np.inf
    filled = np.where(mask, x.data, fill)
    arg = filled.argmax(axis=axis) if kind == "max" else filled.argmin(axis=axis)
    idx = np.expand_dims(arg, axis)
    out = _node(np.take_along_axis(x.data, idx, axis=axis).squeeze(axis), (x,), kind)

    def _bw(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        x._accumulate(gx)

    out._backward = _bw
    return out
