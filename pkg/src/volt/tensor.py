"""Reverse-mode differentiable tensors, parameter storage and AdamW.

Everything runs in float64. A :class:`Tensor` wraps a read-only ndarray and
remembers how it was produced, so calling :meth:`Tensor.backward` on a scalar
pushes gradients back to every leaf that requires them. The primitive set is
deliberately small: matmul, add, scale, concat, reshape/transpose, softmax,
layer norm, sigmoid, relu and binary cross-entropy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


def make_rng(seed: int, label: str = "") -> np.random.Generator:
    """Seeded generator split by a string label.

    The label is hashed with blake2b (not Python's salted ``hash``) so streams
    are stable across processes.
    """
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest, "little")])


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.array(value, dtype=np.float64)
        self._init(arr, requires_grad, (), None)

    @classmethod
    def _result(cls, value: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        needs = any(p.requires_grad for p in parents)
        out._init(np.asarray(value, dtype=np.float64), needs, parents if needs else (), backward if needs else None)
        return out

    def _init(self, arr, requires_grad, parents, backward):
        if not np.isfinite(arr).all():
            raise NumericError("non-finite values in tensor")
        arr.flags.writeable = False
        self.value = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for all reachable leaves."""
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.value)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative post-order; graphs get deep enough to hit the recursion limit
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return Tensor._result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # activations @ weight: one GEMM over the flattened leading axes
        a2 = a.value.reshape(-1, a.shape[-1])
        out = (a2 @ b.value).reshape(*a.shape[:-1], b.shape[-1])

        def backward_2d(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.value.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._result(out, (a, b), backward_2d)
    out = np.matmul(a.value, b.value)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._result(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def _softmax_array(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    s = _softmax_array(a.value)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (a,), backward)


def softmax_rows(m) -> Tensor:
    """Row-wise softmax of a rank-2 tensor, max-subtracted per row."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got shape {m.shape}")
    return softmax(m)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise ShapeError("layer_norm needs a non-empty feature axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},)")
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.value + beta.value

    def backward(g):
        gx_hat = g * gamma.value
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor._result(out, (x, gamma, beta), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.value
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._result(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return Tensor._result(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


BCE_CLAMP = 1e-7


def binary_cross_entropy(pred, target) -> Tensor:
    """Mean BCE with predictions clamped to [1e-7, 1 - 1e-7].

    ``target`` is treated as a constant.
    """
    pred = as_tensor(pred)
    t = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {t.shape}")
    p = np.clip(pred.value, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    inside = (pred.value >= BCE_CLAMP) & (pred.value <= 1.0 - BCE_CLAMP)

    def backward(g):
        return (g * inside * (-(t / p) + (1.0 - t) / (1.0 - p)) / n,)

    return Tensor._result(np.asarray(loss), (pred,), backward)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered name -> leaf tensor mapping with trainable/frozen flags."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable)
        self._tensors[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self._trainable.items() if flag]

    def set_value(self, name: str, value) -> None:
        old = self._tensors[name]
        value = np.array(value, dtype=np.float64)
        if value.shape != old.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {old.shape}")
        self._tensors[name] = Tensor(value, requires_grad=self._trainable[name])

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            n: (np.zeros_like(self._tensors[n].value) if self._tensors[n].grad is None else self._tensors[n].grad)
            for n in self.trainable_names()
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.value.copy() for n, t in self._tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for n in self._tensors:
            self.set_value(n, state[n])

    def count(self, trainable_only: bool = True) -> int:
        names = self.trainable_names() if trainable_only else list(self._tensors)
        return int(sum(self._tensors[n].value.size for n in names))


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, epsilon: float = 1e-5,
               names: Iterable[str] | None = None) -> float:
    """Max relative error between backprop and central differences.

    Relative error per entry is ``|analytic - numeric| / (|numeric| + 1e-8)``;
    frozen parameters are skipped.
    """
    params.zero_grad()
    out = f(params)
    out.backward()
    analytic = params.grads()
    worst = 0.0
    check = params.trainable_names() if names is None else [n for n in names if params.is_trainable(n)]
    for name in check:
        base = params[name].value.copy()
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[idx] += sign * epsilon
                params.set_value(name, bumped)
                v = float(f(params).value)
                if not np.isfinite(v):
                    raise NumericError(f"non-finite objective while perturbing {name}{idx}")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2.0 * epsilon)
            err = abs(analytic[name][idx] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
        params.set_value(name, base)
    return worst


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``."""
    names = params.trainable_names()
    for name in names:
        g = grads.get(name)
        if g is None:
            raise KeyError(f"no gradient for parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, expected {params[name].shape}")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    for name in names:
        g = np.asarray(grads[name], dtype=np.float64)
        w = params[name].value
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        w = w * (1.0 - state.lr * state.weight_decay) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.m[name], state.v[name] = m, v
        params.set_value(name, w)
