"""Reverse-mode differentiation over dense float64 arrays, Adam, and a
central-difference gradient oracle.

A computation is recorded implicitly: every primitive returns a ``Var`` that
remembers its parents together with a vector-Jacobian product for each. Calling
``backward`` on a scalar ``Var`` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import builtins
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.01
LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or infinity."""

    def __init__(self, primitive: str, detail: str = ""):
        self.primitive = primitive
        msg = f"non-finite value produced by primitive '{primitive}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


class ParamSet:
    """Ordered mapping of names to float64 arrays with a flat view.

    Shapes are fixed at construction; ``flatten`` concatenates entries in
    insertion order, which is also the on-disk order used by checkpoints.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in (arrays or {}).items():
            a = np.array(arr, dtype=DTYPE)
            if not np.isfinite(a).all():
                raise ValueError(f"parameter '{name}' contains non-finite values")
            self._arrays[name] = a

    @classmethod
    def _wrap(cls, arrays: Mapping[str, np.ndarray]) -> "ParamSet":
        # trusted internal path: arrays are already float64, finite and owned
        obj = cls.__new__(cls)
        obj._arrays = OrderedDict(arrays)
        return obj

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    @property
    def size(self) -> int:
        return builtins.sum(v.size for v in self._arrays.values())

    def flatten(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        """Build a same-shaped set (of this set's class) from a flat vector."""
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.shape != (self.size,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        out, pos = OrderedDict(), 0
        for k, v in self._arrays.items():
            out[k] = flat[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return type(self)(out)

    def copy(self) -> "ParamSet":
        return type(self)({k: v.copy() for k, v in self._arrays.items()})

    def zeros_like(self) -> "ParamSet":
        return type(self)({k: np.zeros_like(v) for k, v in self._arrays.items()})

    def same_structure(self, other: "ParamSet") -> bool:
        return list(self.keys()) == list(other.keys()) and all(
            self[k].shape == other[k].shape for k in self
        )

    def merged(self, other: "ParamSet") -> "ParamSet":
        overlap = set(self.keys()) & set(other.keys())
        if overlap:
            raise ValueError(f"duplicate parameter names: {sorted(overlap)}")
        return ParamSet._wrap({**self._arrays, **other._arrays})

    def subset(self, names: Sequence[str]) -> "ParamSet":
        return type(self)._wrap({k: self._arrays[k] for k in names})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamSet) or not self.same_structure(other):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{list(v.shape)}" for k, v in self._arrays.items())
        return f"{type(self).__name__}({inner})"


class GradientSet(ParamSet):
    """Gradients keyed and shaped like the ParamSet they differentiate."""


# ---------------------------------------------------------------------------
# Recorded computation
# ---------------------------------------------------------------------------


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "op")

    def __init__(self, value, parents=(), requires_grad=False, op="leaf"):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[tuple[Var, Callable[[np.ndarray], np.ndarray]], ...] = parents
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib
            if node._parents:
                # interior adjoints are not needed once propagated
                node.grad = None

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not a supported primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _all_finite(value: np.ndarray) -> bool:
    # a NaN/inf anywhere makes the sum non-finite; the exact check only runs
    # when that cheap test fails (overflowing sums of finite values)
    return math.isfinite(value.sum()) or bool(np.isfinite(value).all())


def _node(op: str, value: np.ndarray, parents) -> Var:
    if not _all_finite(value):
        raise NonFiniteError(op)
    live = tuple((p, f) for p, f in parents if p.requires_grad)
    return Var(value, live, requires_grad=bool(live), op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node("add", a.value + b.value, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node("sub", a.value - b.value, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _node("mul", av * bv, (
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ))


def matmul(a, b) -> Var:
    """Matrix product of a 2-d batch ``a`` (B, k) with a weight ``b`` (k, h)."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _node("matmul", av @ bv, (
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ))


def affine(x, w, b) -> Var:
    """``x @ w + b`` for a (B, k) batch, (k, h) weight and (h,) bias."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    xv, wv = x.value, w.value
    return _node("affine", xv @ wv + b.value, (
        (x, lambda g: g @ wv.T),
        (w, lambda g: xv.T @ g),
        (b, lambda g: g.sum(axis=0)),
    ))


def tanh(x) -> Var:
    x = as_var(x)
    y = np.tanh(x.value)
    return _node("tanh", y, ((x, lambda g: g * (1.0 - y * y)),))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Var:
    x = as_var(x)
    d = np.where(x.value > 0, 1.0, slope)
    return _node("leaky_relu", x.value * d, ((x, lambda g: g * d),))


def exp(x) -> Var:
    x = as_var(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _node("exp", y, ((x, lambda g: g * y),))


def log(x) -> Var:
    x = as_var(x)
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xv)
    return _node("log", y, ((x, lambda g: g / xv),))


def square(x) -> Var:
    x = as_var(x)
    xv = x.value
    with np.errstate(over="ignore"):
        y = xv * xv
    return _node("square", y, ((x, lambda g: 2.0 * g * xv),))


def sum(x, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy
    x = as_var(x)
    shape = x.shape
    if axis is None:
        return _node("sum", np.asarray(x.value.sum()), ((x, lambda g: np.broadcast_to(g, shape)),))
    ax = axis % len(shape)
    return _node("sum", x.value.sum(axis=ax), (
        (x, lambda g: np.broadcast_to(np.expand_dims(g, ax), shape)),
    ))


def mean(x, axis: int | None = None) -> Var:
    x = as_var(x)
    count = x.value.size if axis is None else x.shape[axis]
    if count == 0:
        raise ValueError("mean over an empty axis")
    return sum(x, axis) * (1.0 / count)


def squared_error(a, b) -> Var:
    return square(sub(a, b))


def gaussian_logpdf(z) -> Var:
    """Row-wise standard normal log-density of a (B, n) batch."""
    z = as_var(z)
    n = z.shape[-1]
    return sum(square(z), axis=-1) * -0.5 + (-0.5 * n * LOG_2PI)


def take_cols(x, idx: np.ndarray) -> Var:
    """Select columns ``idx`` (unique indices) of a 2-d ``x``."""
    x = as_var(x)
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[:, idx] = g
        return out

    return _node("take_cols", x.value[:, idx], ((x, vjp),))


def concat_cols(parts: Sequence) -> Var:
    parts = [as_var(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=1)
    parents = tuple(
        (p, (lambda lo, hi: (lambda g: g[:, lo:hi]))(bounds[i], bounds[i + 1]))
        for i, p in enumerate(parts)
    )
    return _node("concat_cols", value, parents)


def reshape(x, shape: tuple[int, ...]) -> Var:
    x = as_var(x)
    orig = x.shape
    return _node("reshape", x.value.reshape(shape), ((x, lambda g: g.reshape(orig)),))


def stop_gradient(x) -> Var:
    """Same value, severed from the recorded graph."""
    return Var(as_var(x).value)


# ---------------------------------------------------------------------------
# Gradient evaluation
# ---------------------------------------------------------------------------

LossFn = Callable[[Mapping[str, Var]], Var]


def _leaves(params: ParamSet) -> dict[str, Var]:
    return {k: Var(v, requires_grad=True) for k, v in params.items()}


def evaluate_with_gradients(loss_fn: LossFn, params: ParamSet) -> tuple[float, GradientSet]:
    """Evaluate ``loss_fn`` on leaf variables for ``params`` and backpropagate.

    Parameters the loss does not depend on receive zero gradients.
    """
    leaves = _leaves(params)
    loss = loss_fn(leaves)
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ValueError("loss_fn must return a scalar Var")
    if loss.requires_grad:
        loss.backward()
    grads = GradientSet._wrap({
        k: (np.array(leaf.grad, dtype=DTYPE) if leaf.grad is not None else np.zeros_like(leaf.value))
        for k, leaf in leaves.items()
    })
    return float(loss.value), grads


def evaluate(loss_fn: LossFn, params: ParamSet) -> float:
    loss = loss_fn({k: Var(v) for k, v in params.items()})
    return float(loss.value)


def finite_difference_gradient(loss_fn: LossFn, params: ParamSet, step: float = 1e-5) -> GradientSet:
    """Central differences, one coordinate of the flat view at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    flat = params.flatten()
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = evaluate(loss_fn, params.unflatten(flat))
        flat[i] = orig - step
        f_minus = evaluate(loss_fn, params.unflatten(flat))
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * step)
    return GradientSet(dict(params.unflatten(out).items()))


def max_relative_error(analytic: ParamSet, numeric: ParamSet, floor: float = 1e-6) -> float:
    """Largest |a - n| / max(|a|, |n|, floor) over all coordinates.

    The floor keeps coordinates whose true gradient is (near) zero from being
    judged on central-difference rounding noise, which is about
    eps * |loss| / step (1e-11 to 1e-9 for the steps used here).
    """
    a, b = analytic.flatten(), numeric.flatten()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamSet, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    for name, val in (("lr", state.lr), ("beta1", state.beta1), ("beta2", state.beta2), ("eps", state.eps)):
        if not val > 0:
            raise ValueError(f"Adam hyperparameter {name} must be positive, got {val}")
    if not params.same_structure(grads):
        raise ValueError("gradient shapes do not match parameter shapes")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        if not _all_finite(g):
            raise NonFiniteError("adam_step", f"gradient of '{k}'")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_p[k] = params[k] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    new_state = AdamState(ParamSet._wrap(new_m), ParamSet._wrap(new_v), t, state.lr, b1, b2, state.eps)
    return ParamSet._wrap(new_p), new_state
