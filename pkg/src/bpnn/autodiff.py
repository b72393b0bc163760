"""Reverse-mode automatic differentiation on a dynamic tape.

Operations are recorded in execution order on a :class:`Tape` as they are
evaluated, so arbitrary Python control flow may drive the forward pass.  The
backward pass walks the records once in reverse, accumulating vector-Jacobian
products with plain float64 numpy arithmetic.  Given an identical sequence of
recorded operations, gradients are bitwise reproducible: the walk order and
every accumulation order are fixed.

Tensors wrap numpy arrays.  When no tape is supplied (or attached to any
input) the same code paths run untraced, which is how inference avoids paying
for gradient bookkeeping.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


def _as_array(value) -> Array:
    out = np.asarray(value, dtype=np.float64)
    return out


class Tensor:
    """A float64 array plus the tape (if any) that is recording it."""

    __slots__ = ("value", "tape", "requires_grad", "grad")

    def __init__(self, value, tape: "Tape | None" = None, requires_grad: bool = False):
        self.value = _as_array(value)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, traced={self.tape is not None})"

    # Operator sugar; every route goes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return scalar_multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Chronological record of traced operations.

    Each record is ``(out, inputs, vjp)`` where ``vjp`` maps the adjoint of
    ``out`` to a tuple of adjoints aligned with ``inputs`` (``None`` for
    inputs that need no gradient).
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._lifted: dict[int, Tensor] = {}

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append((out, inputs, vjp))

    def lift(self, param: "Parameter") -> Tensor:
        """Return the traced tensor for ``param``, shared across one tape.

        Lifting each parameter exactly once per tape makes fan-out gradient
        accumulation across examples automatic.
        """
        key = id(param)
        hit = self._lifted.get(key)
        if hit is None:
            hit = Tensor(param.value, self, requires_grad=True)
            self._lifted[key] = hit
        return hit

    def lifted_parameters(self) -> list[Tensor]:
        return list(self._lifted.values())


class Parameter:
    """A named, trainable array owned by a model component."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value):
        self.name = name
        self.value = _as_array(value)


def lift(param: "Parameter", tape: Tape | None) -> Tensor:
    """Tensor view of a parameter: traced and trainable iff a tape is given."""
    if tape is not None:
        return tape.lift(param)
    return Tensor(param.value)


def _lift_input(x, tape: Tape | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, tape=None)


def _tape_of(*inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and tape is not x.tape:
                raise ValueError("inputs belong to different tapes")
            tape = x.tape
    return tape


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(value: Array, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(value, tape)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# Traced operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift_input(a, None)
    b = _lift_input(b, None)
    value = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _make(value, (a, b), vjp)


def subtract(a, b) -> Tensor:
    a = _lift_input(a, None)
    b = _lift_input(b, None)
    value = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)

    return _make(value, (a, b), vjp)


def multiply(a, b) -> Tensor:
    a = _lift_input(a, None)
    b = _lift_input(b, None)
    value = a.value * b.value
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(value, (a, b), vjp)


def scalar_multiply(a, s: float) -> Tensor:
    a = _lift_input(a, None)
    s = float(s)
    value = a.value * s

    def vjp(g):
        return (g * s,)

    return _make(value, (a,), vjp)


def matmul(a, b) -> Tensor:
    a = _lift_input(a, None)
    b = _lift_input(b, None)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    value = a.value @ b.value
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _make(value, (a, b), vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_lift_input(p, None) for p in parts)
    if not tensors:
        raise ValueError("concat of no tensors")
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]

    def vjp(g):
        grads = []
        offset = 0
        for size in sizes:
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            grads.append(g[tuple(index)])
            offset += size
        return tuple(grads)

    return _make(value, tensors, vjp)


def take_rows(a, rows) -> Tensor:
    """Gather rows along axis 0 (an indexed slice)."""
    a = _lift_input(a, None)
    rows = np.asarray(rows, dtype=np.intp)
    value = a.value[rows]
    in_shape = a.value.shape

    def vjp(g):
        out = np.zeros(in_shape, dtype=np.float64)
        np.add.at(out, rows, g)
        return (out,)

    return _make(value, (a,), vjp)


def add_at_rows(base, rows, values) -> Tensor:
    """Functional scatter-add: ``out = base`` with ``values`` added at ``rows``."""
    base = _lift_input(base, None)
    values = _lift_input(values, None)
    rows = np.asarray(rows, dtype=np.intp)
    out_value = base.value.copy()
    np.add.at(out_value, rows, values.value)

    def vjp(g):
        return g, g[rows]

    return _make(out_value, (base, values), vjp)


def reshape(a, shape) -> Tensor:
    a = _lift_input(a, None)
    in_shape = a.value.shape
    value = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(in_shape),)

    return _make(value, (a,), vjp)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _lift_input(a, None)
    axes = tuple(int(i) for i in axes)
    value = np.transpose(a.value, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _make(value, (a,), vjp)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def sum_over(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _lift_input(a, None)
    axes = _normalize_axes(axes, a.value.ndim)
    value = a.value.sum(axis=axes, keepdims=keepdims)
    in_shape = a.value.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make(value, (a,), vjp)


def logsumexp_over(a, axes=None, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp reduction.

    Entries are shifted by the max before exponentiation.  Inputs that are
    uniformly ``-inf`` along the reduced axes produce ``-inf`` (the max
    sentinel) rather than NaN, and contribute zero gradient.
    """
    a = _lift_input(a, None)
    axes = _normalize_axes(axes, a.value.ndim)
    x = a.value
    m = np.max(x, axis=axes, keepdims=True)
    finite = np.isfinite(m)
    m_safe = np.where(finite, m, 0.0)
    shifted = np.exp(x - m_safe)
    total = shifted.sum(axis=axes, keepdims=True)
    with np.errstate(divide="ignore"):
        lse_kd = np.where(finite, m_safe + np.log(total), m)
    value = lse_kd if keepdims else np.squeeze(lse_kd, axis=axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        soft = np.exp(np.where(finite, x - np.where(finite, lse_kd, 0.0), -np.inf))
        return (np.broadcast_to(g, x.shape) * soft,)

    return _make(value, (a,), vjp)


def exp(a) -> Tensor:
    a = _lift_input(a, None)
    value = np.exp(a.value)

    def vjp(g):
        return (g * value,)

    return _make(value, (a,), vjp)


def ln(a) -> Tensor:
    a = _lift_input(a, None)
    if np.any(a.value <= 0.0):
        raise ValueError("ln of non-positive value; clamp inputs first")
    value = np.log(a.value)
    av = a.value

    def vjp(g):
        return (g / av,)

    return _make(value, (a,), vjp)


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max with ``floor``; clamped entries get zero gradient."""
    a = _lift_input(a, None)
    floor = float(floor)
    mask = a.value > floor
    value = np.where(mask, a.value, floor)

    def vjp(g):
        return (g * mask,)

    return _make(value, (a,), vjp)


def relu(a) -> Tensor:
    a = _lift_input(a, None)
    mask = a.value > 0.0
    value = a.value * mask

    def vjp(g):
        return (g * mask,)

    return _make(value, (a,), vjp)


def backward(loss: Tensor) -> None:
    """Accumulate adjoints of ``loss`` into every reachable traced tensor.

    ``loss`` must be scalar-valued.  After the call, tensors created with
    ``requires_grad`` (parameter lifts) carry ``.grad``; a parameter that the
    loss never touched gets an explicit zero gradient.
    """
    if loss.tape is None:
        raise ValueError("loss is not attached to a tape")
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    tape = loss.tape
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = vjp(g)
        for tensor, grad in zip(inputs, input_grads):
            if grad is None or (tensor.tape is None and not tensor.requires_grad):
                continue
            existing = grads.get(id(tensor))
            # Accumulation is out of place: vjp outputs may alias each other.
            grads[id(tensor)] = grad if existing is None else existing + grad
    for tensor in tape.lifted_parameters():
        held = grads.get(id(tensor))
        if held is None:
            held = np.zeros_like(tensor.value)
        tensor.grad = np.asarray(held, dtype=np.float64).reshape(tensor.value.shape)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus the step counter for bias correction."""

    def __init__(self, params: Iterable[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]


def adam_step(state: AdamState, grads: Sequence[Array], lr: float) -> None:
    """Apply one bias-corrected Adam update in place.

    ``grads`` must align with ``state.params``.  The update is
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)`` with the standard
    ``1 - beta^t`` bias corrections.
    """
    if len(grads) != len(state.params):
        raise ValueError("gradient list does not match parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: Sequence[Array], max_norm: float) -> list[Array]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g) ** 2))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return [np.asarray(g, dtype=np.float64) for g in grads]
    scale = max_norm / norm
    return [np.asarray(g, dtype=np.float64) * scale for g in grads]
