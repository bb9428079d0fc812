"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded together with
their local gradient rule; :func:`backward` replays the tape in reverse.
Outside a tape, operations are plain numpy arithmetic with finiteness checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor, loss, or gradient."""

    def __init__(self, where: str, context: str = ""):
        self.where = where
        self.context = context
        msg = f"non-finite value in {where}"
        if context:
            msg += f" ({context})"
        super().__init__(msg)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(where)
    return arr


class Tensor:
    """Row-major float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = _check_finite(arr, name or "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager; nodes are appended in execution order, which is
    a topological order by construction.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(value, op)
    out.grad = None
    out.name = None
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape.nodes.append(_Node(out, inputs, rule, op))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise NonFiniteError("div", "division by zero")
    return _record(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a, eps: float = 0.0) -> Tensor:
    a = as_tensor(a)
    x = a.data + eps
    if np.any(x <= 0):
        raise NonFiniteError("log", "non-positive argument")
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a, eps: float = 0.0) -> Tensor:
    a = as_tensor(a)
    x = a.data + eps
    if np.any(x < 0) or (eps == 0.0 and np.any(x == 0)):
        raise NonFiniteError("sqrt", "non-positive argument")
    y = np.sqrt(x)
    return _record("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(y), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    y = a.data.mean(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean", np.asarray(y), (a,), rule)


def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Biased (divide-by-n) variance."""
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    y = (centered * centered).mean(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * g * centered / n,)

    return _record("variance", np.asarray(y), (a,), rule)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        y = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _record("broadcast", y, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _record("reshape", y, (a,), lambda g: (g.reshape(a.shape),))


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    y = a.data[index]

    def rule(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _record("slice", np.array(y), (a,), rule)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", y, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def log_softmax(logits, axis: int = -1) -> Tensor:
    a = as_tensor(logits)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _record("log_softmax", y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(logits, axis: int = -1) -> Tensor:
    a = as_tensor(logits)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    return _record(
        "softmax", p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),)
    )


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    y = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _record("clamp", y, (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    pick_a = a.data <= b.data
    return _record(
        "min",
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Replay ``tape`` in reverse from scalar ``root``.

    Leaf tensors with ``requires_grad`` get ``.grad`` set to d(root)/d(leaf).
    Returns a mapping ``id(tensor) -> gradient`` for every reached tensor.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.get(id(node.out))
        if g is None:
            continue
        local = node.rule(g)
        for inp, gi in zip(node.inputs, local):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in produced and id(inp) in grads:
                g = grads[id(inp)]
                _check_finite(g, f"gradient of {inp.name or 'leaf'}")
                inp.grad = g
    return grads


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.eps <= 0 or self.weight_decay < 0 or self.lr < 0:
            raise ValueError("invalid Adam hyperparameters")


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> AdamState:
    """Bias-corrected Adam with decoupled weight decay, applied in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ShapeError("parameter / gradient / state length mismatch")
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g) for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("gradient", p.name or "")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        data = p.data
        if state.weight_decay:
            data = data * (1.0 - state.lr * state.weight_decay)
        p.data = data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def global_norm(grads: Iterable[np.ndarray | None]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))


def clip_grad_global_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> list[np.ndarray | None]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    # slack keeps the operation idempotent under last-ulp rounding of the norm
    if norm <= max_norm * (1.0 + 1e-12):
        return list(grads)
    scale = max_norm / norm
    return [None if g is None else g * scale for g in grads]


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradcheckResult:
    max_abs_err: float
    max_rel_err: float
    n_checked: int
    passed: bool
    worst: tuple[int, int] | None = None


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    before_eval: Callable[[], None] | None = None,
) -> GradcheckResult:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``before_eval`` runs before every loss evaluation; use it to restore any
    state a forward pass mutates (running statistics, dropout RNG).
    An entry passes when ``|analytic - numeric| <= max(atol, rtol * max(|analytic|, |numeric|))``.
    """
    for p in params:
        p.grad = None
    if before_eval:
        before_eval()
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        if before_eval:
            before_eval()
        return float(loss_fn().data)

    max_abs = max_rel = 0.0
    worst = None
    ok = True
    n = 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = value()
            flat[j] = orig - h
            fm = value()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic[pi].reshape(-1)[j]
            err = abs(ana - num)
            scale = max(abs(ana), abs(num))
            rel = err / scale if scale > 0 else 0.0
            if err > max(atol, rtol * scale):
                ok = False
            if err > max_abs:
                max_abs = err
                worst = (pi, j)
            max_rel = max(max_rel, rel if err > atol else 0.0)
            n += 1
    return GradcheckResult(max_abs, max_rel, n, ok, worst)
