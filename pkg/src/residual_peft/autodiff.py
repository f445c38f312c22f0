"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape while one is active (``with Tape() as
tape:``) and at least one input requires a gradient. Outside a tape every
operation is a plain numpy evaluation, which is what inference uses.

Broadcasting is deliberately absent: binary operations require equal shapes,
except that a Python scalar may stand in for either operand. Adding a vector
along trailing dimensions is spelled out with :func:`bias_add`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "active_tape",
    "record",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "gelu",
    "sigmoid",
    "elementwise",
    "softmax",
    "layer_norm",
    "bias_add",
    "reshape",
    "transpose",
    "tensor_sum",
    "tensor_mean",
    "backward",
    "grad_check",
    "KinkProbe",
    "kink_probe",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """A float64 array plus optional gradient storage.

    ``data`` is a numpy array in C order; ``grad`` is ``None`` until a backward
    pass reaches this tensor as a leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_produced")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # True when the tensor is the output of a recorded node (not a leaf).
        self._produced = False

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64, order="C")
        t.requires_grad = requires_grad
        t.grad = None
        t._produced = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all of these go through the checked functions below
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def record(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``value`` as the output of an operation over ``inputs``.

    ``vjp(grad_out)`` must return one gradient array (or ``None``) per input.
    Nothing is recorded unless a tape is active and some input needs a
    gradient, so custom operations cost nothing at inference time.
    """
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor._wrap(value, requires_grad=needs and tape is not None)
    if out.requires_grad:
        out._produced = True
        tape.nodes.append(_Node(tuple(inputs), out, vjp))
    return out


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D weight shared across all leading axes of ``a``, or has
    exactly the same leading axes as ``a`` (batched product).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def vjp(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k = A.shape[-1]
                gb = A.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), vjp)


def _binary_operands(a, b, name: str):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{name} needs at least one Tensor operand")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
        return a, b
    # scalar-by-tensor is the one permitted broadcast
    for s in (a, b):
        if not isinstance(s, Tensor) and np.ndim(s) != 0:
            raise ShapeError(f"{name}: non-Tensor operand must be a scalar")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        return record(a.data + b.data, (a, b), lambda g: (g, g))
    s = float(b)
    return record(a.data + s, (a,), lambda g: (g,))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return record(a.data - b.data, (a, b), lambda g: (g, -g))
    if isinstance(a, Tensor):
        return record(a.data - float(b), (a,), lambda g: (g,))
    return record(float(a) - b.data, (b,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        A, B = a.data, b.data
        return record(A * B, (a, b), lambda g: (g * B, g * A))
    s = float(b)
    return record(a.data * s, (a,), lambda g: (g * s,))


class KinkProbe:
    """Smallest ``|x|`` fed to :func:`relu` while the probe is active."""

    def __init__(self):
        self.distance = math.inf


_PROBES: list[KinkProbe] = []


@contextmanager
def kink_probe() -> Iterator[KinkProbe]:
    """Track how close any ReLU input comes to its kink at zero.

    Central differences are only meaningful where the function is smooth
    within one step of the probe point, so gradient checks use this to reject
    sample points that sit on a ReLU corner.
    """
    probe = KinkProbe()
    _PROBES.append(probe)
    try:
        yield probe
    finally:
        _PROBES.remove(probe)


def relu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    if _PROBES and x.size:
        nearest = float(np.min(np.abs(x)))
        for probe in _PROBES:
            probe.distance = min(probe.distance, nearest)
    return record(np.where(pos, x, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return record(out, (a,), vjp)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return record(y, (a,), lambda g: (g * y * (1.0 - y),))


_UNARY = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return _UNARY[op](_as_tensor(a))
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain`` and ``bias``."""
    d = a.shape[-1] if a.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last dimension")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match d={d}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    out = xhat * G + bias.data

    def vjp(g):
        gx = None
        if a.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return record(out, (a, gain, bias), vjp)


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` where ``b`` matches the trailing axes of ``a`` exactly."""
    k = b.ndim
    if k == 0 or k > a.ndim or a.shape[a.ndim - k:] != b.shape:
        raise ShapeError(f"bias_add: {b.shape} is not a trailing block of {a.shape}")
    lead = tuple(range(a.ndim - k))

    def vjp(g):
        return g, (g.sum(axis=lead) if lead else g)

    return record(a.data + b.data, (a, b), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {a.ndim}-D tensor")
    inverse = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def tensor_sum(a: Tensor) -> Tensor:
    src = a.shape
    return record(np.array(a.data.sum()), (a,), lambda g: (np.full(src, float(g)),))


def tensor_mean(a: Tensor) -> Tensor:
    src, n = a.shape, a.size
    return record(np.array(a.data.mean()), (a,), lambda g: (np.full(src, float(g) / n),))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires-grad leaf.

    Leaves seen on the tape but not reached from ``loss`` end with a zero
    gradient (or keep whatever they had accumulated before).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._used:
        raise RuntimeError("tape has already been consumed by a backward pass")
    tape._used = True
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and not t._produced:
                leaves.setdefault(id(t), t)
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        if leaf.grad is None:
            leaf.grad = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64)
        elif g is not None:
            leaf.grad = leaf.grad + g
    tape.nodes.clear()


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` takes no arguments and builds a scalar loss from the current values of
    ``params``; entries are perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    # parameters the loss never touches have an exact zero gradient
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        v = f().item()
        if not math.isfinite(v):
            raise FloatingPointError("objective is not finite at a probe point")
        return v

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            num = (up - down) / (2 * step)
            err = abs(gflat[i] - num) / max(1e-8, abs(gflat[i]) + abs(num))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
