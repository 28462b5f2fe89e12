"""Small reverse-mode autodiff core on top of numpy.

Everything is float64. A :class:`Tensor` records the op that produced it and a
closure that pushes its gradient to its parents; :meth:`Tensor.backward` walks
the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "relu",
    "concat",
    "mean",
    "tsum",
    "reshape",
    "take",
    "sq_error",
    "mse",
    "ParamSet",
    "OptimizerState",
    "adam_update",
    "forward_backward",
    "finite_diff_gradient",
    "relu_margin",
]


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, node: str, message: str):
        super().__init__(f"{node}: {message}")
        self.node = node


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(self.op, f"backward needs a scalar output, got shape {self.shape}")
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, "mul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        a._accumulate(g * c)

    return _node(a.data * c, "scale", (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batched broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", f"cannot broadcast batch dims of {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, "matmul", (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", f"input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = matmul(x, weight)
    out.op = "linear"
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError("bias_add", f"bias shape {bias.shape} != ({weight.shape[1]},)")
        out = add(out, bias)
        out.op = "bias_add"
    return out


_relu_margins: list[float] | None = None


@contextlib.contextmanager
def relu_margin():
    """Collect the smallest |pre-activation| seen by :func:`relu` in the block.

    Finite differences are only meaningful away from the ReLU kink, so gradient
    checks use this to reject sample points that sit too close to it.
    """
    global _relu_margins
    prev = _relu_margins
    margins: list[float] = []
    _relu_margins = margins
    try:
        yield margins
    finally:
        _relu_margins = prev


def relu(a) -> Tensor:
    a = as_tensor(a)
    if _relu_margins is not None and a.data.size:
        _relu_margins.append(float(np.min(np.abs(a.data))))
    mask = a.data > 0.0

    def backward(g):
        a._accumulate(g * mask)

    return _node(np.where(mask, a.data, 0.0), "relu", (a,), backward)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "nothing to concatenate")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError("concat", f"shapes {[x.shape for x in ts]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[ax] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(np.concatenate([t.data for t in ts], axis=ax), "concat", tuple(ts), backward)


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError("sum", f"axis {axis} out of range for shape {a.shape}")

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(np.sum(a.data, axis=axis), "sum", (a,), backward)


def mean(a, axis: int | None = None) -> Tensor:
    """Mean-pool over ``axis`` (all axes when None)."""
    a = as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError("mean", f"axis {axis} out of range for shape {a.shape}")
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean", "cannot pool over an empty axis")
    out = tsum(a, axis)
    out = scale(out, 1.0 / n)
    out.op = "mean"
    return out


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(out, "reshape", (a,), backward)


def take(a, index) -> Tensor:
    """Indexing, ``a[index]``; repeated integer indices accumulate gradient."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _node(np.array(out, copy=True), "take", (a,), backward)


def sq_error(pred, target) -> Tensor:
    """Sum of squared differences."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("sq_error", f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data

    def backward(g):
        if pred.requires_grad:
            pred._accumulate(2.0 * g * diff)
        if target.requires_grad:
            target._accumulate(-2.0 * g * diff)

    return _node(np.sum(diff * diff), "sq_error", (pred, target), backward)


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    out = scale(sq_error(pred, target), 1.0 / max(pred.data.size, 1))
    out.op = "mse"
    return out


# --------------------------------------------------------------------------- #
# parameters and optimisation

GROUPS = ("graph", "other")


class ParamSet:
    """Named parameters, each tagged with a learning-rate group."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, value, group: str = "other") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, op=name)
        self._params[name] = t
        self._groups[name] = group
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

    def group(self, name: str) -> str:
        return self._groups[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for k, t in self._params.items()
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def groups(self) -> dict[str, str]:
        return dict(self._groups)

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if self._params[k].shape != np.shape(v):
                raise ShapeError(k, f"stored shape {np.shape(v)} != {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=np.float64, copy=True)

    def frozen_copy(self) -> "ParamSet":
        """Detached copy whose tensors record no graph."""
        ps = ParamSet.from_arrays(self.arrays(), self._groups)
        for t in ps._params.values():
            t.requires_grad = False
        return ps

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self._params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._params[k].data).tobytes())
        return h.hexdigest()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], groups: Mapping[str, str]) -> "ParamSet":
        ps = cls()
        for k, v in arrays.items():
            ps.add(k, v, groups[k])
        return ps


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr_map: Mapping[str, float],
) -> ParamSet:
    """One Adam step with bias correction and decoupled weight decay, in place."""
    missing = [g for g in GROUPS if g not in lr_map]
    if missing:
        raise KeyError(f"lr_map lacks groups {missing}")
    if state.step < 0:
        raise ValueError("optimizer step counter is negative")
    for name in params:
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(name, f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        lr = lr_map[params.group(name)]
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - lr * step - lr * state.weight_decay * p.data
    return params


# --------------------------------------------------------------------------- #
# evaluation helpers

LossFn = Callable[[Mapping[str, Tensor], ParamSet], "Tensor | tuple[Tensor, dict]"]


def _run(fn: LossFn, inputs, params):
    res = fn({k: as_tensor(v) for k, v in inputs.items()}, params)
    if isinstance(res, tuple):
        loss, outputs = res
    else:
        loss, outputs = res, {}
    if loss.data.size != 1:
        raise ShapeError(loss.op, f"designated loss must be scalar, got shape {loss.shape}")
    return loss, outputs


def forward_backward(fn: LossFn, inputs: Mapping, params: ParamSet):
    """Evaluate ``fn`` and return ``(outputs, grads)``.

    ``fn(inputs, params)`` returns the scalar loss, optionally paired with a
    dict of extra output tensors. ``outputs`` holds float arrays including the
    ``"loss"`` entry; ``grads`` maps every parameter name to its gradient.
    """
    params.zero_grad()
    loss, outputs = _run(fn, inputs, params)
    loss.backward()
    out = {k: np.array(v.data, copy=True) for k, v in outputs.items()}
    out["loss"] = np.array(loss.data, copy=True)
    grads = params.grads()
    params.zero_grad()
    return out, grads


def finite_diff_gradient(fn: LossFn, inputs: Mapping, params: ParamSet, h: float = 1e-4):
    """Central-difference gradient of the scalar loss w.r.t. every parameter."""
    if h <= 0:
        raise ValueError("step h must be positive")
    grads = {}
    for name, p in params.items():
        base = p.data
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for i in range(base.size):
            work = base.copy()
            work.reshape(-1)[i] += h
            p.data = work
            hi = _run(fn, inputs, params)[0].item()
            work = base.copy()
            work.reshape(-1)[i] -= h
            p.data = work
            lo = _run(fn, inputs, params)[0].item()
            flat[i] = (hi - lo) / (2.0 * h)
        p.data = base
        grads[name] = g
    params.zero_grad()
    return grads
