"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations performed while a :class:`Tape` is active are recorded in
execution order; :func:`backward` replays the record in reverse and
accumulates exact gradients into every reachable leaf that requires them
(normally :class:`Parameter` objects).

Only what the transition-operator MLP, its Gaussian log-densities and the
reparameterized chain sampling need is provided.  Broadcasting is limited
to the patterns used there (row vectors against matrices, scalars against
anything); gradients are reduced back to the operand's shape.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
BN_VAR_FLOOR = 1e-8


class Tensor:
    """Dense array node. ``data`` is always a C-contiguous float64 ndarray."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        # set by the op that produced this tensor; leaves keep None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every operator routes through a recorded primitive
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self) -> Tensor:
        return mul(tsum(self), 1.0 / self.data.size)


class Parameter(Tensor):
    """Trainable leaf. ``grad`` always has the value's shape once touched."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; nested tapes are allowed and only the
    innermost one records.
    """

    _stack: list[Tape] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def current(cls) -> Tape | None:
        return cls._stack[-1] if cls._stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording (e.g. while sampling chain states)."""
    saved = Tape._stack
    Tape._stack = []
    try:
        yield
    finally:
        Tape._stack = saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(inputs, out, backward_fn)
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, back)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, back)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum() if axis is None else a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", (a,), np.asarray(out), back)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; the mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def back(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape),
        )

    return _record("where", (a, b), np.where(mask, a.data, b.data), back)


def logaddexp(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.data, b.data)

    def back(g):
        wa = np.exp(a.data - out)
        wb = np.exp(b.data - out)
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return _record("logaddexp", (a, b), out, back)


# ---------------------------------------------------------------------------
# network primitives


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.ndim != 2 or weights.ndim != 2 or bias.ndim != 1:
        raise ValueError("linear expects input [n,din], weights [din,dout], bias [dout]")
    if x.shape[1] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise ValueError(
            f"linear shape mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )

    def back(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return _record("linear", (x, weights, bias), x.data @ weights.data + bias.data, back)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    active = x.data > 0.0
    return _record("relu", (x,), np.where(active, x.data, 0.0), lambda g: (g * active,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


class BatchNormState:
    """Per-step scale/shift parameters and statistics for one layer.

    Steps are indexed ``1..n_steps``. Nothing is shared between steps.
    """

    def __init__(self, width: int, n_steps: int, momentum: float = 0.1):
        self.width = width
        self.n_steps = n_steps
        self.momentum = momentum
        self.scale = {t: Parameter(np.ones(width)) for t in range(1, n_steps + 1)}
        self.shift = {t: Parameter(np.zeros(width)) for t in range(1, n_steps + 1)}
        self.running_mean = {t: np.zeros(width) for t in range(1, n_steps + 1)}
        self.running_var = {t: np.ones(width) for t in range(1, n_steps + 1)}
        # full-training-set statistics used in eval mode
        self.eval_mean: dict[int, np.ndarray] = {}
        self.eval_var: dict[int, np.ndarray] = {}
        self.collecting = False

    @property
    def finalized(self) -> bool:
        return len(self.eval_mean) == self.n_steps

    def parameters(self) -> list[Parameter]:
        return [p for t in range(1, self.n_steps + 1) for p in (self.scale[t], self.shift[t])]


def batch_norm(x: Tensor, state: BatchNormState, step: int, mode: str = "train") -> Tensor:
    x = as_tensor(x)
    if step not in state.scale:
        raise KeyError(f"no batch-norm state for step {step}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean[step] = (1 - m) * state.running_mean[step] + m * mu
        state.running_var[step] = (1 - m) * state.running_var[step] + m * var
        if state.collecting:
            state.eval_mean[step] = mu
            state.eval_var[step] = var
    elif mode == "eval":
        if step not in state.eval_mean:
            raise RuntimeError("batch-norm statistics not finalized; compute them over the training set first")
        mu, var = state.eval_mean[step], state.eval_var[step]
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + BN_VAR_FLOOR)
    xhat = (x.data - mu) * inv_std
    gamma, beta = state.scale[step], state.shift[step]
    n = x.shape[0]

    def back(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if mode == "train":
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _record("batch_norm", (x, gamma, beta), xhat * gamma.data + beta.data, back)


# ---------------------------------------------------------------------------
# densities and sampling


def gaussian_log_density_terms(x, mean, var) -> Tensor:
    """Elementwise ``log N(x; mean, var)``."""
    x, mean, var = as_tensor(x), as_tensor(mean), as_tensor(var)
    if np.any(var.data <= 0.0):
        raise ValueError("variance must be positive")
    diff = x.data - mean.data
    out = -0.5 * (LOG_2PI + np.log(var.data)) - diff * diff / (2.0 * var.data)

    def back(g):
        gx = -g * diff / var.data
        gvar = g * (-0.5 / var.data + diff * diff / (2.0 * var.data * var.data))
        return _unbroadcast(gx, x.shape), _unbroadcast(-gx, mean.shape), _unbroadcast(gvar, var.shape)

    return _record("gaussian_log_density", (x, mean, var), out, back)


def gaussian_log_density(x, mean, var) -> Tensor:
    """Per-row diagonal Gaussian log-density, summed over the last axis."""
    return tsum(gaussian_log_density_terms(x, mean, var), axis=-1)


def reparam_sample(rng: np.random.Generator | None, mean, var, noise: np.ndarray | None = None) -> Tensor:
    """``mean + sqrt(var) * noise`` with ``noise ~ N(0, 1)`` drawn from ``rng``.

    Gradients flow into ``mean`` and ``var``; the noise is a constant.
    """
    mean, var = as_tensor(mean), as_tensor(var)
    if np.any(var.data <= 0.0):
        raise ValueError("variance must be positive")
    shape = np.broadcast_shapes(mean.shape, var.shape)
    if noise is None:
        noise = rng.standard_normal(shape)
    std = np.sqrt(var.data)

    def back(g):
        return _unbroadcast(g, mean.shape), _unbroadcast(g * noise / (2.0 * std), var.shape)

    return _record("reparam_sample", (mean, var), mean.data + std * noise, back)


# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad or gi is None:
                continue
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
