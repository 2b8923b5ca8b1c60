"""A small reverse-mode differentiation engine over dense 2-D float64 arrays.

Operations executed inside a ``with Tape():`` block are recorded when one of
their operands is a :class:`Parameter` or a value already derived from one.
:func:`backward` replays the record in reverse and accumulates gradients
into the parameters. Outside a tape, the same functions just compute values.

Only the operations the forecasting model uses are provided. The single
broadcast rule is adding a 1 x c row to every row of an r x c tensor.
"""

from __future__ import annotations

import threading

import numpy as np

from west.errors import NotScalar, ShapeMismatch, StaleTape

_state = threading.local()


class Tensor:
    __slots__ = ("value", "tape", "__weakref__")

    def __init__(self, value, tape=None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got array of shape {v.shape}")
        self.value = v
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    def item(self):
        if self.value.shape != (1, 1):
            raise NotScalar(f"expected a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def numpy(self):
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """A learnable tensor with a gradient buffer of the same shape."""

    __slots__ = ("grad", "name")

    def __init__(self, value, name=""):
        super().__init__(np.array(value, dtype=np.float64, copy=True))
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _tracked(t, tape):
    return isinstance(t, Parameter) or (t.tape is tape and tape is not None)


def _emit(value, inputs, grad_fn):
    """Wrap ``value``; record ``grad_fn(g) -> grads per input`` when needed."""
    tape = active_tape()
    if tape is None or not any(_tracked(t, tape) for t in inputs):
        return Tensor(value)
    if tape.consumed:
        raise StaleTape("cannot record on a tape that has already been differentiated")
    out = Tensor(value, tape)
    tape.records.append((out, inputs, grad_fn))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    """Elementwise sum; ``b`` may also be a 1 x c row added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _emit(a.value + b.value, (a, b), lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:
        return _emit(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeMismatch(f"add of {a.shape} and {b.shape}")


def hadamard(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"hadamard of {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def concat_cols(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.rows != b.rows:
        raise ShapeMismatch(f"concat_cols of {a.shape} and {b.shape}")
    k = a.cols
    return _emit(np.hstack([a.value, b.value]), (a, b), lambda g: (g[:, :k], g[:, k:]))


def slice_cols(a, start, stop):
    a = _as_tensor(a)
    if not 0 <= start < stop <= a.cols:
        raise ShapeMismatch(f"slice_cols [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.value[:, start:stop].copy(), (a,), grad)


def reshape(a, rows, cols):
    """Row-major reshape."""
    a = _as_tensor(a)
    if rows * cols != a.value.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {(rows, cols)}")
    shape = a.shape
    return _emit(a.value.reshape(rows, cols).copy(), (a,), lambda g: (g.reshape(shape),))


def propagate(m, h):
    """Apply a constant n x n operator to each consecutive block of n rows of ``h``.

    For a single graph this is ``m @ h``; a batch of graph signals stacked
    row-wise is propagated block by block.
    """
    m = np.asarray(m.value if isinstance(m, Tensor) else m, dtype=np.float64)
    h = _as_tensor(h)
    n = m.shape[0]
    if m.shape != (n, n) or h.rows % n:
        raise ShapeMismatch(f"propagate of operator {m.shape} over {h.shape}")
    b, c = h.rows // n, h.cols
    out = np.matmul(m, h.value.reshape(b, n, c)).reshape(b * n, c)
    mt = m.T
    return _emit(out, (h,), lambda g: (np.matmul(mt, g.reshape(b, n, c)).reshape(b * n, c),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = _as_tensor(x)
    s = _sigmoid(x.value)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh_(x):
    x = _as_tensor(x)
    t = np.tanh(x.value)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x):
    x = _as_tensor(x)
    mask = x.value > 0.0  # subgradient at exactly 0 is 0
    return _emit(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def mse_loss(pred, target):
    """Mean over all elements of the squared difference, as a 1x1 tensor."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss of {pred.shape} and {target.shape}")
    diff = pred.value - target.value
    size = diff.size
    return _emit(
        np.array([[np.mean(diff * diff)]]),
        (pred, target),
        lambda g: (g[0, 0] * 2.0 * diff / size, -g[0, 0] * 2.0 * diff / size),
    )


def backward(loss, params):
    """Accumulate d(loss)/d(param) into each parameter's ``grad``."""
    if loss.shape != (1, 1):
        raise NotScalar(f"backward needs a 1x1 loss, got {loss.shape}")
    tape = loss.tape
    if tape is None:
        # loss does not depend on any parameter
        return
    if tape.consumed:
        raise StaleTape("backward was already run for this forward pass")
    tape.consumed = True
    grads = {id(loss): np.ones((1, 1))}
    for out, inputs, grad_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gt in zip(inputs, grad_fn(g)):
            if not _tracked(t, tape):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gt
            else:
                grads[key] = gt
    for p in params:
        g = grads.get(id(p))
        if g is not None:
            p.grad += g
    tape.records.clear()


def finite_diff_check(forward, params, h=1e-6):
    """Largest relative disagreement between taped and central-difference gradients.

    ``forward(params)`` must return a 1x1 tensor. The relative error of a
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    for p in params:
        p.zero_grad()
    with Tape():
        loss = forward(params)
    backward(loss, params)

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = forward(params).item()
            flat[i] = orig - h
            down = forward(params).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
