"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`.  Operations
record their parents and a backward rule once, at construction time; calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into the leaves.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms --------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def backward(self) -> dict[str, np.ndarray]:
        return backward(self)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- graph traversal ---------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` receive (accumulated) gradients in
    ``.grad``.  Returns a table mapping leaf names to their gradient blocks;
    unnamed leaves are updated but not listed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    table: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        return table
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            if node.name is not None:
                table[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return table


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Largest relative disagreement between the analytic gradient of ``fn``
    at ``point`` and a central finite difference with step ``eps``.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise FloatingPointError("fn must return a finite scalar")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(Tensor(base)).item()
            flat[i] = orig - eps
            down = fn(Tensor(base)).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"fn is not finite near coordinate {i}")
            num_flat[i] = (up - down) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# -- elementwise -------------------------------------------------------------

def _bias_sum(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def add(a, b) -> Tensor:
    """Elementwise sum.  Tensor operands must match in shape, except that a
    1-D tensor may be added along the trailing dimension (bias).  Constant
    (non-Tensor) operands broadcast freely but may not change the shape."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=np.float64)
        data = a.data + const
        if data.shape != a.shape:
            raise ValueError(f"constant of shape {const.shape} would broadcast {a.shape}")
        return _result(data, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _result(a.data + b.data, (a, b), lambda g: (g, _bias_sum(g, n)))
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        n = a.shape[0]
        return _result(a.data + b.data, (a, b), lambda g: (_bias_sum(g, n), g))
    raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=np.float64)
        data = a.data * const
        if data.shape != a.shape:
            raise ValueError(f"constant of shape {const.shape} would broadcast {a.shape}")
        return _result(data, (a,), lambda g: (g * const,))
    if a.shape == b.shape:
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _result(a.data * b.data, (a, b),
                       lambda g: (g * b.data, _bias_sum(g * a.data, n)))
    raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (mask broadcasts)."""
    mask = np.broadcast_to(mask, a.shape)
    return _result(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity when p == 0
    or no generator is given (evaluation)."""
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, keep)


# -- reductions and shape ----------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), rule)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    axis = axis % parts[0].ndim
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, rule)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Supported forms: (..., n, k) @ (k, m) with a shared
    weight, equal-batch (..., n, k) @ (..., k, m), and vector dot products."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 1:
        if a.shape != b.shape:
            raise ValueError(f"dot of {a.shape} and {b.shape}")
        return _result(np.asarray(a.data @ b.data), (a, b), lambda g: (g * b.data, g * a.data))
    if b.ndim == 2:
        k, m = b.shape
        if a.shape[-1] != k:
            raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        if a.ndim == 1:
            return _result(a.data @ b.data, (a, b),
                           lambda g: (b.data @ g, np.outer(a.data, g)))

        def rule(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            return ga, gb

        return _result(a.data @ b.data, (a, b), rule)
    if a.ndim == b.ndim and a.ndim >= 3 and a.shape[:-2] == b.shape[:-2]:
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

        def rule(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

        return _result(a.data @ b.data, (a, b), rule)
    raise ValueError(f"unsupported matmul shapes {a.shape} @ {b.shape}")


# -- normalisation and probabilities -------------------------------------------

def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.data - _logsumexp(a.data, axis)
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), rule)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    n = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def rule(g):
        dxhat = g * gamma.data
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, _bias_sum(g * xhat, n), _bias_sum(g, n)

    return _result(xhat * gamma.data + beta.data, (a, gamma, beta), rule)


# -- lookups and convolution ---------------------------------------------------

def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup; the backward pass scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab, dim = weight.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range for table of {vocab} rows")

    def rule(g):
        full = np.zeros((vocab, dim))
        np.add.at(full, ids.reshape(-1), g.reshape(-1, dim))
        return (full,)

    return _result(weight.data[ids], (weight,), rule)


def pick(a: Tensor, index) -> Tensor:
    """Select one entry of the last axis per leading position:
    ``out[..., ] = a[..., index[...]]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ValueError(f"index shape {index.shape} does not match {a.shape[:-1]}")
    shape = a.shape
    expanded = index[..., None]

    def rule(g):
        full = np.zeros(shape)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    return _result(np.take_along_axis(a.data, expanded, axis=-1)[..., 0], (a,), rule)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over time with channels last.

    ``x`` is (T, C_in) or (B, T, C_in), ``w`` is (C_out, C_in, K).
    Output length is ``(T + 2*padding - K) // stride + 1``.
    """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    c_out, c_in, k = w.shape
    if xd.shape[-1] != c_in:
        raise ValueError(f"conv1d expects {c_in} input channels, got {xd.shape[-1]}")
    bsz, t_in, _ = xd.shape
    t_out = (t_in + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ValueError(f"input of length {t_in} is too short for kernel {k}")
    xp = np.pad(xd, ((0, 0), (padding, padding), (0, 0)))
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[:, idx, :].reshape(bsz, t_out, k * c_in)
    wmat = w.data.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = cols @ wmat + b.data
    if unbatched:
        out = out[0]

    def rule(g):
        g3 = g[None] if unbatched else g
        g2 = g3.reshape(-1, c_out)
        gw = (cols.reshape(-1, k * c_in).T @ g2).reshape(k, c_in, c_out).transpose(2, 1, 0)
        gb = g2.sum(axis=0)
        dcols = (g3 @ wmat.T).reshape(bsz, t_out, k, c_in)
        dxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            dxp[:, j:j + span:stride, :] += dcols[:, :, j, :]
        gx = dxp[:, padding:padding + t_in, :]
        return (gx[0] if unbatched else gx), gw, gb

    return _result(out, (x, w, b), rule)
