"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array.  Every differentiable op records its
parents and a backward rule mapping the output gradient to one gradient per
parent; :meth:`Tensor.backward` replays those rules in reverse topological
order.  Broadcasting is limited to scalar (0-d) operands, plus the explicit
``add_bias`` / ``scale_rows`` helpers that layers need.

Randomness never enters here: callers pass noise in as ordinary arrays, which
is what lets :func:`grad_check` freeze it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents, backward, op) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Gradients accumulate into existing ``.grad`` arrays, so call
        :func:`zero_grad` between independent evaluations.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Record an op defined outside this module.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    return Tensor._result(np.asarray(data, dtype=np.float64), parents, backward, op)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- elementwise


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def softplus_array(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(softplus_array(a.data), (a,), lambda g: (g * sigmoid_array(a.data),), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "softplus": softplus, "exp": exp, "log": log}


def activation(kind: str, x) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ---------------------------------------------------------------- reductions and shape


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return Tensor._result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean"
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: shapes {a.shape} and {b.shape}")

    def backward(g):
        return g * b.data, g * a.data

    return Tensor._result(np.asarray(a.data @ b.data), (a, b), backward, "dot")


def add_bias(x, b) -> Tensor:
    """Add ``b`` (length C) along axis 1 of ``x`` (shape M x C x ...)."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim < 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: input {x.shape} and bias {b.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    other_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        return g, g.sum(axis=other_axes)

    return Tensor._result(x.data + b.data.reshape(view), (x, b), backward, "add_bias")


def scale_rows(a, s) -> Tensor:
    """Multiply row ``i`` of ``a`` (any trailing shape) by ``s[i]``."""
    a, s = as_tensor(a), as_tensor(s)
    if s.ndim != 1 or a.ndim < 1 or a.shape[0] != s.shape[0]:
        raise DimensionError(f"scale_rows: matrix {a.shape} and scale {s.shape}")
    view = (-1,) + (1,) * (a.ndim - 1)
    sv = s.data.reshape(view)
    axes = tuple(range(1, a.ndim))

    def backward(g):
        ga = g * sv if a.requires_grad else None
        gs = (g * a.data).sum(axis=axes) if s.requires_grad else None
        return ga, gs

    return Tensor._result(a.data * sv, (a, s), backward, "scale_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def batched_matvec(m, v) -> Tensor:
    """``out[k] = m[k] @ v[k]`` for m of shape (B, d, d) and v of shape (B, d)."""
    m, v = as_tensor(m), as_tensor(v)
    if m.ndim != 3 or v.ndim != 2 or m.shape[0] != v.shape[0] or m.shape[2] != v.shape[1]:
        raise DimensionError(f"batched_matvec: shapes {m.shape} and {v.shape}")

    def backward(g):
        gm = g[:, :, None] * v.data[:, None, :] if m.requires_grad else None
        gv = np.einsum("bij,bi->bj", m.data, g) if v.requires_grad else None
        return gm, gv

    return Tensor._result(np.einsum("bij,bj->bi", m.data, v.data), (m, v), backward, "batched_matvec")


# ---------------------------------------------------------------- convolution and pooling


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (M, C, H, W) with kernel (N, C, h, w)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {kernel.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    M, C, H, W = x.shape
    N, _, kh, kw = kernel.shape
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (padding {padding})")
    Ho, Wo = conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(M * Ho * Wo, C * kh * kw)
    kmat = kernel.data.reshape(N, -1)
    out = (cols @ kmat.T).reshape(M, Ho, Wo, N).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, N)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(M, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        return gx, gk

    return Tensor._result(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def max_pool2d(x, size: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; the gradient goes to the first maximal element of each window."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects (M, C, H, W), got {x.shape}")
    M, C, H, W = x.shape
    if size > H + 2 * padding or size > W + 2 * padding:
        raise DimensionError(f"max_pool2d: window {size} larger than padded input {x.shape}")
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
        if padding
        else x.data
    )
    win = _windows(xp, size, size, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(M, C, Ho, Wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(Ho)[None, None, :, None] * stride + arg // size
        cols = np.arange(Wo)[None, None, None, :] * stride + arg % size
        mi = np.arange(M)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        dxp = np.zeros(xp.shape)
        np.add.at(dxp, (np.broadcast_to(mi, arg.shape), np.broadcast_to(ci, arg.shape), rows, cols), g)
        return (dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp,)

    return Tensor._result(out, (x,), backward, "max_pool2d")


# ---------------------------------------------------------------- likelihood


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax_nll(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"log_softmax_nll: logits {logits.shape} and labels {labels.shape}")
    M, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax_array(logits.data)
    rows = np.arange(M)
    nll = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / M),)

    return Tensor._result(np.asarray(nll), (logits,), backward, "log_softmax_nll")


# ---------------------------------------------------------------- verification


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    ``f`` re-evaluates the loss from the current contents of ``params``; any
    noise it uses must be frozen.  With ``max_entries`` only that many randomly
    chosen coordinates per parameter are perturbed.
    """
    zero_grad(params)
    loss = f()
    if f().item() != loss.item():
        raise ContractError("grad_check: f is not deterministic (two evaluations at the same point differ)")
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = f().item()
            flat[i] = orig - epsilon
            down = f().item()
            flat[i] = orig
            fd = (up - down) / (2 * epsilon)
            err = abs(gflat[i] - fd) / max(1e-8, abs(gflat[i]) + abs(fd))
            worst = max(worst, err)
    zero_grad(params)
    return worst
