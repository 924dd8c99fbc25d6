"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors record their parents and a backward closure when gradients are
required; backward() walks the graph once in reverse topological order and
then severs it, so intermediate nodes are garbage-collected as soon as the
caller drops its references. Leading batch dimensions broadcast through
add/mul/matmul so a whole minibatch shares one graph.
"""

from __future__ import annotations

import weakref

import numpy as np

from .errors import ContractError, NumericError, ParameterError, ShapeError, StateError

_GRAPH_NODES: "weakref.WeakSet[Tensor]" = weakref.WeakSet()


def live_node_count() -> int:
    """Number of graph-interior tensors currently alive (leaves excluded)."""
    return len(_GRAPH_NODES)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array plus optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward_fn = None
        self._op = _op
        if self._parents:
            _GRAPH_NODES.add(self)

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}{grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self, dim=None, keepdims=False):
        return tsum(self, dim, keepdims)

    def mean(self, dim=None, keepdims=False):
        return tmean(self, dim, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, ax0: int = -2, ax1: int = -1):
        return transpose(self, ax0, ax1)

    # -- backward -----------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; frees the graph afterwards."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise StateError("loss does not require grad; nothing to differentiate")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emit = stack.pop()
            if emit:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
            if node._parents:
                # interior node: release grad and topology so memory returns
                node.grad = None if node is not self else node.grad
                node._parents = ()
                node._backward_fn = None


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _make(data, parents, op, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=parents if requires else (), _op=op)
    if requires:
        out._backward_fn = backward_fn(out)
    return out


# -- primitives ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.shape))

        return run

    return _make(data, (a, b), "add", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.shape))

        return run

    return _make(data, (a, b), "mul", bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return run

    return _make(data, (a, b), "div", bw)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

        return run

    return _make(a.data**exponent, (a,), f"pow{exponent}", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

        return run

    return _make(data, (a, b), "matmul", bw)


def transpose(a: Tensor, ax0: int = -2, ax1: int = -1) -> Tensor:
    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, g.swapaxes(ax0, ax1))

        return run

    return _make(a.data.swapaxes(ax0, ax1), (a,), "transpose", bw)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, g.reshape(a.shape))

        return run

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ParameterError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(out):
        def run(g):
            for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
                if t.requires_grad:
                    _accumulate(t, piece)

        return run

    return _make(data, tuple(tensors), "concat", bw)


def narrow(a: Tensor, key) -> Tensor:
    """Basic slicing (copies; no aliased views enter the graph)."""
    data = a.data[key].copy()

    def bw(out):
        def run(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[key] += g
                _accumulate(a, full)

        return run

    return _make(data, (a,), "slice", bw)


def tsum(a: Tensor, dim=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=dim, keepdims=keepdims)

    def bw(out):
        def run(g):
            if not a.requires_grad:
                return
            if dim is None:
                _accumulate(a, np.broadcast_to(g, a.shape))
            else:
                expanded = g if keepdims else np.expand_dims(g, dim)
                _accumulate(a, np.broadcast_to(expanded, a.shape))

        return run

    return _make(data, (a,), "sum", bw)


def tmean(a: Tensor, dim=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if dim is None else a.shape[dim]
    return tsum(a, dim, keepdims) * Tensor(1.0 / count)


def variance(a: Tensor, dim: int = -1, keepdims: bool = False) -> Tensor:
    """Population variance along `dim`, built from primitives."""
    centered = a - tmean(a, dim, keepdims=True)
    return tmean(centered * centered, dim, keepdims)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, g * out.data)

        return run

    return _make(data, (a,), "exp", bw)


def log(a: Tensor) -> Tensor:
    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, g / a.data)

        return run

    return _make(np.log(a.data), (a,), "log", bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, g * (1.0 - out.data**2))

        return run

    return _make(data, (a,), "tanh", bw)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, g * out.data * (1.0 - out.data))

        return run

    return _make(data, (a,), "sigmoid", bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bw(out):
        def run(g):
            if a.requires_grad:
                _accumulate(a, g * (a.data > 0.0))

        return run

    return _make(data, (a,), "relu", bw)


def softmax(a: Tensor, dim: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=dim, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=dim, keepdims=True)

    def bw(out):
        def run(g):
            if a.requires_grad:
                y = out.data
                _accumulate(a, y * (g - np.sum(g * y, axis=dim, keepdims=True)))

        return run

    return _make(data, (a,), "softmax", bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dim, then scale and shift."""
    centered = a - tmean(a, -1, keepdims=True)
    norm = centered * power(variance(a, -1, keepdims=True) + Tensor(eps), -0.5)
    return norm * gain + bias


def conv2d(x: Tensor, w: Tensor, stride: tuple[int, int]) -> Tensor:
    """Valid 2-d convolution of a single-channel map with a (kh, kw, C) kernel.

    x: (..., T, F) -> (..., T', F', C) with T' = (T-kh)//st+1, F' = (F-kw)//sf+1.
    """
    kh, kw, _ = w.shape
    st, sf = stride
    t_in, f_in = x.shape[-2], x.shape[-1]
    if t_in < kh or f_in < kw:
        raise ShapeError(f"conv2d input {x.shape} smaller than kernel {w.shape[:2]}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(-2, -1))
    win = win[..., ::st, ::sf, :, :]
    data = np.einsum("...tfij,ijc->...tfc", win, w.data)

    def bw(out):
        def run(g):
            if w.requires_grad:
                dw = np.einsum("...tfij,...tfc->...ijc", win, g)
                _accumulate(w, dw.sum(axis=tuple(range(dw.ndim - 3))))
            if x.requires_grad:
                t_out, f_out = g.shape[-3], g.shape[-2]
                dx = np.zeros_like(x.data)
                for i in range(kh):
                    for j in range(kw):
                        contrib = np.einsum("...tfc,c->...tf", g, w.data[i, j])
                        dx[..., i : i + st * (t_out - 1) + 1 : st, j : j + sf * (f_out - 1) + 1 : sf] += contrib
                _accumulate(x, dx)

        return run

    return _make(data, (x, w), "conv2d", bw)


def conv1d(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """Valid 1-d convolution: x (..., L, C_in) with w (k, C_in, C_out)."""
    k, c_in, _ = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d channels differ: input {x.shape} vs kernel {w.shape}")
    if x.shape[-2] < k:
        raise ShapeError(f"conv1d input {x.shape} shorter than kernel {k}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=x.ndim - 2)
    win = win[..., ::stride, :, :]  # (..., L', C_in, k)
    data = np.einsum("...lcw,wco->...lo", win, w.data)

    def bw(out):
        def run(g):
            l_out = g.shape[-2]
            if w.requires_grad:
                dw = np.einsum("...lcw,...lo->...wco", win, g)
                _accumulate(w, dw.sum(axis=tuple(range(dw.ndim - 3))))
            if x.requires_grad:
                dx = np.zeros_like(x.data)
                for i in range(k):
                    contrib = np.einsum("...lo,co->...lc", g, w.data[i])
                    dx[..., i : i + stride * (l_out - 1) + 1 : stride, :] += contrib
                _accumulate(x, dx)

        return run

    return _make(data, (x, w), "conv1d", bw)


# -- optimizer ------------------------------------------------------------------


def adam_init(params: list[Tensor]) -> dict:
    """Fresh Adam state aligned with the given parameter order."""
    return {
        "t": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(
    params: list[Tensor],
    state: dict,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction; grads left untouched."""
    if len(state["m"]) != len(params):
        raise ParameterError("adam state does not match parameter list")
    state["t"] += 1
    t = state["t"]
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at parameter {i} (step {t})")
        m = state["m"][i]
        v = state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
