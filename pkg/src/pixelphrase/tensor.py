"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array and record the computation graph as they are
combined, micrograd-style: every operation stores its parent tensors and a
closure that pushes the output gradient back to them.  Calling
``backward()`` on a scalar tensor walks the graph once in reverse
topological order, which makes gradient accumulation deterministic.

Values are float32 by default; verification runs (finite-difference
gradient checks) build float64 tensors instead.  Every forward operation
checks its output for NaN/Inf and raises ``FloatingPointError`` on the
first non-finite value, so a diverging computation fails loudly at the op
that produced it.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    # ndarrays keep an explicit float dtype (float64 verification runs);
    # everything else, including python lists, lands on the 32-bit default.
    if isinstance(data, np.ndarray) and arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _op: str = "leaf"):
        self.data = _as_array(data, dtype)
        if self.data.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"tensors hold float32/float64 data, got {self.data.dtype}")
        _check_finite(self.data, _op)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = None
        self._op = _op

    # ------------------------------------------------------------------
    # basic introspection

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op!r})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------
    # graph plumbing

    def _make(self, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        req = any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        _check_finite(data, op)
        out.grad = None
        out.requires_grad = req
        out._parents = tuple(parents) if req else ()
        out._backward_fn = None
        out._op = op
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Backpropagate from a scalar, filling grad buffers of all reachable tensors."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # ------------------------------------------------------------------
    # helpers

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise TypeError(
                    f"dtype mismatch: {self.data.dtype} vs {other.data.dtype}")
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # ------------------------------------------------------------------
    # elementwise arithmetic (broadcasting, gradients unbroadcast)

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = self._make(self.data + other.data, (self, other), "add")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))
        out._backward_fn = _bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = self._make(-self.data, (self,), "neg")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(-g)
        out._backward_fn = _bw
        return out

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = self._make(self.data - other.data, (self, other), "sub")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))
        out._backward_fn = _bw
        return out

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = self._make(self.data * other.data, (self, other), "mul")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backward_fn = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = self._make(self.data / other.data, (self, other), "div")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data),
                                 other.data.shape))
        out._backward_fn = _bw
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __pow__(self, exponent) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = self._make(self.data ** exponent, (self,), "pow")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1))
        out._backward_fn = _bw
        return out

    def exp(self) -> "Tensor":
        out = self._make(np.exp(self.data), (self,), "exp")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g * out.data)
        out._backward_fn = _bw
        return out

    def log(self) -> "Tensor":
        out = self._make(np.log(self.data), (self,), "log")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g / self.data)
        out._backward_fn = _bw
        return out

    # ------------------------------------------------------------------
    # matrix multiplication

    def __matmul__(self, other) -> "Tensor":
        return self.matmul(other)

    def matmul(self, other: "Tensor") -> "Tensor":
        """Matrix product on the trailing two axes; leading axes broadcast."""
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(
                f"matmul dimension mismatch: {a.shape} @ {b.shape}")
        out = self._make(a @ b, (self, other), "matmul")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g @ b.swapaxes(-1, -2), a.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(a.swapaxes(-1, -2) @ g, b.shape))
        out._backward_fn = _bw
        return out

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        in_shape = self.data.shape

        def _bw(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, in_shape).copy())
                return
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                axes = tuple(a % len(in_shape) for a in axes)
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, in_shape).copy())
        out._backward_fn = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in axes:
                count *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------------------
    # shape manipulation

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self._make(self.data.reshape(shape), (self,), "reshape")
        in_shape = self.data.shape

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g.reshape(in_shape))
        out._backward_fn = _bw
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        out = self._make(self.data.swapaxes(a, b), (self,), "swapaxes")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g.swapaxes(a, b))
        out._backward_fn = _bw
        return out

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        if axes is None:
            axes = tuple(reversed(range(self.data.ndim)))
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out = self._make(self.data.transpose(axes), (self,), "transpose")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inverse))
        out._backward_fn = _bw
        return out

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)
