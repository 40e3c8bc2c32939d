"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Define-by-run: every operation on a Tensor records its parents and a backward
closure; ``backward()`` on a scalar replays the tape in reverse topological
order. Values are float64 numpy arrays throughout; grads are accumulated
in-place on leaves and intermediates alike.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


class DomainError(ValueError):
    """Raised when an operand leaves an operation's domain (log/div)."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """N-dimensional float64 array with an attached gradient and history.

    ``requires_grad`` marks leaves (trainable parameters); intermediates
    produced from any grad-requiring input participate in backward
    automatically.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward_fn = _backward_fn

    # -- basics ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def _needs_tape(self) -> bool:
        return self.requires_grad or self._backward_fn is not None

    # -- broadcasting ----------------------------------------------------

    @staticmethod
    def _broadcast_check(sa, sb):
        """Numpy-style broadcast after right-alignment; mismatches need a 1."""
        out = []
        for da, db in zip(reversed((1,) * max(0, len(sb) - len(sa)) + sa),
                          reversed((1,) * max(0, len(sa) - len(sb)) + sb)):
            if da != db and da != 1 and db != 1:
                raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")
            out.append(max(da, db))
        return tuple(reversed(out))

    @staticmethod
    def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
        """Sum g down to `shape` (reverse of broadcasting)."""
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return g.reshape(shape)

    # -- binary elementwise ----------------------------------------------

    def _binary(self, other, fwd, bwd_a, bwd_b):
        other = other if isinstance(other, Tensor) else Tensor(other)
        self._broadcast_check(self.shape, other.shape)
        out_data = fwd(self.data, other.data)
        if not (self._needs_tape() or other._needs_tape()):
            return Tensor(out_data)

        def _backward(g, out):
            if self._needs_tape():
                self._accumulate(self._unbroadcast(bwd_a(g, self.data, other.data, out.data), self.shape))
            if other._needs_tape():
                other._accumulate(self._unbroadcast(bwd_b(g, self.data, other.data, out.data), other.shape))

        return Tensor(out_data, _parents=(self, other), _backward_fn=_backward)

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b,
                            lambda g, a, b, o: g, lambda g, a, b, o: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b,
                            lambda g, a, b, o: g, lambda g, a, b, o: -g)

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        return self._binary(other, lambda a, b: a * b,
                            lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other_t = other if isinstance(other, Tensor) else Tensor(other)
        if np.any(other_t.data == 0.0):
            raise DomainError("division by a tensor containing zeros")
        return self._binary(other_t, lambda a, b: a / b,
                            lambda g, a, b, o: g / b,
                            lambda g, a, b, o: -g * a / (b * b))

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __neg__(self):
        return self._unary(lambda a: -a, lambda g, a, o: -g)

    # -- unary elementwise -----------------------------------------------

    def _unary(self, fwd, bwd):
        out_data = fwd(self.data)
        if not self._needs_tape():
            return Tensor(out_data)

        def _backward(g, out):
            self._accumulate(bwd(g, self.data, out.data))

        return Tensor(out_data, _parents=(self,), _backward_fn=_backward)

    def exp(self):
        return self._unary(np.exp, lambda g, a, o: g * o)

    def log(self):
        if np.any(self.data <= 0.0):
            raise DomainError("log of a non-positive operand")
        return self._unary(np.log, lambda g, a, o: g / a)

    def square(self):
        return self._unary(np.square, lambda g, a, o: 2.0 * g * a)

    def clip(self, lo: float, hi: float):
        """Clamp values to [lo, hi]; gradient passes only inside the range."""
        return self._unary(lambda a: np.clip(a, lo, hi),
                           lambda g, a, o: g * ((a >= lo) & (a <= hi)))

    def gelu(self):
        """Gaussian-error-linear-unit, exact erf form (smooth everywhere).

        The Gaussian CDF computed in the forward pass is reused in the
        backward rule, which only adds the density term.
        """
        phi = 0.5 * (1.0 + erf(self.data * _INV_SQRT2))
        out_data = self.data * phi
        if not self._needs_tape():
            return Tensor(out_data)

        def _backward(g, out):
            a = self.data
            self._accumulate(g * (phi + a * np.exp(-0.5 * a * a) * _INV_SQRT2PI))

        return Tensor(out_data, _parents=(self,), _backward_fn=_backward)

    # -- matmul ------------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ShapeError(f"matmul needs >=2-d operands, got {self.shape} and {other.shape}")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul inner-dimension mismatch: {self.shape} vs {other.shape}")
        out_data = np.matmul(self.data, other.data)
        if not (self._needs_tape() or other._needs_tape()):
            return Tensor(out_data)

        def _backward(g, out):
            if self._needs_tape():
                ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accumulate(self._unbroadcast(ga, self.shape))
            if other._needs_tape():
                gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accumulate(self._unbroadcast(gb, other.shape))

        return Tensor(out_data, _parents=(self, other), _backward_fn=_backward)

    __matmul__ = matmul

    # -- reductions --------------------------------------------------------

    def _reduce(self, kind: str, axes=None, keepdims: bool = False):
        if axes is None:
            ax = tuple(range(self.data.ndim))
        else:
            ax = (axes,) if isinstance(axes, int) else tuple(axes)
            for a in ax:
                if not -self.data.ndim <= a < self.data.ndim:
                    raise ShapeError(f"invalid axis {a} for shape {self.shape}")
            ax = tuple(a % self.data.ndim for a in ax)
        if kind == "sum":
            out_data = self.data.sum(axis=ax, keepdims=keepdims)
            scale = 1.0
        elif kind == "mean":
            out_data = self.data.mean(axis=ax, keepdims=keepdims)
            scale = 1.0 / np.prod([self.shape[a] for a in ax]) if ax else 1.0
        else:
            raise ValueError(f"unknown reduction kind {kind!r}")
        if not self._needs_tape():
            return Tensor(out_data)

        def _backward(g, out):
            if not keepdims:
                g = np.expand_dims(g, ax)
            self._accumulate(np.broadcast_to(g, self.shape) * scale)

        return Tensor(out_data, _parents=(self,), _backward_fn=_backward)

    def sum(self, axes=None, keepdims: bool = False):
        return self._reduce("sum", axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return self._reduce("mean", axes, keepdims)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        if not self._needs_tape():
            return Tensor(out_data)

        def _backward(g, out):
            self._accumulate(g.reshape(self.shape))

        return Tensor(out_data, _parents=(self,), _backward_fn=_backward)

    def __getitem__(self, idx):
        out_data = self.data[idx]
        if not self._needs_tape():
            return Tensor(out_data)

        def _backward(g, out):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor(out_data, _parents=(self,), _backward_fn=_backward)

    # -- backward ----------------------------------------------------------

    def backward(self):
        """Populate grads for everything reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad, node)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- free functions ---------------------------------------------------------


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not any(t._needs_tape() for t in tensors):
        return Tensor(out_data)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g, out):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t._needs_tape():
                t._accumulate(piece)

    return Tensor(out_data, _parents=tuple(tensors), _backward_fn=_backward)


def stack_rows(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)
    if not any(t._needs_tape() for t in tensors):
        return Tensor(out_data)

    def _backward(g, out):
        for i, t in enumerate(tensors):
            if t._needs_tape():
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor(out_data, _parents=tuple(tensors), _backward_fn=_backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    # max-shift as a constant: the logsumexp gradient is shift-invariant
    shift = Tensor(np.max(logits.data, axis=axis, keepdims=True))
    centered = logits - shift
    lse = centered.exp().sum(axes=axis, keepdims=True).log()
    return centered - lse


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
