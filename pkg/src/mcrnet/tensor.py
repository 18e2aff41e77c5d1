"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and remembers the operation that produced it.
backward() walks the graph once in reverse topological order and accumulates
gradients into .grad (same shape as .data). Everything reachable gets a
gradient; there is no requires_grad switch. Repeated backward calls sum into
existing .grad buffers, so zeroing is explicit.

Only the operations this package needs are provided; this is not a general
autodiff system.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # collapse extra leading axes first
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # then axes that were broadcast from size 1
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            self.data = np.asarray(data)  # 0-d result of a numpy scalar op; keep dtype
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    # -- graph plumbing ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this node.

        seed defaults to ones and is only implicit for scalars; non-scalar
        roots must pass an explicit upstream gradient.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without seed requires a scalar, got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} does not match tensor shape {self.data.shape}"
                )

        # iterative DFS; recursion depth scales with graph depth otherwise
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
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # -- arithmetic ----------------------------------------------------

    @staticmethod
    def _lift(x, dtype) -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=dtype))

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other, self.dtype)
        out = Tensor(self.data + other.data, (self, other))

        def bw(g):
            self.accumulate(_unbroadcast(g, self.shape))
            other.accumulate(_unbroadcast(g, other.shape))

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self.accumulate(-g)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor._lift(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other, self.dtype) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other, self.dtype)
        out = Tensor(self.data * other.data, (self, other))

        def bw(g):
            self.accumulate(_unbroadcast(g * other.data, self.shape))
            other.accumulate(_unbroadcast(g * self.data, other.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __pow__(self, exponent) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only int/float exponents are supported")
        out = Tensor(self.data ** exponent, (self,))
        out._backward = lambda g: self.accumulate(
            g * exponent * self.data ** (exponent - 1)
        )
        return out

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._lift(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
        out = Tensor(a @ b, (self, other))

        def bw(g):
            self.accumulate(_unbroadcast(g @ b.swapaxes(-1, -2), a.shape))
            other.accumulate(_unbroadcast(a.swapaxes(-1, -2) @ g, b.shape))

        out._backward = bw
        return out

    # -- reductions / views ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bw(g):
            if axis is None:
                self.accumulate(np.broadcast_to(g, self.shape).astype(self.dtype, copy=False))
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            self.accumulate(np.broadcast_to(gg, self.shape).astype(self.dtype, copy=False))

        out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self.accumulate(g.reshape(self.shape))
        return out

    def transpose_last2(self) -> "Tensor":
        out = Tensor(self.data.swapaxes(-1, -2), (self,))
        out._backward = lambda g: self.accumulate(g.swapaxes(-1, -2))
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """Named trainable leaf. grad starts at zeros so optimizers can read it."""

    __slots__ = ("name",)

    def __init__(self, data: np.ndarray, name: str):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def concat(tensors: list, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), tuple(tensors))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate(piece)

    out._backward = bw
    return out


class ParameterSet:
    """Ordered, name-addressed collection of Parameters.

    Insertion order is the canonical iteration order; it is fixed by the
    model builder, which makes optimizer state and saved files reproducible.
    """

    def __init__(self, params=()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> None:
        if param.name in self._params:
            raise ShapeError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def n_params(self, prefix: str = "") -> int:
        return sum(p.data.size for name, p in self._params.items() if name.startswith(prefix))

    def clone(self) -> "ParameterSet":
        """Fresh Parameters with copied values; gradients are not carried over."""
        return ParameterSet(Parameter(p.data.copy(), name) for name, p in self._params.items())

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: p.grad for name, p in self._params.items()}
