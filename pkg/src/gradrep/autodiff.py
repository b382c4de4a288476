"""Reverse-mode automatic differentiation over dense numpy arrays.

A forward computation builds a tape of :class:`Tensor` nodes; each node caches
its forward value and a closure that routes the incoming gradient to its
parents. ``backward()`` on a scalar loss walks the tape once in reverse
topological order and leaves ``.grad`` (same shape as ``.data``) on every node
that requires gradients.

Everything is float64 by default; float32 is an opt-in for speed. With checked
mode on, tensor construction rejects non-finite values.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UsageError

_CHECKED = False


def set_checked(flag: bool) -> None:
    """Toggle NaN/Inf rejection at tensor construction (off by default)."""
    global _CHECKED
    _CHECKED = bool(flag)


def checked() -> bool:
    return _CHECKED


class Tensor:
    """One node of the tape: cached value, cached gradient, parent links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values rejected in checked mode")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar node; fills .grad on the whole tape."""
        if self.data.size != 1:
            raise UsageError(
                f"backward() starts from a scalar, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_tensor4(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Validate an (n, c, h, w) activation array."""
    a = np.asarray(arr)
    if a.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 (n, c, h, w), got shape {a.shape}")
    return a
