"""Reverse-mode automatic differentiation over dense numpy arrays.

A small dynamic-graph engine: every operation records a backward closure
and ``Tensor.backward()`` replays the closures in reverse topological
order. Arrays are float32 or float64; graphs are built per forward pass
and dropped afterwards. Single-threaded by contract.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "Module",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "stack",
    "softmax",
    "log_softmax",
    "layer_norm",
]

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _index_is_plain(key) -> bool:
    """True when an index expression cannot select the same element twice."""
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple = ()

    # -- graph plumbing ------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def _attach(self, parents, backward) -> "Tensor":
        if _GRAD_ENABLED:
            live = [p for p in parents if p.requires_grad]
            if live:
                self.requires_grad = True
                self._parents = live
                self._backward = backward
        return self

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack_ = [(self, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack_.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- basics ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            out = Tensor(self.data + other)

            def _bw():
                self._accum(out.grad)

            return out._attach((self,), _bw)
        other = self._lift(other)
        out = Tensor(self.data + other.data)

        def _bw():
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return out._attach((self, other), _bw)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            out = Tensor(self.data - other)

            def _bw():
                self._accum(out.grad)

            return out._attach((self,), _bw)
        other = self._lift(other)
        out = Tensor(self.data - other.data)

        def _bw():
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape))

        return out._attach((self, other), _bw)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        out = Tensor(-self.data)

        def _bw():
            self._accum(-out.grad)

        return out._attach((self,), _bw)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            out = Tensor(self.data * other)

            def _bw():
                self._accum(out.grad * other)

            return out._attach((self,), _bw)
        other = self._lift(other)
        out = Tensor(self.data * other.data)

        def _bw():
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return out._attach((self, other), _bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = Tensor(self.data / other.data)

        def _bw():
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        return out._attach((self, other), _bw)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ShapeError("only constant exponents are supported")
        out = Tensor(self.data ** p)

        def _bw():
            self._accum(out.grad * p * self.data ** (p - 1))

        return out._attach((self,), _bw)

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = self._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        out = Tensor(self.data @ other.data)

        def _bw():
            g = out.grad
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return out._attach((self, other), _bw)

    # -- reductions and reshaping ----------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))

        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape))

        return out._attach((self,), _bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape))

        def _bw():
            self._accum(out.grad.reshape(self.data.shape))

        return out._attach((self,), _bw)

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ShapeError("T expects a 2-D tensor")
        out = Tensor(self.data.T)

        def _bw():
            self._accum(out.grad.T)

        return out._attach((self,), _bw)

    def __getitem__(self, key):
        out = Tensor(self.data[key])

        def _bw():
            buf = np.zeros_like(self.data)
            if _index_is_plain(key):
                buf[key] += out.grad
            else:
                np.add.at(buf, key, out.grad)
            self._accum(buf)

        return out._attach((self,), _bw)

    def take(self, indices):
        """Gather rows by integer index; duplicate rows accumulate gradient."""
        idx = np.asarray(indices, dtype=np.intp)
        out = Tensor(self.data[idx])

        def _bw():
            buf = np.zeros_like(self.data)
            np.add.at(buf, idx, out.grad)
            self._accum(buf)

        return out._attach((self,), _bw)

    # -- elementwise nonlinearities ---------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data))

        def _bw():
            self._accum(out.grad * out.data)

        return out._attach((self,), _bw)

    def log(self):
        out = Tensor(np.log(self.data))

        def _bw():
            self._accum(out.grad / self.data)

        return out._attach((self,), _bw)

    def sqrt(self):
        out = Tensor(np.sqrt(self.data))

        def _bw():
            self._accum(out.grad * 0.5 / out.data)

        return out._attach((self,), _bw)

    def abs(self):
        out = Tensor(np.abs(self.data))

        def _bw():
            self._accum(out.grad * np.sign(self.data))

        return out._attach((self,), _bw)

    def tanh(self):
        out = Tensor(np.tanh(self.data))

        def _bw():
            self._accum(out.grad * (1.0 - out.data * out.data))

        return out._attach((self,), _bw)

    def sigmoid(self):
        x = self.data
        # split by sign so exp never overflows
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                            np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor(out_data.astype(x.dtype, copy=False))

        def _bw():
            self._accum(out.grad * out.data * (1.0 - out.data))

        return out._attach((self,), _bw)

    def relu(self):
        out = Tensor(np.maximum(self.data, 0))

        def _bw():
            self._accum(out.grad * (self.data > 0))

        return out._attach((self,), _bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return out._attach(tuple(tensors), _bw)


def stack(tensors: list[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors]))

    def _bw():
        g = out.grad
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(g[i])

    return out._attach(tuple(tensors), _bw)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    # constant max-shift: softmax is shift invariant, so the gradient is exact
    shifted = t - t.data.max(axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t - t.data.max(axis=axis, keepdims=True)
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused last-axis layer normalization with affine output.

    One graph node instead of the nine a composed version needs; the
    backward applies the closed-form normalization gradient.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def _bw():
        g = out.grad
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.data.shape))
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.data.shape))
        if x.requires_grad:
            gx_hat = g * gain.data
            gx = (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                  - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)) * inv
            x._accum(gx)

    return out._attach((x, gain, bias), _bw)


class Parameter(Tensor):
    """A leaf tensor that the optimizer updates and checkpoints persist."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal parameter container with recursive named traversal."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        out[f"{key}.{i}"] = item
                    elif isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None
