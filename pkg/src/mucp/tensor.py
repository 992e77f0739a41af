"""numpy-backed dense tensors with reverse-mode automatic differentiation.

Every op records a vector-Jacobian closure; ``backward()`` replays the graph
in reverse topological order and accumulates gradients on leaves marked
``requires_grad``. Working precision is float32; float64 arrays pass through
unchanged so verification harnesses can run the identical graph at higher
precision.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "matmul",
    "softmax",
    "logsumexp",
    "layer_norm",
    "concat",
    "narrow",
    "gather_rows",
    "scatter_add_rows",
    "take_flat",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float32 and arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A dense float array plus the graph edge that produced it.

    Gradients accumulate additively: running ``backward()`` twice without
    clearing ``grad`` doubles every leaf gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = parents
        out._vjp = vjp
        return out

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable ``requires_grad`` leaf.

        The receiver must hold a single element. Each call computes a fresh
        gradient pass and adds it onto whatever ``grad`` already holds.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        # Per-pass gradient store keyed by node identity; leaves fold their
        # entry into .grad at visit time, which is what makes repeated
        # backward calls purely additive.
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ---------------------------------------------------------

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data + b.data
        return Tensor._from_op(
            out,
            (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data - b.data
        return Tensor._from_op(
            out,
            (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        )

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data * b.data
        return Tensor._from_op(
            out,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        return self * (other ** -1.0)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        x = self
        out = x.data ** exponent
        return Tensor._from_op(
            out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),)
        )

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary ops ----------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self
        return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))

    def gelu(self):
        """tanh-form Gaussian error linear unit."""
        x = self.data
        c = x.dtype.type(np.sqrt(2.0 / np.pi))
        k = x.dtype.type(0.044715)
        half = x.dtype.type(0.5)
        one = x.dtype.type(1.0)
        x2 = x * x
        inner = x2 * k
        inner += one
        inner *= x
        inner *= c
        t = np.tanh(inner)
        out = t + one
        out *= x
        out *= half

        def vjp(g):
            d_inner = x2 * (3 * k)
            d_inner += one
            d_inner *= c
            sech2 = one - t * t
            dx = half * x * sech2 * d_inner
            dx += half * (one + t)
            return (g * dx,)

        return Tensor._from_op(out, (self,), vjp)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        out = x.data.reshape(shape)
        return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.data.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = tuple(np.argsort(axes))
        out = self.data.transpose(axes)
        return Tensor._from_op(out, (self,), lambda g: (g.transpose(inv),))

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        x = self
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, x.data.shape).astype(x.data.dtype),)

        return Tensor._from_op(np.asarray(out), (x,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics over leading axes."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects Tensor operands")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    if b.data.ndim == 2:
        # stacked input x 2-d weight: fold leading axes into one GEMM instead
        # of a batched loop plus a gradient reduction
        adata, bdata = a.data, b.data
        k, n = bdata.shape
        a2 = adata.reshape(-1, k)
        out = (a2 @ bdata).reshape(adata.shape[:-1] + (n,))

        def vjp2(g):
            g2 = g.reshape(-1, n)
            return ((g2 @ bdata.T).reshape(adata.shape), a2.T @ g2)

        return Tensor._from_op(out, (a, b), vjp2)

    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return Tensor._from_op(out, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._from_op(out, (x,), vjp)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-subtracted log-sum-exp reduction along ``axis``."""
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return Tensor._from_op(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match "
            f"normalized extent {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgain, dbias)

    return Tensor._from_op(out, (x, gain, bias), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back to each operand."""
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(ts), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) exceeds extent "
            f"{x.data.shape[axis]} on axis {axis}"
        )
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return Tensor._from_op(out, (x,), vjp)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of ``x`` (leading axis) at integer positions ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    out = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(out, (x,), vjp)


def scatter_add_rows(values: Tensor, idx, num_rows: int) -> Tensor:
    """Sum rows of ``values`` into a ``num_rows``-row result at ``idx``.

    Exact inverse of ``gather_rows`` on disjoint index sets.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexError(f"scatter index out of range for {num_rows} rows")
    out = np.zeros((num_rows,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(out, idx, values.data)

    def vjp(g):
        return (g[idx],)

    return Tensor._from_op(out, (values,), vjp)


def take_flat(x: Tensor, flat_idx) -> Tensor:
    """Gather scalar elements of ``x`` by flat (row-major) index."""
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= x.data.size):
        raise IndexError(f"flat index out of range for {x.data.size} elements")
    out = x.data.ravel()[flat_idx]

    def vjp(g):
        full = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(full, flat_idx, g.ravel())
        return (full.reshape(x.data.shape),)

    return Tensor._from_op(out, (x,), vjp)
