"""Dense array arithmetic with reverse-mode automatic differentiation.

A Tensor wraps a numpy array and records the primitive operation that
produced it; calling ``backward`` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients into every leaf that
requires them.  Gradients accumulate across calls until explicitly reset,
which is what per-sample batching over variable-size meshes relies on.

Two precisions are supported: float32 for training, float64 for
verification (finite-difference checks are unreliable at float32).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _np_erf

__all__ = [
    "Tensor",
    "ParameterStore",
    "GradCheckReport",
    "no_grad",
    "concat",
    "linear",
    "ffn",
    "softmax",
    "gelu",
    "grad_check",
    "DimensionError",
    "NonFiniteError",
]

INV_SQRT2 = 0.7071067811865476

_grad_enabled = True

# Opt-in guard: validate that every op output is finite (slows tight loops).
CHECK_FINITE = False


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf is produced where finiteness is required."""


class no_grad:
    """Context manager that disables graph recording (fast inference/FD)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")

    # -- construction of graph nodes -------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents, vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NonFiniteError("operation produced non-finite values")
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
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

    # -- elementwise arithmetic (numpy broadcasting rules) ----------------

    @staticmethod
    def _lift(x, dtype) -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=dtype))

    def __add__(self, other):
        other = Tensor._lift(other, self.dtype)
        a, b = self, other
        return Tensor._make(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = Tensor._lift(other, self.dtype)
        a, b = self, other
        return Tensor._make(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return Tensor._lift(other, self.dtype) - self

    def __mul__(self, other):
        other = Tensor._lift(other, self.dtype)
        a, b = self, other
        return Tensor._make(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self.dtype)
        a, b = self, other
        return Tensor._make(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return Tensor._lift(other, self.dtype) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        out = a.data ** exponent
        return Tensor._make(
            out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),)
        )

    # -- linear algebra ----------------------------------------------------

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.dtype))
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shapes {a.shape} x {b.shape} do not conform")
        return Tensor._make(
            a.data @ b.data,
            (a, b),
            lambda g: (g @ b.data.T, a.data.T @ g),
        )

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,))

    # -- shape manipulation -------------------------------------------------

    def __getitem__(self, idx):
        a = self

        def vjp(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            return (acc,)

        return Tensor._make(a.data[idx], (a,), vjp)

    def take_rows(self, indices: np.ndarray) -> "Tensor":
        """Gather rows by integer index (duplicates allowed)."""
        idx = np.asarray(indices)
        a = self

        def vjp(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            return (acc,)

        return Tensor._make(a.data[idx], (a,), vjp)

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor._make(
            a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),)
        )

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- pointwise nonlinearities ---------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self) -> "Tensor":
        a = self
        out = np.sqrt(a.data)
        return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))

    def erf(self) -> "Tensor":
        # d/dx erf(x) = 2/sqrt(pi) * exp(-x^2)
        a = self
        out = _np_erf(a.data)
        two_over_sqrt_pi = 1.1283791670955126
        return Tensor._make(
            out, (a,), lambda g: (g * two_over_sqrt_pi * np.exp(-a.data * a.data),)
        )

    # -- autodiff ---------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires-grad leaf.

        `self` must be scalar.  Repeated calls keep accumulating; reset with
        ParameterStore.zero_grad (or by clearing .grad yourself).
        """
        if self.data.size != 1:
            raise DimensionError("backward requires a scalar tensor")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("backward on non-finite value")

        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
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

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg


# -- free-function ops ------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along `axis`; gradient splits back to the operands."""
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(data, tuple(tensors), vjp)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtracted).

    Fused primitive: y = exp(x - max) / sum, vjp dx = (g - sum(g*y)) * y."""
    if axis >= x.data.ndim or axis < -x.data.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return Tensor._make(y, (x,), vjp)


TWO_OVER_SQRT_PI = 1.1283791670955126
INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, exact erf form (smooth everywhere)."""
    a = x.data
    phi = 0.5 * (1.0 + _np_erf(a * INV_SQRT2))
    y = a * phi

    def vjp(g):
        return (g * (phi + a * INV_SQRT_2PI * np.exp(-0.5 * a * a)),)

    return Tensor._make(y, (x,), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias (2D x), fused into one graph node."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"linear: bias shape {bias.shape} != ({weight.shape[1]},)"
        )

    def vjp(g):
        return (g @ weight.data.T, x.data.T @ g, g.sum(axis=0))

    return Tensor._make(x.data @ weight.data + bias.data, (x, weight, bias), vjp)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer feed-forward block: linear -> gelu -> linear."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# -- parameters ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ParameterStore:
    """Ordered, named, shaped trainable tensors with accumulated gradients."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, array, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=trainable)
        self._entries[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def astype(self, dtype) -> "ParameterStore":
        """Copy of the store at another precision (values only, grads cleared)."""
        out = ParameterStore(dtype)
        for name, t in self._entries.items():
            out.add(name, t.data.astype(dtype), trainable=self._trainable[name])
        return out

    def copy(self) -> "ParameterStore":
        return self.astype(self.dtype)

    # -- checkpoint format: magic, u32 version, u32 header length,
    #    JSON header (list of {name, shape, dtype}), raw little-endian arrays.

    def save(self, path) -> None:
        header = [
            {
                "name": name,
                "shape": list(t.data.shape),
                "dtype": _DTYPE_TAGS[t.data.dtype],
            }
            for name, t in self._entries.items()
        ]
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            for name, t in self._entries.items():
                fh.write(np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"bad checkpoint magic {magic!r}")
            version, hlen = struct.unpack("<II", fh.read(8))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            header = json.loads(fh.read(hlen).decode("utf-8"))
            store = None
            for item in header:
                dtype = _TAG_DTYPES[item["dtype"]]
                if store is None:
                    store = cls(dtype)
                shape = tuple(item["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * dtype.itemsize)
                if len(raw) != count * dtype.itemsize:
                    raise ValueError("truncated checkpoint")
                arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
                store.add(item["name"], arr)
            if store is None:
                store = cls()
            if fh.read(1):
                raise ValueError("trailing bytes after checkpoint payload")
        return store


# -- gradient verification -----------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tol}


def grad_check(forward_fn, params: ParameterStore, tol: float = 1e-4,
               step: float = 1e-5, order: int = 2) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    `forward_fn(params)` must be deterministic and pure, returning a scalar
    Tensor.  Relative error per entry is |g_ad - g_fd| / max(|g_ad|, |g_fd|,
    1e-8); a parameter's reported error is its worst entry.

    order=2 is the plain central difference at half-width `step`; order=4
    is the Richardson-extrapolated five-point central difference
    (4 D(step) - D(2 step)) / 3, which cancels the quadratic truncation
    term and suits deep composites whose tiny-gradient entries are
    truncation-limited.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    params.zero_grad()
    loss = forward_fn(params)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("forward produced a non-finite loss")
    loss.backward()

    analytic = {}
    for name, t in params.items():
        if params.trainable(name):
            analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()

    def evaluate(flat, i, value) -> float:
        orig = flat[i]
        flat[i] = value
        with no_grad():
            out = float(forward_fn(params).data)
        flat[i] = orig
        if not np.isfinite(out):
            raise NonFiniteError(f"non-finite forward while perturbing entry {i}")
        return out

    errors: dict[str, float] = {}
    for name, t in params.items():
        if not params.trainable(name):
            continue
        flat = t.data.reshape(-1)
        g_ad = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            d1 = (evaluate(flat, i, orig + step)
                  - evaluate(flat, i, orig - step)) / (2.0 * step)
            if order == 2:
                g_fd = d1
            else:
                d2 = (evaluate(flat, i, orig + 2 * step)
                      - evaluate(flat, i, orig - 2 * step)) / (4.0 * step)
                g_fd = (4.0 * d1 - d2) / 3.0
            denom = max(abs(g_ad[i]), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
        errors[name] = worst

    params.zero_grad()
    return GradCheckReport(errors=errors, tol=tol)
