"""Reverse-mode automatic differentiation over numpy arrays.

Each operation records a backward closure on its output; backward() walks the
recorded graph once in reverse topological order and accumulates gradients
additively into every reachable tensor with requires_grad set. Training runs
in float32; float64 inputs propagate through unchanged, which is what the
finite-difference verification paths rely on.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (rollout collection, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.type not in _FLOAT_TYPES:
        return arr.astype(np.float32)
    return arr


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # --- introspection ---
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # --- graph bookkeeping ---
    def _accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # --- operator sugar ---
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class Parameter(Tensor):
    """Named trainable tensor; carries Adam moment state across steps."""

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    # python scalars adopt the tensor's dtype so float32 stays float32
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor reachable from a scalar loss."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited = {id(loss)}
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, 0))
        else:
            topo.append(node)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
        if node._parents:
            # interior node: its grad is fully propagated and the closure
            # cycle (out -> closure -> out) would otherwise wait for the
            # cyclic collector, so release the graph eagerly
            node._backward = None
            node._parents = ()
            node.grad = None


# --- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = _make(a.data + b.data, (a, b), None)

    def back():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(out.grad)

    out._backward = back if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = _make(a.data - b.data, (a, b), None)

    def back():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(-out.grad)

    out._backward = back if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = _make(a.data * b.data, (a, b), None)

    def back():
        if a.requires_grad:
            a._accumulate(out.grad * b.data)
        if b.requires_grad:
            b._accumulate(out.grad * a.data)

    out._backward = back if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = _make(a.data / b.data, (a, b), None)

    def back():
        if a.requires_grad:
            a._accumulate(out.grad / b.data)
        if b.requires_grad:
            b._accumulate(-out.grad * a.data / (b.data * b.data))

    out._backward = back if out.requires_grad else None
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = _make(a.data**exponent, (a,), None)

    def back():
        a._accumulate(out.grad * exponent * a.data ** (exponent - 1.0))

    out._backward = back if out.requires_grad else None
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0.0), (a,), None)

    def back():
        a._accumulate(out.grad * (a.data > 0.0))

    out._backward = back if out.requires_grad else None
    return out


def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data), (a,), None)

    def back():
        a._accumulate(out.grad * (1.0 - out.data * out.data))

    out._backward = back if out.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,), None)

    def back():
        a._accumulate(out.grad * out.data)

    out._backward = back if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,), None)

    def back():
        a._accumulate(out.grad / a.data)

    out._backward = back if out.requires_grad else None
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = _make(np.clip(a.data, lo, hi), (a,), None)

    def back():
        inside = (a.data > lo) & (a.data < hi)
        a._accumulate(out.grad * inside)

    out._backward = back if out.requires_grad else None
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    out = _make(np.minimum(a.data, b.data), (a, b), None)

    def back():
        take_a = a.data <= b.data
        if a.requires_grad:
            a._accumulate(out.grad * take_a)
        if b.requires_grad:
            b._accumulate(out.grad * ~take_a)

    out._backward = back if out.requires_grad else None
    return out


def where(condition: np.ndarray, a, b) -> Tensor:
    """condition is a constant boolean array; gradients route by branch."""
    condition = np.asarray(condition, dtype=bool)
    ref = a if isinstance(a, Tensor) else b
    a = _coerce(a, ref)
    b = _coerce(b, ref)
    out = _make(np.where(condition, a.data, b.data), (a, b), None)

    def back():
        if a.requires_grad:
            a._accumulate(out.grad * condition)
        if b.requires_grad:
            b._accumulate(out.grad * ~condition)

    out._backward = back if out.requires_grad else None
    return out


# --- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = _make(a.data.reshape(shape), (a,), None)

    def back():
        a._accumulate(out.grad.reshape(a.data.shape))

    out._backward = back if out.requires_grad else None
    return out


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    out = _make(np.swapaxes(a.data, axis1, axis2), (a,), None)

    def back():
        a._accumulate(np.swapaxes(out.grad, axis1, axis2))

    out._backward = back if out.requires_grad else None
    return out


def _key_has_int_arrays(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a: Tensor, key) -> Tensor:
    out = _make(a.data[key], (a,), None)

    def back():
        g = np.zeros_like(a.data)
        if _key_has_int_arrays(key):
            np.add.at(g, key, out.grad)  # integer keys may repeat indices
        else:
            g[key] += out.grad
        a._accumulate(g)

    out._backward = back if out.requires_grad else None
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.data.shape[axis] for t in tensors]

    def back():
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(start, start + size)
                t._accumulate(out.grad[tuple(index)])
            start += size

    out._backward = back if out.requires_grad else None
    return out


# --- reductions ---------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)

    def back():
        a._accumulate(_expand_reduced(out.grad, a.data.shape, axis, keepdims))

    out._backward = back if out.requires_grad else None
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), None)
    scale = a.data.size / max(out.data.size, 1)

    def back():
        g = _expand_reduced(out.grad, a.data.shape, axis, keepdims)
        a._accumulate(g / scale)

    out._backward = back if out.requires_grad else None
    return out


# --- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    out = _make(a.data @ b.data, (a, b), None)

    def back():
        if a.requires_grad:
            a._accumulate(out.grad @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ out.grad)

    out._backward = back if out.requires_grad else None
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gain.data + bias.data, (x, gain, bias), None)
    d = x.data.shape[-1]

    def back():
        g = out.grad
        if x.requires_grad:
            dxhat = g * gain.data
            term = (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
            x._accumulate(inv / d * term)
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))

    out._backward = back if out.requires_grad else None
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _make(p, (x,), None)

    def back():
        g = out.grad
        inner = (g * p).sum(axis=axis, keepdims=True)
        x._accumulate(p * (g - inner))

    out._backward = back if out.requires_grad else None
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _make(ls, (x,), None)

    def back():
        g = out.grad
        x._accumulate(g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    out._backward = back if out.requires_grad else None
    return out


def row_gather(x: Tensor, indices) -> Tensor:
    """Pick x[i, indices[i]] for every row i of a 2-d tensor."""
    indices = np.asarray(indices, dtype=np.intp)
    if x.ndim != 2 or indices.shape != (x.shape[0],):
        raise ValueError(f"row_gather needs (n,m) and (n,), got {x.shape}, {indices.shape}")
    rows = np.arange(x.shape[0])
    out = _make(x.data[rows, indices], (x,), None)

    def back():
        g = np.zeros_like(x.data)
        np.add.at(g, (rows, indices), out.grad)
        x._accumulate(g)

    out._backward = back if out.requires_grad else None
    return out


def log_softmax_pick(logits: Tensor, indices) -> Tensor:
    """Log-probability of the chosen index per row."""
    return row_gather(log_softmax(logits, axis=-1), indices)


_MASK_FILL = -1e30  # finite stand-in for −∞; underflows to exact zero weight


def masked_scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None
) -> Tensor:
    """softmax(q·kᵀ/√d, masked) · v; mask entry (i,j) true ⇔ i may attend to j."""
    d = q.shape[-1]
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        full = np.broadcast_to(mask, scores.shape)
        if not full.any(axis=-1).all():
            raise ValueError("attention mask leaves a row with no attendable token")
        scores = where(full, scores, _MASK_FILL)
    return matmul(softmax(scores, axis=-1), v)


# --- optimisation ---------------------------------------------------------------


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm;
    returns the post-clip norm."""
    total = global_grad_norm(params)
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
        return total * scale
    return total


def adam_step(
    params,
    learning_rate: float,
    step_count: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update in place; step_count starts at 1."""
    if step_count < 1:
        raise ValueError("step_count starts at 1")
    b1c = 1.0 - beta1**step_count
    b2c = 1.0 - beta2**step_count
    for p in params:
        if p.grad is None:
            continue
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        p.m = beta1 * p.m + (1.0 - beta1) * p.grad
        p.v = beta2 * p.v + (1.0 - beta2) * (p.grad * p.grad)
        m_hat = p.m / b1c
        v_hat = p.v / b2c
        p.data = p.data - learning_rate * m_hat / (np.sqrt(v_hat) + eps)


# --- verification ----------------------------------------------------------------


def finite_difference(f, wrt, h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar f() w.r.t. each tensor in wrt.

    f is re-evaluated with entries perturbed in place; use float64 tensors
    for meaningful comparisons.
    """
    grads = []
    with no_grad():
        for t in wrt:
            g = np.zeros_like(t.data)
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(f().data)
                flat[i] = orig - h
                down = float(f().data)
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            grads.append(g)
    return grads


# --- checkpoint io ----------------------------------------------------------------

_MAGIC = b"NDTENS01"


def save_tensors(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays with a JSON manifest; round-trips bit-exactly."""
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = little.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": little.dtype.str,
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = json.dumps(
        {"format_version": 1, "meta": meta or {}, "tensors": entries}
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a tensor checkpoint")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode())
        payload = fh.read()
    if header.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    arrays = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header["meta"]
