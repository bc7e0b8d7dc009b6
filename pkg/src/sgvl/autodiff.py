"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is stored flat in row-major numpy arrays; there are no views or
stride tricks, and concat/slice copy. Operations record onto the innermost
active Tape whenever an input requires gradients; with no tape active they
run as plain inference. Gradients accumulate into Tensor.grad.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
NORM_FLOOR = 1e-8
LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of one forward pass; reverse iteration is backward."""

    _stack: List["Tape"] = []

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None


def _record(out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("operation produced a non-finite value")
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.entries.append(TapeEntry(output=out, inputs=inputs, backward=backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(input) into .grad for every tensor feeding the loss."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g_out = entry.output.grad
        if g_out is None:
            continue
        grads = entry.backward(g_out)
        for t, g in zip(entry.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            # no in-place accumulation anywhere, so holding a reference is safe
            t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# --- elementwise kernels -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.data.shape),
                              _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _record(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.data.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def scale(a, c: float) -> Tensor:
    a = astensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def absval(a) -> Tensor:
    a = astensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    take_a = a.data >= b.data
    return _record(np.maximum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.data.shape),
                              _unbroadcast(g * ~take_a, b.data.shape)))


def minimum(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    take_a = a.data <= b.data
    return _record(np.minimum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * take_a, a.data.shape),
                              _unbroadcast(g * ~take_a, b.data.shape)))


def exp(a) -> Tensor:
    a = astensor(a)
    out_data = np.exp(a.data)
    return _record(out_data, (a,), lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = astensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = astensor(a)
    out_data = np.sqrt(a.data)
    return _record(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def tanh(a) -> Tensor:
    a = astensor(a)
    out_data = np.tanh(a.data)
    return _record(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def sigmoid(a) -> Tensor:
    a = astensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return _record(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def gelu(a) -> Tensor:
    """Tanh-form gaussian error linear unit."""
    a = astensor(a)
    x = a.data
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x2 * x)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def _bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record(out_data, (a,), _bw)


# --- structural kernels ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}")

    folded = b.data.ndim == 2 and a.data.ndim > 2

    def _bw(g):
        if folded:
            # stacked (.., m, k) @ (k, n): fold the batch into 2D products
            k, n = a.data.shape[-1], g.shape[-1]
            ga = np.matmul(g.reshape(-1, n), b.data.T).reshape(a.data.shape)
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            ga = _unbroadcast(np.matmul(g, np.ascontiguousarray(b.data.swapaxes(-1, -2))),
                              a.data.shape)
            gb = _unbroadcast(np.matmul(np.ascontiguousarray(a.data.swapaxes(-1, -2)), g),
                              b.data.shape)
        return (ga, gb)

    if folded:
        m = a.data.shape[-1]
        out = np.matmul(a.data.reshape(-1, m), b.data).reshape(a.data.shape[:-1] + (b.data.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)
    return _record(out, (a, b), _bw)


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes).copy(), (a,),
                   lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    return _record(a.data.reshape(shape).copy(), (a,),
                   lambda g: (g.reshape(a.data.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), _bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]

    def _bw(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis=axis) for p in pieces)

    return _record(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), _bw)


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) indexing; gradient scatters back into zeros."""
    a = astensor(a)

    def _bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record(a.data[key], (a,), _bw)


def gather_rows(table, ids) -> Tensor:
    """Rows of a 2D table selected by an integer id array of any shape."""
    table = astensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def _bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (full,)

    return _record(table.data[ids], (table,), _bw)


def broadcast_to(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)

    def _bw(g):
        return (_unbroadcast(g, a.data.shape),)

    return _record(np.broadcast_to(a.data, shape).copy(), (a,), _bw)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), _bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --- neural-net kernels ------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _record(out_data, (a,), _bw)


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalization over the last axis with learned per-feature affine."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def _bw(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(x.data.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes) if axes else g * xhat
        dbeta = g.sum(axis=axes) if axes else g.copy()
        return (gx, dgamma.reshape(d), dbeta.reshape(d))

    return _record(out_data, (x, gamma, beta), _bw)


def normalize_rows(x) -> Tensor:
    """Scale each row (last axis) to unit L2 norm, with a small norm floor."""
    x = astensor(x)
    sq = sum_(mul(x, x), axis=-1, keepdims=True)
    norm = maximum(sqrt(sq), NORM_FLOOR)
    return div(x, norm)


def cosine_similarity(u, v) -> Tensor:
    """Cosine of corresponding rows; norms are floored at 1e-8."""
    u, v = astensor(u), astensor(v)
    dot = sum_(mul(u, v), axis=-1)
    nu = maximum(sqrt(sum_(mul(u, u), axis=-1)), NORM_FLOOR)
    nv = maximum(sqrt(sum_(mul(v, v), axis=-1)), NORM_FLOOR)
    return div(dot, mul(nu, nv))


def take_along_rows(a, idx) -> Tensor:
    """a[i, idx[i]] for each row i of a 2D tensor."""
    a = astensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _record(a.data[rows, idx], (a,), _bw)


def cross_entropy(logits, target) -> Tensor:
    """Negative log-softmax at the target index.

    1D logits with an int target give a scalar; 2D logits with an index
    vector give one loss per row.
    """
    logits = astensor(logits)
    if logits.data.ndim == 1:
        out = cross_entropy(reshape(logits, (1, -1)), np.array([int(target)]))
        return reshape(out, ())
    m = logits.data.max(axis=-1, keepdims=True)
    z = exp(sub(logits, m))
    lse = add(log(sum_(z, axis=-1)), m.reshape(-1))
    picked = take_along_rows(logits, target)
    return sub(lse, picked)


# --- parameters, optimizer, gradient checking --------------------------------


@dataclass
class Parameter:
    """A named model weight; frozen parameters receive no gradient."""

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Iterable[Parameter], state: AdamWState, lr: float,
               beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-6,
               weight_decay: float = 0.2) -> None:
    """Decoupled-weight-decay Adam update in place; frozen parameters untouched."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    state.step += 1
    t = state.step
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad if p.tensor.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.tensor.data = p.data - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    worst_coord: Tuple[int, ...] = ()


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-2)
    return np.abs(analytic - numeric) / denom


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor,
                    eps: float = 1e-6, tol: float = 1e-5,
                    coords: Optional[Sequence[Tuple[int, ...]]] = None) -> GradCheckReport:
    """Compare the taped gradient of scalar f against central differences.

    coords optionally restricts the probe to a subset of coordinates of x;
    by default every coordinate is probed.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError("check_gradients needs a scalar-valued function")
    backward(tape, y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    if coords is None:
        coords = list(np.ndindex(*x.data.shape)) if x.data.ndim else [()]
    max_err, worst = 0.0, ()
    for c in coords:
        orig = x.data[c]
        x.data[c] = orig + eps
        fp = float(f(x).data)
        x.data[c] = orig - eps
        fm = float(f(x).data)
        x.data[c] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function non-finite near probe coordinate {c}")
        numeric = (fp - fm) / (2.0 * eps)
        err = float(_rel_error(np.asarray(analytic[c]), np.asarray(numeric)))
        if err > max_err:
            max_err, worst = err, c
    return GradCheckReport(max_rel_error=max_err, passed=max_err < tol,
                           checked=len(coords), worst_coord=tuple(worst))


# --- checkpoint format -------------------------------------------------------
#
# A checkpoint is one file: a single-line JSON header (parameter names,
# shapes, config and its hash) terminated by "\n", then the raw
# little-endian float64 blocks concatenated in header order.


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(path, arrays: Dict[str, np.ndarray], config: dict) -> None:
    header = {
        "config": config,
        "config_hash": config_hash(config),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for v in arrays.values():
            f.write(np.asarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"checkpoint truncated at parameter {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        trailing = f.read(1)
    if trailing:
        raise ValueError("checkpoint has trailing bytes after the declared parameters")
    return arrays, header["config"]
