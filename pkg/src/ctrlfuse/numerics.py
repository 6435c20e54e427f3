"""Dense float tensors with a reverse-mode gradient tape.

Tensors wrap a numpy array (float32 unless a dtype is requested explicitly)
and are treated as immutable. Ops are recorded only while a ``GradTape`` is
active and at least one input requires a gradient, so inference code pays no
bookkeeping cost.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import FrozenParameterError, NumericError, ShapeError

DTYPE = np.float32
LN_EPS = 1e-5

_ACTIVE_TAPES: list["GradTape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "frozen", "grad", "name", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, frozen=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad) and not frozen
        self.frozen = bool(frozen)
        self.grad = None
        self.name = name
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = " frozen" if self.frozen else (" grad" if self.requires_grad else "")
        return f"Tensor(shape={self.shape}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Records differentiable ops executed inside a ``with`` block.

    ``backward(loss)`` walks the records newest-first, visiting each once,
    and stores accumulated gradients in ``.grad`` of every leaf tensor that
    requires one.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.visited = 0

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        self.visited = 0
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            self.visited += 1
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    if gi is not None and inp.frozen:
                        # frozen tensors never request gradients; this is a bug upstream
                        raise FrozenParameterError(f"gradient reached frozen tensor {inp.name!r}")
                    continue
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
                if inp._op is None:
                    leaves[key] = inp
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if t.frozen:
                raise FrozenParameterError(f"gradient reached frozen tensor {t.name!r}")
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


def _tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _result(op, data, inputs, backward):
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(op, inputs, out, backward))
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _need(t):
    return t.requires_grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (unbroadcast(g, a.shape) if _need(a) else None,
                unbroadcast(g, b.shape) if _need(b) else None)

    return _result("add", a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (unbroadcast(g, a.shape) if _need(a) else None,
                unbroadcast(-g, b.shape) if _need(b) else None)

    return _result("sub", a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return (unbroadcast(g * b.data, a.shape) if _need(a) else None,
                unbroadcast(g * a.data, b.shape) if _need(b) else None)

    return _result("mul", a.data * b.data, (a, b), back)


def scale(a, s: float):
    a = as_tensor(a)
    s = float(s)
    return _result("scale", a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def _mm(x, y):
    # float64 accumulation, rounded once: row results do not depend on how
    # many rows are multiplied together (needed for shard equivalence)
    out_dtype = np.result_type(x.dtype, y.dtype)
    if out_dtype == np.float64:
        return np.matmul(x, y)
    return np.matmul(x.astype(np.float64), y.astype(np.float64)).astype(out_dtype)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = gb = None
        if _need(a):
            ga = unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if _need(b):
            gb = unbroadcast(_mm(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result("matmul", _mm(a.data, b.data), (a, b), back)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), back)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * rstd
    y = xhat * gamma.data + beta.data

    def back(g):
        gx = gg = gb = None
        if _need(x):
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if _need(gamma):
            gg = unbroadcast(g * xhat, gamma.shape)
        if _need(beta):
            gb = unbroadcast(g, beta.shape)
        return gx, gg, gb

    return _result("layer_norm", y, (x, gamma, beta), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    y = 0.5 * d * (1.0 + t)

    def back(g):
        dy = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * dy,)

    return _result("gelu", y.astype(d.dtype, copy=False), (x,), back)


def silu(x):
    x = as_tensor(x)
    d = x.data
    s = 1.0 / (1.0 + np.exp(-d))
    y = d * s
    return _result("silu", y, (x,), lambda g: (g * s * (1.0 + d * (1.0 - s)),))


def mse(pred, target):
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def tape_gradient(f, params: Tensor):
    """Gradient of scalar ``f(params)`` via the tape (zeros if unused)."""
    p = Tensor(params.data.copy(), requires_grad=True, dtype=params.data.dtype)
    with GradTape() as tape:
        out = f(p)
    out = as_tensor(out)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is not finite")
    tape.backward(out)
    return np.zeros_like(p.data) if p.grad is None else p.grad


def grad_check(f, params: Tensor, eps=1e-3):
    """Max relative error between tape and central-difference gradients.

    Both sides run in float64: float32 central differences cannot resolve
    the tolerances this check is used with.
    """
    base = np.asarray(params.data, dtype=np.float64)
    tape_g = tape_gradient(f, Tensor(base, dtype=np.float64)).reshape(-1)
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        fp = as_tensor(f(Tensor(plus.reshape(base.shape), dtype=np.float64))).item()
        fm = as_tensor(f(Tensor(minus.reshape(base.shape), dtype=np.float64))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"function not finite near coordinate {i}")
        cd = (fp - fm) / (2 * eps)
        worst = max(worst, abs(tape_g[i] - cd) / (abs(cd) + 1e-8))
    return worst


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class RngStream:
    """Counter-based random stream (Philox keyed by ``seed``).

    Two streams built from the same (seed, counter) yield identical draws.
    ``split`` derives independent child streams without touching the parent.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))

    def split(self, key: int) -> "RngStream":
        return RngStream(_splitmix64(self.seed ^ _splitmix64(int(key) + 1)))

    def normal(self, shape, dtype=DTYPE):
        return self._gen.standard_normal(shape, dtype=np.float64).astype(dtype)

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def log_uniform(self, low, high, shape=None):
        return np.exp(self._gen.uniform(math.log(low), math.log(high), shape))


# --- portable tensor files -------------------------------------------------

def save_tensor(path, array):
    """Write one JSON header line followed by little-endian float32 payload."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = {"dtype": "f32", "shape": list(arr.shape), "order": "row-major", "endian": "little"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("dtype") != "f32" or header.get("order") != "row-major" or header.get("endian") != "little":
        raise ShapeError(f"{Path(path).name}: unsupported tensor header {header}")
    shape = tuple(header["shape"])
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"{Path(path).name}: payload holds {arr.size} values, header says {shape}")
    return arr.reshape(shape).astype(DTYPE)
