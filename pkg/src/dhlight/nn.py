"""Minimal reverse-mode differentiable numerics on float64 numpy arrays.

Forward passes run eagerly; when a GradientTape is active, every operation
with a grad-requiring input is recorded on it (define-by-run, tape rebuilt
per forward pass). `tape.backward(loss)` walks the record once in reverse,
accumulating gradients additively into the `.grad` buffers of all reachable
tensors, parameters included.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TapeError

Array = np.ndarray

_TAPE_STACK: list["GradientTape"] = []
_MAC_STACK: list["MacCounter"] = []


class MacCounter:
    """Counts multiply-accumulate operations of matmuls while active."""

    def __init__(self) -> None:
        self.total = 0

    def __enter__(self) -> "MacCounter":
        _MAC_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _MAC_STACK.remove(self)


def _count_macs(n: int) -> None:
    for counter in _MAC_STACK:
        counter.total += n


class Tensor:
    """Wrapper around a float64 ndarray with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable[[Array], None] | None = None
        self._tape: GradientTape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __abs__(self):
        return absolute(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        denom = self.data.size if axis is None else self.data.shape[axis]
        return _reduce_sum(self, axis, keepdims) * (1.0 / denom)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Ordered record of operations for one reverse traversal."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise TapeError("loss was not traced on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def backward(tape: GradientTape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(out: Tensor, parents: tuple, backward_fn: Callable[[Array], None]) -> None:
    if _TAPE_STACK and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._tape = _TAPE_STACK[-1]
        out._tape.nodes.append(out)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    _record(out, (a, b), bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bw(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    _record(out, (a, b), bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    _record(out, (a, b), bw)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def bw(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    _record(out, (a, b), bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    if a2.ndim != 2 or b2.ndim != 2 or a2.shape[1] != b2.shape[0]:
        raise DimensionError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    _count_macs(a2.shape[0] * a2.shape[1] * b2.shape[1])
    out_data = a2 @ b2
    if ad.ndim == 1:
        out_data = out_data[0]
    if bd.ndim == 1:
        out_data = out_data[..., 0]
    out = Tensor(out_data)

    def bw(g: Array) -> None:
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        if a.requires_grad:
            a.accumulate_grad((g2 @ b2.T).reshape(ad.shape))
        if b.requires_grad:
            b.accumulate_grad((a2.T @ g2).reshape(bd.shape))

    _record(out, (a, b), bw)
    return out


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b; raises a dimension error naming both operands."""
    in_dim = x.data.shape[-1] if x.data.ndim else 0
    if x.data.ndim not in (1, 2) or w.data.ndim != 2 or in_dim != w.data.shape[0]:
        raise DimensionError(f"dense: input shape {x.data.shape} incompatible with weight shape {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise DimensionError(f"dense: bias shape {b.data.shape} incompatible with weight shape {w.data.shape}")
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bw(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0.0))

    _record(out, (x,), bw)
    return out


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))

    def bw(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * out.data)

    _record(out, (x,), bw)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def bw(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    _record(out, (x,), bw)
    return out


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))

    def bw(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * 0.5 / out.data)

    _record(out, (x,), bw)
    return out


def absolute(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))

    def bw(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * np.sign(x.data))

    _record(out, (x,), bw)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along `axis`; rejects non-finite input."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax: input contains NaN or infinity")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def bw(g: Array) -> None:
        if x.requires_grad:
            y = out.data
            inner = (g * y).sum(axis=axis, keepdims=True)
            x.accumulate_grad(y * (g - inner))

    _record(out, (x,), bw)
    return out


def _reduce_sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g: Array) -> None:
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    _record(out, (x,), bw)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; the smaller branch gets the gradient (ties go to a)."""
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data))

    def bw(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * ~take_a, b.data.shape))

    _record(out, (a, b), bw)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero outside the closed interval."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = Tensor(np.clip(x.data, lo, hi))

    def bw(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * inside)

    _record(out, (x,), bw)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bw(g: Array) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    _record(out, (x,), bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g: Array) -> None:
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                t.accumulate_grad(g[tuple(sl)])

    _record(out, tuple(tensors), bw)
    return out


def gather_rows(x: Tensor, idx: Array) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])

    def bw(g: Array) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x.accumulate_grad(gx)

    _record(out, (x,), bw)
    return out


def take_at(x: Tensor, rows: Array, cols: Array) -> Tensor:
    """Pick x[rows[k], cols[k]] into a 1-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = Tensor(x.data[rows, cols])

    def bw(g: Array) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (rows, cols), g)
            x.accumulate_grad(gx)

    _record(out, (x,), bw)
    return out


def scatter_at(values: Tensor, rows: Array, cols: Array, shape: tuple, base: Array | None = None) -> Tensor:
    """Place a 1-D tensor of values into a matrix at fixed positions.

    `base` is a constant array added in (no gradient flows into it).
    """
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    data = np.zeros(shape) if base is None else base.astype(np.float64).copy()
    np.add.at(data, (rows, cols), values.data)
    out = Tensor(data)

    def bw(g: Array) -> None:
        if values.requires_grad:
            values.accumulate_grad(g[rows, cols])

    _record(out, (values,), bw)
    return out


def l1_norm(x: Tensor, axis=None) -> Tensor:
    return absolute(x).sum(axis=axis)

def l2_norm(x: Tensor, axis=None) -> Tensor:
    return sqrt(mul(x, x).sum(axis=axis))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    d = sub(pred, target)
    return mul(d, d).mean()


# ---------------------------------------------------------------------------
# parameters, Adam, checkpointing
# ---------------------------------------------------------------------------

class Parameter(Tensor):
    """Trainable tensor with a persistent gradient buffer and Adam moments."""

    __slots__ = ("name", "m", "v")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


class ParameterStore:
    """Named trainable parameters plus shared Adam state.

    Init policy: matrices uniform in +/-sqrt(6/(fan_in+fan_out)), vectors
    zero, coefficient blocks uniform in a caller-supplied range.
    """

    def __init__(self, seed: int = 0):
        self._params: dict[str, Parameter] = {}
        self.step_count = 0
        self.rng = np.random.default_rng(seed)

    def _register(self, name: str, data: Array) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def matrix(self, name: str, rows: int, cols: int) -> Parameter:
        bound = np.sqrt(6.0 / (rows + cols))
        return self._register(name, self.rng.uniform(-bound, bound, size=(rows, cols)))

    def zeros(self, name: str, shape) -> Parameter:
        return self._register(name, np.zeros(shape))

    def uniform(self, name: str, shape, low: float = 0.0, high: float = 1.0) -> Parameter:
        return self._register(name, self.rng.uniform(low, high, size=shape))

    def constant(self, name: str, data) -> Parameter:
        return self._register(name, np.asarray(data, dtype=np.float64))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> Iterable[Parameter]:
        return self._params.values()

    def num_scalars(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        """Standard Adam with bias correction; gradient buffers are left as-is."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for p in self.parameters():
            g = p.grad
            p.m = beta1 * p.m + (1.0 - beta1) * g
            p.v = beta2 * p.v + (1.0 - beta2) * g * g
            p.data -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)

    def snapshot(self) -> "ParameterStore":
        """Deep value copy for read-only concurrent inference."""
        out = ParameterStore()
        out.step_count = self.step_count
        for name, p in self._params.items():
            q = out._register(name, p.data.copy())
            q.m = p.m.copy()
            q.v = p.v.copy()
        return out


def finite_diff_check(loss_fn: Callable[[], Tensor], store: ParameterStore, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` must be deterministic for fixed parameters (not detected;
    a stochastic loss makes the result meaningless).
    """
    store.zero_grads()
    with GradientTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: store[name].grad.copy() for name in store.names()}

    worst = 0.0
    for name in store.names():
        p = store[name]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


_CKPT_MAGIC = b"DHLCKPT1"
_CKPT_VERSION = 1


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<H", fh.read(2))
    return fh.read(n).decode("utf-8")


def save_checkpoint(path, stores: dict[str, ParameterStore]) -> None:
    """Flat binary container: header, then per-store parameter records."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(stores)))
        for store_name, store in stores.items():
            _write_str(fh, store_name)
            fh.write(struct.pack("<QI", store.step_count, len(store.names())))
            for name in store.names():
                p = store[name]
                _write_str(fh, name)
                fh.write(struct.pack("<B", p.data.ndim))
                fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
                for arr in (p.data, p.m, p.v):
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, ParameterStore]:
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n_stores = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        stores: dict[str, ParameterStore] = {}
        for _ in range(n_stores):
            store_name = _read_str(fh)
            step_count, n_params = struct.unpack("<QI", fh.read(12))
            store = ParameterStore()
            store.step_count = step_count
            for _ in range(n_params):
                name = _read_str(fh)
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
                size = int(np.prod(shape)) if ndim else 1
                arrays = []
                for _ in range(3):
                    buf = fh.read(8 * size)
                    arrays.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
                p = store._register(name, arrays[0])
                p.m = arrays[1]
                p.v = arrays[2]
            stores[store_name] = store
    return stores
