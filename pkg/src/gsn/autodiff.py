"""Small reverse-mode autodiff over numpy arrays.

Every op returns a :class:`Tensor`; when any input requires a gradient the
result records its parents and a backward rule. :func:`backward` sorts the
graph reachable from a scalar loss topologically and runs the rules in
reverse, accumulating into leaf ``.grad`` buffers.

Images and feature maps are NHWC; conv weights are (kh, kw, C_in, C_out).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import InvalidArgumentError, NonDeterministicError, ShapeError

NORM_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, a.data.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    inv = a.data.dtype.type(1.0 / count)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, a.shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw, "concat")


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(np.array(out), (a,), bw, "slice")


def take(a, indices) -> Tensor:
    """Rows ``a[indices]`` along axis 0; repeated indices accumulate in backward."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _make(a.data[indices], (a,), bw, "take")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, H', W', C, kh, kw
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    win = win.transpose(0, 1, 2, 4, 5, 3)  # B, ho, wo, kh, kw, C
    return np.ascontiguousarray(win).reshape(-1, kh * kw * xp.shape[3])


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B,H,W,C), w: (kh,kw,C,O), b: (O,) -> (B,Ho,Wo,O)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    bsz, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(kh * kw * c, o)
    out = cols @ wmat
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        out += b.data
        parents.append(b)
    out = out.reshape(bsz, ho, wo, o)

    def bw(g):
        g2 = g.reshape(-1, o)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh, kw, c)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def l2_normalize(a, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """x / sqrt(sum(x^2) + eps) along ``axis``."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True) + a.data.dtype.type(eps))
    y = a.data / norm

    def bw(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return _make(y, (a,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# custom nodes


def custom_op(inputs: Sequence[Tensor], data: np.ndarray, backward_fn, op: str) -> Tensor:
    """Wrap an externally computed forward value as a graph node.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    return _make(data, [as_tensor(t) for t in inputs], backward_fn, op)


# ---------------------------------------------------------------------------
# backward


@dataclass
class Tape:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Backpropagate a scalar loss; returns {id(leaf): grad} and accumulates ``leaf.grad``."""
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = tape or Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaf_grads[id(node)] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node.backward_fn(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return leaf_grads


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    checked: int
    zero_both: int
    passed: bool


@dataclass
class GradcheckReport:
    params: list[ParamCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def summary(self) -> str:
        lines = [f"{p.name:>20s}: max rel err {p.max_rel_err:.3e} over {p.checked} "
                 f"({p.zero_both} zero-both) {'PASS' if p.passed else 'FAIL'}" for p in self.params]
        return "\n".join(lines)


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-3,
              max_per_param: int | Sequence[int] | None = None, zero_tol: float = 1e-10, floor: float = 1e-7,
              rng: np.random.Generator | None = None, names: Sequence[str] | None = None) -> GradcheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` rebuilds its graph from the current ``params`` data on every call.
    Elements where both gradients are below ``zero_tol`` count as zero-both
    and pass. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise InvalidArgumentError("gradcheck requires float64 parameters")
    v0 = f().data.copy()
    v1 = f().data.copy()
    if not np.array_equal(v0, v1):
        raise NonDeterministicError("f returned different values on repeated evaluation")
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    rng = rng or np.random.default_rng(0)
    results = []
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        cap = max_per_param[k] if isinstance(max_per_param, (list, tuple)) else max_per_param
        if cap is not None and flat.size > cap:
            idx = np.sort(rng.choice(flat.size, size=cap, replace=False))
        worst = 0.0
        zero_both = 0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            ana = float(analytic.reshape(-1)[i])
            if abs(num) < zero_tol and abs(ana) < zero_tol:
                zero_both += 1
                continue
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        name = names[k] if names else (p.name or f"param{k}")
        results.append(ParamCheck(name, worst, len(idx), zero_both, worst <= tol))
    return GradcheckReport(results, tol)
