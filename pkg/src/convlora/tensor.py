"""Double-precision tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` holding a closure that maps the
upstream gradient to gradients for its parents.  :func:`backward` walks the
graph in reverse topological order and accumulates gradients additively, so a
tensor used several times receives the sum of every path's contribution.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import DegenerateGateError, DimensionError, NonFiniteError, OracleError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str,
          allow_neg_inf: bool = False) -> Tensor:
    if allow_neg_inf:
        bad = np.isnan(data).any() or np.isposinf(data).any()
    else:
        bad = not np.isfinite(data).all()
    if bad:
        raise NonFiniteError(f"{op} produced non-finite values (shape {data.shape})")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# graph traversal


class Tape:
    """Executed ops in topological order, ending at ``root``.

    Every node appears after all of its inputs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Gradients add onto any existing ``.grad`` of leaf tensors, so call
    ``zero_grad`` between optimisation steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are rejected by _make
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)  # non-finite results are rejected by _make
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed as logaddexp(0, x) so large |x| never overflows."""
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data ** 2)
    return _make(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),), "gelu")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits against a constant target."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    x = logits.data
    out = np.logaddexp(0.0, x) - x * t
    return _make(out, (logits,), lambda g: (g * (special.expit(x) - t),), "bce_with_logits")


# ----------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "getitem")


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select entries ``rows`` along axis 0."""
    rows = np.asarray(rows, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, rows, g)
        return (out,)

    return _make(a.data[rows], (a,), bw, "take_rows")


def put_rows(a: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """Scatter ``a`` into a zero tensor with ``n`` rows at positions ``rows``."""
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + a.shape[1:])
    np.add.at(out, rows, a.data)
    return _make(out, (a,), lambda g: (g[rows],), "put_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def masked_fill_neg_inf(a: Tensor, keep: np.ndarray) -> Tensor:
    """Replace entries where ``keep`` is False by -inf (no gradient flows there)."""
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, a.data, -np.inf)
    return _make(out, (a,), lambda g: (np.where(keep, g, 0.0),), "masked_fill", allow_neg_inf=True)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with NumPy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""
    out = matmul(x, transpose(weight, None))
    return out if bias is None else out + bias


# ----------------------------------------------------------------------------
# normalisation and softmax


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilised softmax; -inf inputs map to exactly 0."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateGateError("softmax axis has no finite entry")
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


softmax_axis = softmax


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def bw(g):
        gw = _unbroadcast(g * xhat, weight.shape) if weight.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw, "layer_norm")


# ----------------------------------------------------------------------------
# spatial ops on NCHW maps


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel, (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    return mean(x, axis=(2, 3))


def conv3x3(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.ndim != 4 or kernel.shape[1:] != (x.shape[1], 3, 3):
        raise DimensionError(f"conv3x3 channel mismatch: x {x.shape}, kernel {kernel.shape}")
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # B,H,W,C'
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gcols = np.lib.stride_tricks.sliding_window_view(gp, (3, 3), axis=(2, 3))
            flipped = kernel.data[:, :, ::-1, ::-1]
            gx = np.tensordot(gcols, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        if kernel.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out, parents, bw, "conv3x3")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear resampling matrix with half-pixel centres, border clamped."""
    scale = n_out / n_in
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def interpolate_bilinear(x: Tensor, scale: float | None = None,
                         size: tuple[int, int] | None = None) -> Tensor:
    """Bilinear resize of an NCHW map.

    Either ``scale`` (output extents ``ceil(scale * extent)``) or an explicit
    ``size`` is given.  Sample positions follow ``src = (dst + 0.5) / s - 0.5``.
    """
    if x.ndim != 4:
        raise DimensionError(f"interpolate_bilinear expects NCHW, got {x.shape}")
    H, W = x.shape[2:]
    if size is None:
        if scale is None or not scale > 0:
            raise ValueError(f"interpolation scale must be positive, got {scale}")
        size = (max(1, math.ceil(scale * H - 1e-9)), max(1, math.ceil(scale * W - 1e-9)))
    Ho, Wo = size
    if Ho < 1 or Wo < 1:
        raise ValueError(f"interpolation output extents must be ≥1, got {size}")
    if (Ho, Wo) == (H, W):
        ah = aw = None
        out = x.data.copy()
    else:
        ah = _interp_matrix(H, Ho)
        aw = _interp_matrix(W, Wo)
        out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        if ah is None:
            return (g,)
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _make(out, (x,), bw, "interpolate_bilinear")


# ----------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(f: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None
                      ) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and reads ``inputs`` by closure; each input's data
    is perturbed in place.  The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.  With ``max_coords`` set, only that many
    randomly chosen coordinates per input are probed.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    y0 = f()
    if float(f().data) != float(y0.data):
        raise OracleError("function is not deterministic; disable noise sources")
    backward(y0)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
