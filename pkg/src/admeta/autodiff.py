"""Tensor arithmetic and reverse-mode automatic differentiation.

Every backward rule is written in terms of the same differentiable
primitives, so a backward pass run with ``create_graph=True`` returns
tensors that are themselves graph nodes and can be differentiated again.
That re-entrancy is what makes second-order meta-gradients possible
without any symbolic tricks.

Design notes:

* A :class:`Tensor` wraps a numpy array. Graph edges (parents and their
  vector-Jacobian closures) are only recorded while recording is enabled
  and at least one input requires gradients.
* ``backward`` is functional: it returns fresh gradient tensors and never
  mutates anything reachable from the graph, so repeated calls on the
  same graph give identical results.
* Gradients of ``relu`` at exactly 0 use subgradient 0; max reductions
  break ties toward the first (row-major) maximum.
"""

from __future__ import annotations

import contextvars
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, LabelError, ShapeError

__all__ = [
    "Tensor",
    "GradMap",
    "no_record",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "pow_s",
    "exp",
    "log",
    "matmul",
    "permute",
    "transpose",
    "reshape",
    "broadcast_to",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "relu",
    "take_flat",
    "scatter_flat",
    "pad2d",
    "crop2d",
    "detach",
    "flatten",
    "cross_entropy",
    "conv2d",
    "max_pool2x2",
    "batch_norm",
    "backward",
    "zeros_like",
]

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_RECORDING: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "admeta_recording", default=True
)


class no_record:
    """Context manager that pauses graph recording.

    Used internally by ``backward`` when ``create_graph`` is off, and handy
    for cheap evaluation passes that will never be differentiated.
    """

    def __enter__(self):
        self._token = _RECORDING.set(False)
        return self

    def __exit__(self, *exc):
        _RECORDING.reset(self._token)
        return False


class _record_on:
    """Force recording on (backward with ``create_graph=True``)."""

    def __enter__(self):
        self._token = _RECORDING.set(True)
        return self

    def __exit__(self, *exc):
        _RECORDING.reset(self._token)
        return False


class Tensor:
    """Dense row-major numeric array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np.dtype(dtype), copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjps: tuple = ()
        if self.requires_grad and arr.dtype not in FLOAT_DTYPES:
            raise ContractError(
                f"only float tensors can require gradients, got dtype {arr.dtype}"
            )

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return mul(self, _coerce(1.0 / other, self))
        return mul(self, pow_s(other, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_s(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def detach(self) -> "Tensor":
        return detach(self)


GradMap = dict[str, Tensor]


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` as a constant Tensor (no-op for tensors without dtype change)."""
    if isinstance(x, Tensor):
        if dtype is None or x.data.dtype == np.dtype(dtype):
            return x
        return Tensor(x.data, dtype=dtype)
    return Tensor(x, dtype=dtype)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def _coerce(x, like: Tensor) -> Tensor:
    """Wrap python scalars/arrays as constants matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, inputs: tuple, vjps: tuple) -> Tensor:
    """Build an op result, recording graph edges when tracing is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    if _RECORDING.get() and any(p.requires_grad for p in inputs):
        out.requires_grad = True
        out._parents = inputs
        out._vjps = vjps
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjps = ()
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gdim, sdim) in enumerate(zip(g.shape, shape)) if sdim == 1 and gdim != 1
    )
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.shape),
            lambda g: _unbroadcast(neg(g), b.shape),
        ),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(mul(g, b), a.shape),
            lambda g: _unbroadcast(mul(g, a), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), (lambda g: neg(g),))


def pow_s(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    e = float(exponent)
    out = a.data**e
    scale = Tensor(np.asarray(e, dtype=a.data.dtype))

    def vjp(g):
        return mul(mul(g, scale), pow_s(a, e - 1.0))

    return _make(out, (a,), (vjp,))


def exp(a: Tensor) -> Tensor:
    holder: list = []

    def vjp(g):
        return mul(g, holder[0])

    result = _make(np.exp(a.data), (a,), (vjp,))
    holder.append(result)
    return result


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), (lambda g: mul(g, pow_s(a, -1.0)),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: matmul(g, transpose(b)),
            lambda g: matmul(transpose(a), g),
        ),
    )


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make(out, (a,), (lambda g: permute(g, inverse),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return permute(a, (1, 0))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    src = a.shape
    return _make(out, (a,), (lambda g: reshape(g, src),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = np.broadcast_to(a.data, shape)
    src = a.shape
    return _make(out, (a,), (lambda g: _unbroadcast(g, src),))


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape

    def vjp(g):
        if not keepdims:
            kept = list(src)
            for ax in axes:
                kept[ax] = 1
            g = reshape(g, kept)
        return broadcast_to(g, src)

    return _make(out, (a,), (vjp,))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    total = reduce_sum(a, axis=axes, keepdims=keepdims)
    return mul(total, Tensor(np.asarray(1.0 / count, dtype=a.data.dtype)))


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; ties route the gradient to the first maximum."""
    ax = axis % a.ndim
    out = a.data.max(axis=ax)
    idx = np.argmax(a.data, axis=ax)
    mask = np.zeros_like(a.data)
    np.put_along_axis(mask, np.expand_dims(idx, ax), 1.0, axis=ax)
    mask_t = Tensor(mask)
    kept = list(a.shape)
    kept[ax] = 1
    src = a.shape

    def vjp(g):
        return mul(broadcast_to(reshape(g, kept), src), mask_t)

    return _make(out, (a,), (vjp,))


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(a.data.dtype))
    out = a.data * mask.data
    return _make(out, (a,), (lambda g: mul(g, mask),))


def take_flat(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from the row-major flattening of ``a``; linear in ``a``."""
    idx = np.asarray(indices)
    out = a.data.reshape(-1)[idx]
    size = a.size
    src = a.shape

    def vjp(g):
        return reshape(scatter_flat(g, idx, size), src)

    return _make(out, (a,), (vjp,))


def scatter_flat(src: Tensor, indices: np.ndarray, size: int) -> Tensor:
    """Scatter-add ``src`` into a flat zero buffer of ``size`` elements."""
    idx = np.asarray(indices).reshape(-1)
    out = np.zeros(size, dtype=src.data.dtype)
    np.add.at(out, idx, src.data.reshape(-1))
    shape = np.asarray(indices).shape

    def vjp(g):
        return reshape(take_flat(g, idx), shape)

    return _make(out, (src,), (vjp,))


def pad2d(a: Tensor, pad: int = 1) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on each side."""
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width)
    return _make(out, (a,), (lambda g: crop2d(g, pad),))


def crop2d(a: Tensor, pad: int = 1) -> Tensor:
    """Drop ``pad`` rows/columns from each side of the last two axes."""
    out = a.data[..., pad:-pad, pad:-pad]
    return _make(np.ascontiguousarray(out), (a,), (lambda g: pad2d(g, pad),))


def detach(a: Tensor) -> Tensor:
    """A constant copy of ``a``'s value, cut out of the graph."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# composite neural-net operations
# ---------------------------------------------------------------------------


def flatten(a: Tensor) -> Tensor:
    """Row-major flatten of all but the leading (batch) axis."""
    if a.ndim < 2:
        raise ShapeError(f"flatten expects a batched tensor, got shape {a.shape}")
    rest = int(np.prod(a.shape[1:], dtype=np.int64))
    return reshape(a, (a.shape[0], rest))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, via stable log-sum-exp."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes], got {logits.shape}")
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    y = y.astype(np.int64).reshape(-1)
    batch, nclasses = logits.shape
    if y.shape[0] != batch:
        raise ShapeError(f"{batch} rows of logits but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= nclasses):
        raise LabelError(f"labels must lie in [0, {nclasses}), got range "
                         f"[{y.min()}, {y.max()}]")
    # The row max is detached: shifting by a constant leaves softmax unchanged.
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, shift)
    lse = add(log(reduce_sum(exp(z), axis=1, keepdims=True)), shift)
    picked = take_flat(logits, np.arange(batch, dtype=np.int64) * nclasses + y)
    return reduce_mean(sub(reshape(lse, (batch,)), picked))


_PATCH_IDX_CACHE: dict = {}
_POOL_IDX_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()


def _conv_patch_indices(b: int, c: int, h: int, w: int) -> np.ndarray:
    """Flat indices into the zero-padded input for 3x3 stride-1 patches."""
    key = (b, c, h, w)
    with _CACHE_LOCK:
        cached = _PATCH_IDX_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2, w + 2
    bi = np.arange(b).reshape(b, 1, 1, 1, 1, 1)
    ci = np.arange(c).reshape(1, 1, 1, c, 1, 1)
    oh = np.arange(h).reshape(1, h, 1, 1, 1, 1)
    ow = np.arange(w).reshape(1, 1, w, 1, 1, 1)
    kh = np.arange(3).reshape(1, 1, 1, 1, 3, 1)
    kw = np.arange(3).reshape(1, 1, 1, 1, 1, 3)
    idx = ((bi * c + ci) * hp + (oh + kh)) * wp + (ow + kw)
    idx = np.ascontiguousarray(idx.reshape(b * h * w, c * 9))
    with _CACHE_LOCK:
        _PATCH_IDX_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 stride-1 cross-correlation with same-padding, plus per-filter bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B, C, H, W], got {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be [F, C, 3, 3], got {w.shape}")
    batch, cin, height, width = x.shape
    filters, cker = w.shape[:2]
    if cin != cker:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel {cker}")
    if b.shape != (filters,):
        raise ShapeError(f"conv2d bias must be [{filters}], got {b.shape}")
    padded = pad2d(x, 1)
    cols = take_flat(padded, _conv_patch_indices(batch, cin, height, width))
    out = matmul(cols, transpose(reshape(w, (filters, cin * 9))))
    out = add(out, b)
    out = reshape(out, (batch, height, width, filters))
    return permute(out, (0, 3, 1, 2))


def _pool_indices(b: int, c: int, h: int, w: int) -> np.ndarray:
    """Flat indices grouping each 2x2 window (row-major within the window)."""
    key = (b, c, h, w)
    with _CACHE_LOCK:
        cached = _POOL_IDX_CACHE.get(key)
    if cached is not None:
        return cached
    oh, ow = h // 2, w // 2
    bi = np.arange(b).reshape(b, 1, 1, 1, 1, 1)
    ci = np.arange(c).reshape(1, c, 1, 1, 1, 1)
    ohi = np.arange(oh).reshape(1, 1, oh, 1, 1, 1)
    owi = np.arange(ow).reshape(1, 1, 1, ow, 1, 1)
    kh = np.arange(2).reshape(1, 1, 1, 1, 2, 1)
    kw = np.arange(2).reshape(1, 1, 1, 1, 1, 2)
    idx = ((bi * c + ci) * h + (2 * ohi + kh)) * w + (2 * owi + kw)
    idx = np.ascontiguousarray(idx.reshape(b * c * oh * ow, 4))
    with _CACHE_LOCK:
        _POOL_IDX_CACHE[key] = idx
    return idx


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd extents are floored (last row/col dropped)."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2x2 input must be [B, C, H, W], got {x.shape}")
    batch, chan, height, width = x.shape
    if height < 2 or width < 2:
        raise ShapeError(f"max_pool2x2 needs spatial extents >= 2, got {height}x{width}")
    oh, ow = height // 2, width // 2
    windows = take_flat(x, _pool_indices(batch, chan, height, width))
    pooled = reduce_max(windows, axis=1)
    return reshape(pooled, (batch, chan, oh, ow))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization using statistics of the current batch only."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm input must be [B, F, H, W], got {x.shape}")
    feats = x.shape[1]
    if gamma.shape != (feats,) or beta.shape != (feats,):
        raise ShapeError(
            f"batch_norm expects gamma/beta of shape [{feats}], got "
            f"{gamma.shape} / {beta.shape}"
        )
    axes = (0, 2, 3)
    mu = reduce_mean(x, axis=axes, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=axes, keepdims=True)
    eps_t = Tensor(np.asarray(eps, dtype=x.data.dtype))
    inv_std = pow_s(add(var, eps_t), -0.5)
    xhat = mul(centered, inv_std)
    gamma_b = reshape(gamma, (1, feats, 1, 1))
    beta_b = reshape(beta, (1, feats, 1, 1))
    return add(mul(xhat, gamma_b), beta_b)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(
    root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False
) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``root`` w.r.t. each tensor in ``wrt``.

    Targets that the root does not depend on receive zero gradients. With
    ``create_graph=True`` the returned gradients carry their own graphs and
    can be differentiated again.
    """
    if not isinstance(root, Tensor):
        raise ContractError("backward root must be a Tensor")
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    targets = list(wrt)
    for t in targets:
        if not isinstance(t, Tensor):
            raise ContractError("every wrt entry must be a Tensor")
    if not root.requires_grad:
        return [zeros_like(t) for t in targets]

    order = _toposort(root)
    cotangents: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}
    guard = _record_on if create_graph else no_record
    with guard():
        for node in reversed(order):
            g = cotangents.get(id(node))
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if vjp is None or not parent.requires_grad:
                    continue
                pg = vjp(g)
                held = cotangents.get(id(parent))
                cotangents[id(parent)] = pg if held is None else add(held, pg)
    return [
        cotangents[id(t)] if id(t) in cotangents else zeros_like(t) for t in targets
    ]
