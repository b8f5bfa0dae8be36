"""Dense arrays with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and, when any input requires a
gradient, records the operation that produced it. Calling
:func:`backward` on a scalar result walks the recorded graph once in
reverse topological order and accumulates ``d loss / d leaf`` into every
leaf's ``grad``.

Only the operations the segmentation pipeline needs are provided. Binary
operations require equal shapes; the only implicit broadcast is against a
python scalar.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "precision",
    "default_dtype",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "scalar_mul",
    "scalar_add",
    "log",
    "sqrt",
    "sum",
    "mean",
    "max_over_axis",
    "softmax",
    "reshape",
    "stack",
    "pick",
    "masked_mean",
    "cosine_scores",
    "conv2d",
    "bilinear_resize",
    "nearest_resize",
    "bilinear_matrix",
]

_DTYPE: type = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype: str | type) -> Iterator[None]:
    """Switch the working precision, e.g. ``with precision("float64"):``."""
    global _DTYPE
    new = np.dtype(dtype).type
    if new not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    old, _DTYPE = _DTYPE, new
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block even for leaves that require grad."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """A value in the computation graph.

    ``value`` is a numpy array in the working precision. Leaves created
    with ``requires_grad=True`` collect gradients in ``grad`` across
    backward passes until :meth:`zero_grad` is called.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def has_nonfinite(self) -> bool:
        return not bool(np.all(np.isfinite(self.value)))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scalar_add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scalar_add(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = grad_fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls. Interior nodes are released
    after the pass, so a graph can be differentiated only once.
    """
    if loss.value.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    if not loss.requires_grad:
        return

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

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg

    for node in order:
        if not node.is_leaf:
            node.parents = ()
            node._backward = None


# -- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _result(out, (a, b), lambda g: (g / bv, -g * out / bv))


def relu(x: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    on = x.value > 0
    return _result(np.where(on, x.value, 0), (x,), lambda g: (g * on,))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    return _result(x.value * c, (x,), lambda g: (g * c,))


def scalar_add(x: Tensor, c: float) -> Tensor:
    return _result(x.value + c, (x,), lambda g: (g,))


def log(x: Tensor) -> Tensor:
    """Natural log, clamped at the smallest normal number of the dtype."""
    tiny = np.finfo(x.value.dtype).tiny
    safe = np.maximum(x.value, tiny)
    return _result(np.log(safe), (x,), lambda g: (g / safe,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.value)
    return _result(out, (x,), lambda g: (g / (2 * out),))


# -- reductions -----------------------------------------------------------


def _norm_axes(ndim: int, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError("reduce", (ndim,), detail=f"axis {a} out of range")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def sum(x: Tensor, axes=None) -> Tensor:  # noqa: A001
    ax = _norm_axes(x.value.ndim, axes)
    shape = x.shape

    def grad(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(np.sum(x.value, axis=ax), (x,), grad)


def mean(x: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(x.value.ndim, axes)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    if count == 0 or x.value.size == 0:
        raise ShapeError("mean", x.shape, detail="empty reduction")
    return scalar_mul(sum(x, ax), 1.0 / count)


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    if x.value.size == 0:
        raise ShapeError("max_over_axis", x.shape, detail="empty reduction")
    ax = _norm_axes(x.value.ndim, axis)[0]
    idx = np.expand_dims(np.argmax(x.value, axis=ax), ax)
    out = np.take_along_axis(x.value, idx, axis=ax)
    shape = x.shape

    def grad(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _result(np.squeeze(out, axis=ax), (x,), grad)


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), grad)


# -- structural -----------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.value.size:
        raise ShapeError("reshape", x.shape, shape)
    old = x.shape
    return _result(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not xs:
        raise ShapeError("stack", detail="nothing to stack")
    for x in xs[1:]:
        _same_shape("stack", xs[0], x)
    return _result(np.stack([x.value for x in xs]), tuple(xs), lambda g: tuple(g))


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[index[i, j], i, j]`` at every location with ``index >= 0``.

    Returns a 1-D tensor over the selected locations in row-major order.
    """
    index = np.asarray(index)
    if x.value.ndim != 3 or index.shape != x.shape[1:]:
        raise ShapeError("pick", x.shape, index.shape)
    rows, cols = np.nonzero(index >= 0)
    cls = index[rows, cols]
    if np.any(cls >= x.shape[0]):
        raise ShapeError("pick", x.shape, detail="class index out of range")
    shape = x.shape

    def grad(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[cls, rows, cols] = g
        return (gx,)

    return _result(x.value[cls, rows, cols], (x,), grad)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the columns ``x[:, i, j]`` where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if x.value.ndim != 3 or mask.shape != x.shape[1:]:
        raise ShapeError("masked_mean", x.shape, mask.shape)
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("masked_mean", x.shape, detail="empty reduction")
    w = mask.astype(x.value.dtype) / count
    out = np.tensordot(x.value, w, axes=([1, 2], [0, 1]))
    return _result(out, (x,), lambda g: (g[:, None, None] * w[None],))


def cosine_scores(features: Tensor, protos: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of every column of ``features`` [C, M] with every row
    of ``protos`` [P, C]; returns [P, M].

    ``eps`` is added to the product of norms so zero vectors score 0.
    """
    f, p = features.value, protos.value
    if f.ndim != 2 or p.ndim != 2 or f.shape[0] != p.shape[1]:
        raise ShapeError("cosine_scores", features.shape, protos.shape)
    dots = p @ f
    pn = np.sqrt(np.sum(p * p, axis=1))
    fn = np.sqrt(np.sum(f * f, axis=0))
    denom = pn[:, None] * fn[None, :] + eps
    out = dots / denom

    def grad(g):
        gd = g / denom
        coef = g * dots / (denom * denom)
        pn_safe = np.where(pn > 0, pn, 1)
        fn_safe = np.where(fn > 0, fn, 1)
        gp = gd @ f.T - (np.sum(coef * fn[None, :], axis=1) / pn_safe)[:, None] * p
        gf = p.T @ gd - (np.sum(coef * pn[:, None], axis=0) / fn_safe)[None, :] * f
        return gf, gp

    return _result(out, (features, protos), grad)


# -- convolution ----------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Dilated 2-D cross-correlation of a single [C_in, H, W] image."""
    xv, kv = x.value, kernel.value
    if xv.ndim != 3 or kv.ndim != 4 or kv.shape[1] != xv.shape[0]:
        raise ShapeError("conv2d", x.shape, kernel.shape, detail="channel mismatch")
    c_out, _, kh, kw = kv.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", kernel.shape, detail="kernel size must be odd")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d", kernel.shape, bias.shape, detail="bias length")

    _, h, w = xv.shape
    oh = conv_output_size(h, kh, stride, dilation, padding)
    ow = conv_output_size(w, kw, stride, dilation, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, kernel.shape, detail="empty output")
    xp = np.pad(xv, ((0, 0), (padding, padding), (padding, padding))) if padding else xv

    def window(i: int, j: int) -> tuple[slice, slice]:
        r0, c0 = i * dilation, j * dilation
        return (
            slice(r0, r0 + stride * (oh - 1) + 1, stride),
            slice(c0, c0 + stride * (ow - 1) + 1, stride),
        )

    out = np.zeros((c_out, oh, ow), dtype=np.result_type(xv, kv))
    for i in range(kh):
        for j in range(kw):
            rs, cs = window(i, j)
            out += np.tensordot(kv[:, :, i, j], xp[:, rs, cs], axes=1)
    if bias is not None:
        out += bias.value[:, None, None]

    def grad(g):
        gk = np.empty_like(kv)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                rs, cs = window(i, j)
                patch = xp[:, rs, cs]
                gk[:, :, i, j] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                gxp[:, rs, cs] += np.tensordot(kv[:, :, i, j], g, axes=([0], [0]))
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, grad)


# -- resampling -----------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """[n_out, n_in] interpolation weights with half-pixel centres.

    Source coordinate of output ``o`` is ``(o + 0.5) * n_in / n_out - 0.5``,
    clamped below at 0; indices past the end are clamped to ``n_in - 1``.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a [C, H, W] tensor; differentiable (a fixed linear map)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output size must be >= 1")
    if x.value.ndim != 3:
        raise ShapeError("bilinear_resize", x.shape, detail="expected [C, H, W]")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    dt = x.value.dtype
    rh = bilinear_matrix(h, out_h, dt)
    rw = bilinear_matrix(w, out_w, dt)
    out = np.einsum("oh,chw,pw->cop", rh, x.value, rw, optimize=True)
    return _result(
        out, (x,), lambda g: (np.einsum("oh,cop,pw->chw", rh, g, rw, optimize=True),)
    )


def nearest_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an integer label mask; output labels are a subset of the input's.

    Output pixel ``o`` copies source ``floor((o + 0.5) * n_in / n_out)``.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("nearest_resize: output size must be >= 1")
    mask = np.asarray(mask)
    h, w = mask.shape
    if (h, w) == (out_h, out_w):
        return mask.copy()
    ri = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[np.ix_(ri, ci)]
