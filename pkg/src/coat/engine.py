"""Reverse-mode automatic differentiation over numpy arrays.

All arithmetic is float64. Every operation produces a node in the active
Graph; ``backward`` walks nodes in reverse creation order (creation order is
a valid topological order) and accumulates cotangents deterministically.

Backward rules are themselves written with the engine's own operations. In a
``higher-order`` graph those rules are recorded too, so the result of one
``backward`` is a differentiable node and a second backward over any scalar
of it is well defined (double backpropagation). Branch decisions (ReLU and
clamp masks) and the softmax max-shift enter the rules as constants: the
second pass differentiates through values, never through branch choices.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np


class EngineError(Exception):
    """Base error for engine misuse."""


class ShapeError(EngineError):
    """Operands have incompatible or unexpected shapes."""


class NumericFault(EngineError):
    """An operation produced NaN or Inf; never propagated silently."""


class GraphModeError(EngineError):
    """A second-order query was issued against a first-order graph."""


FIRST_ORDER = "first-order"
HIGHER_ORDER = "higher-order"

_ids = itertools.count()


class Graph:
    """Records operation nodes and fixes the differentiation mode.

    ``mode=HIGHER_ORDER`` makes backward emit graph nodes, enabling
    grad-of-grad. Entering a Graph makes it active for ops created in the
    block. The ambient root graph is first-order and keeps no op records.
    """

    def __init__(self, mode: str = FIRST_ORDER, _keep_records: bool = True):
        if mode not in (FIRST_ORDER, HIGHER_ORDER):
            raise ValueError(f"unknown graph mode {mode!r}")
        self.mode = mode
        self.nodes: list[tuple[str, int, tuple[int, ...]]] = []
        self._keep_records = _keep_records

    def _record(self, out: "Tensor", op: str, parents) -> None:
        if self._keep_records:
            self.nodes.append((op, out.node_id, tuple(p.node_id for p in parents)))

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _graph_stack.pop()
        return False


_root_graph = Graph(_keep_records=False)
_graph_stack: list[Graph] = [_root_graph]
_grad_enabled: list[bool] = [True]


def active_graph() -> Graph:
    return _graph_stack[-1]


@contextlib.contextmanager
def no_grad():
    """Disable graph tracking; ops built inside come out as constants."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    """A float64 array plus the bookkeeping backward needs.

    The array is owned by the tensor: callers must not mutate ``data`` of a
    tensor that participates in a live graph (optimizers may update leaf
    parameters between graphs).
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id",
                 "_parents", "_vjp", "_op", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericFault("tensor created from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"
        self._graph = active_graph()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        """Same values, no graph history."""
        return Tensor(self.data)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# Ops that only move or bound finite values are exempt from the NaN/Inf scan;
# anything that can overflow is checked.
def _from_op(op: str, data: np.ndarray, parents, vjp, check: bool = True) -> Tensor:
    if check and not np.all(np.isfinite(data)):
        raise NumericFault(f"{op} produced non-finite values")
    track = _grad_enabled[-1] and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    out.node_id = next(_ids)
    out._graph = active_graph()
    if track:
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
        out._graph._record(out, op, parents)
    else:
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


def _sum_to(t: Tensor, shape) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (tracked, so twice
    differentiable)."""
    shape = tuple(shape)
    if t.shape == shape:
        return t
    extra = t.ndim - len(shape)
    if extra > 0:
        t = tsum(t, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and t.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    if t.shape != shape:
        raise ShapeError(f"cannot reduce shape {t.shape} to {shape}")
    return t


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _from_op("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _sum_to(g, a.shape), _sum_to(neg(g), b.shape)

    return _from_op("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)

    return _from_op("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

    return _from_op("div", a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (neg(g),)

    return _from_op("neg", -a.data, (a,), vjp, check=False)


def square(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (mul(g, mul(a, 2.0)),)

    return _from_op("square", np.square(a.data), (a,), vjp)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = _from_op("sqrt", np.sqrt(a.data), (a,), None)

    def vjp(g):
        return (div(mul(g, 0.5), out),)

    out._vjp = vjp
    return out


def texp(a) -> Tensor:
    a = _as_tensor(a)
    out = _from_op("exp", np.exp(a.data), (a,), None)

    def vjp(g):
        return (mul(g, out),)

    out._vjp = vjp
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    return _from_op("relu", a.data * mask, (a,), vjp, check=False)


def sign(a) -> Tensor:
    # sign(0) = 0; derivative is zero everywhere it exists, so no gradient
    # flows through (the vjp contributes nothing).
    a = _as_tensor(a)

    def vjp(g):
        return (None,)

    return _from_op("sign", np.sign(a.data), (a,), vjp, check=False)


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _as_tensor(a)
    if lo is None and hi is None:
        raise ValueError("clamp needs at least one bound")
    inside = np.ones(a.shape, dtype=np.float64)
    if lo is not None:
        inside *= a.data >= lo
    if hi is not None:
        inside *= a.data <= hi

    def vjp(g):
        return (mul(g, Tensor(inside)),)

    return _from_op("clamp", np.clip(a.data, lo, hi), (a,), vjp, check=False)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def vjp(g):
        return (reshape(g, a.shape),)

    return _from_op("reshape", np.reshape(a.data, shape), (a,), vjp, check=False)


def flatten(a, start_axis: int = 1) -> Tensor:
    a = _as_tensor(a)
    return reshape(a, a.shape[:start_axis] + (-1,))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("transpose needs ndim >= 2")

    def vjp(g):
        return (transpose(g),)

    return _from_op("transpose", np.swapaxes(a.data, -1, -2), (a,), vjp, check=False)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def vjp(g):
        return (_sum_to(g, a.shape),)

    return _from_op("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,), vjp, check=False)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)

    def vjp(g):
        if axis is None:
            kept = g if g.ndim == a.ndim else reshape(g, (1,) * a.ndim)
        elif keepdims:
            kept = g
        else:
            shape = list(a.shape)
            for ax in axis:
                shape[ax % a.ndim] = 1
            kept = reshape(g, shape)
        return (broadcast_to(kept, a.shape),)

    return _from_op("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs ndim >= 2 on both operands")

    def vjp(g):
        ga = _sum_to(matmul(g, transpose(b)), a.shape)
        gb = _sum_to(matmul(transpose(a), g), b.shape)
        return ga, gb

    return _from_op("matmul", np.matmul(a.data, b.data), (a, b), vjp)


def _pair(k):
    return tuple(k) if isinstance(k, (tuple, list)) else (int(k), int(k))


def _conv_geometry(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"kernel ({kh},{kw}) stride {stride} pad {padding} "
                         f"does not fit input ({h},{w})")
    return oh, ow


def unfold(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """im2col: (B,C,H,W) -> (B, C*kh*kw, OH*OW) patch matrix."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("unfold expects (B,C,H,W)")
    kh, kw = _pair(kernel)
    b, c, h, w = x.shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)

    def vjp(g):
        return (fold(g, (c, h, w), (kh, kw), stride, padding),)

    return _from_op("unfold", np.ascontiguousarray(cols), (x,), vjp, check=False)


def fold(cols, chw, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """col2im: exact adjoint of unfold (overlaps sum)."""
    cols = _as_tensor(cols)
    c, h, w = chw
    kh, kw = _pair(kernel)
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    b, ckk, l = cols.shape
    if ckk != c * kh * kw or l != oh * ow:
        raise ShapeError(f"fold got {cols.shape}, expected ({b},{c*kh*kw},{oh*ow})")
    g6 = cols.data.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]

    def vjp(g):
        return (unfold(g, (kh, kw), stride, padding),)

    return _from_op("fold", np.ascontiguousarray(out), (cols,), vjp)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, channels-first, zero padding."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 4:
        raise ShapeError("conv2d weight expects (F,C,kh,kw)")
    f, c, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"conv2d input {x.shape} mismatches weight {w.shape}")
    oh, ow = _conv_geometry(x.shape[2], x.shape[3], kh, kw, stride, padding)
    cols = unfold(x, (kh, kw), stride, padding)
    out = matmul(reshape(w, (f, c * kh * kw)), cols)
    out = reshape(out, (x.shape[0], f, oh, ow))
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise ShapeError(f"conv2d bias expects ({f},), got {b.shape}")
        out = add(out, reshape(b, (1, f, 1, 1)))
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-example cross-entropy from logits, max-shifted log-sum-exp.

    ``labels`` is an int array of shape (B,); returns a (B,) tensor.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (B,K) logits")
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError("labels must be integers")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels out of range [0,{k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(b), labels]
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0

    def vjp(g):
        # softmax rebuilt from tracked ops; the max shift is a constant,
        # which is exact because softmax is shift invariant.
        e = texp(sub(logits, Tensor(zmax)))
        p = div(e, tsum(e, axis=1, keepdims=True))
        return (mul(reshape(g, (b, 1)), sub(p, Tensor(onehot))),)

    return _from_op("softmax_cross_entropy", losses, (logits,), vjp)


def dot(a, b) -> Tensor:
    """Full inner product of two same-shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot shapes differ: {a.shape} vs {b.shape}")
    return tsum(mul(a, b))


def l2_norm(a, axis=None, keepdims=False) -> Tensor:
    """Euclidean norm. Gradient at exactly zero is undefined and raises."""
    return sqrt(tsum(square(a), axis=axis, keepdims=keepdims))


# Stabilizers for cosine_similarity: the spec'd denominator floor, plus a
# sub-underflow clamp before sqrt so its backward rule never divides by zero.
COS_DENOM_FLOOR = 1e-10
_NORM_SQ_FLOOR = 1e-300


def cosine_similarity(a, b, axis=None) -> Tensor:
    """cos(a,b) with denominator max(|a||b|, 1e-10); both-zero rows are
    defined as cosine 1 and contribute zero gradient."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine shapes differ: {a.shape} vs {b.shape}")
    num = tsum(mul(a, b), axis=axis)
    na2 = tsum(square(a), axis=axis)
    nb2 = tsum(square(b), axis=axis)
    denom = mul(sqrt(clamp(na2, lo=_NORM_SQ_FLOOR)), sqrt(clamp(nb2, lo=_NORM_SQ_FLOOR)))
    cos = div(num, clamp(denom, lo=COS_DENOM_FLOOR))
    both_zero = Tensor(((na2.data == 0.0) & (nb2.data == 0.0)).astype(np.float64))
    return add(mul(cos, sub(Tensor(np.ones(both_zero.shape)), both_zero)), both_zero)


def backward(output: Tensor, wrt, create_graph: bool | None = None) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``output`` with respect to the tensors in ``wrt``.

    Returns a dict keyed by the requested tensors; anything unreachable gets
    an explicit zero tensor. With ``create_graph`` (implied by a higher-order
    graph) the returned gradients are differentiable nodes.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    if create_graph is None:
        create_graph = output._graph.mode == HIGHER_ORDER

    seen = {id(output)}
    stack, reach = [output], []
    while stack:
        t = stack.pop()
        reach.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    reach.sort(key=lambda t: t.node_id, reverse=True)

    # Cotangents only flow along paths that can still reach a requested
    # tensor; anything else is dead weight (e.g. the parameter branch when
    # only the input gradient is wanted). needed(t) := t in wrt or some
    # parent of t is needed; parents have smaller ids, so one ascending pass.
    wrt_ids = {id(w) for w in wrt}
    needed: set[int] = set()
    for t in reversed(reach):
        if id(t) in wrt_ids or any(id(p) in needed for p in t._parents):
            needed.add(id(t))

    grads: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape))}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with output._graph, ctx:
        for t in reach:
            g = grads.get(id(t))
            if g is None or id(t) not in needed:
                continue
            t.grad = g
            if t._vjp is None:
                continue
            parts = t._vjp(g)
            for p, pg in zip(t._parents, parts):
                if pg is None or not p.requires_grad or id(p) not in needed:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"vjp of {t._op} returned shape {pg.shape} "
                                     f"for parent of shape {p.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return {w: grads.get(id(w)) or Tensor(np.zeros(w.shape)) for w in wrt}


def grad_of_grad(scalar: Tensor, wrt):
    """Parameter gradients of a scalar that was built from first-order
    gradients. Requires the scalar to live in a higher-order graph.

    ``wrt`` may be a name->Tensor mapping (result keyed by name) or an
    iterable of tensors (result keyed by tensor).
    """
    if scalar._graph.mode != HIGHER_ORDER:
        raise GraphModeError("grad_of_grad needs a higher-order graph; "
                             "build the computation inside Graph(HIGHER_ORDER)")
    if hasattr(wrt, "items"):
        named = list(wrt.items())
        out = backward(scalar, [t for _, t in named], create_graph=False)
        return {name: out[t] for name, t in named}
    return backward(scalar, wrt, create_graph=False)
