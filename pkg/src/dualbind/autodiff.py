"""Minimal reverse-mode autodiff on numpy arrays, with a differentiable backward pass.

The training objective here contains the gradient of the energy with respect
to perturbed ligand coordinates, and the optimizer then needs the derivative
of *that* gradient with respect to the model parameters.  To support this,
every backward rule is itself expressed in terms of the primitives below, so
gradients come back as graph-recorded tensors that can be differentiated
again.

Broadcasting follows the numpy rule: shapes are aligned on trailing axes and
axes of extent 1 are stretched.  All elementwise binary primitives accept
broadcastable operands; their backward rules reduce the upstream gradient
back to the original operand shape.

64-bit floats are the default (gradient checks need them); pass
``dtype=np.float32`` to :func:`tensor` / :func:`constant` for faster
inference.
"""

from __future__ import annotations

import itertools
import threading
import warnings

import numpy as np

DEFAULT_DTYPE = np.float64

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A strict-mode check found a NaN or infinity in an operand."""


class GraphError(RuntimeError):
    """Tensors from different graphs were mixed, or backward was misused."""


class Graph:
    """Append-only record of primitive operations.

    Records are stored in execution order, so every operation's inputs appear
    before the operation itself; backward() exploits this for its reverse
    sweep, and replay() re-executes the record to reproduce forward values
    bit-identically.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _state.graph_stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.graph_stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def replay(self):
        """Re-execute every record from its stored inputs.

        Returns the maximum absolute difference against the stored outputs
        (0.0 for a faithful record; forward execution is deterministic, so
        anything else indicates graph corruption).
        """
        worst = 0.0
        for rec in self.records:
            redone = _FORWARD[rec.kind]([t.data for t in rec.inputs], rec.ctx)
            diff = np.max(np.abs(redone - rec.out.data)) if redone.size else 0.0
            worst = max(worst, float(diff))
        return worst

    def release(self):
        """Drop the op record, breaking tensor<->record reference cycles.

        Training loops call this after consuming each sample's gradients so
        graph memory is reclaimed by reference counting instead of waiting
        for the cycle collector (which stalls badly at these object counts).
        The graph is unusable for backward() or replay() afterwards.
        """
        for rec in self.records:
            rec.inputs = ()
            rec.out = None
            rec.ctx = None
        self.records.clear()


class _State(threading.local):
    # thread-local so worker threads record into independent graphs
    def __init__(self):
        self.graph_stack = [Graph()]
        self.recording = True
        self.strict = False


_state = _State()


def active_graph():
    return _state.graph_stack[-1]


class OpRecord:
    __slots__ = ("kind", "inputs", "out", "ctx")

    def __init__(self, kind, inputs, out, ctx):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


class Tensor:
    """An n-dimensional array with optional gradient tracking.

    A tensor produced by a primitive keeps a reference to the producing op
    and to the graph that recorded it; leaves (constants and parameters)
    belong to no graph until used.
    """

    __slots__ = ("data", "requires_grad", "op", "graph", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.graph = None
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad}, id={self.node_id})"

    # Operator sugar; scalars are lifted to constants of the same dtype.
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, float(p))


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def zeros_like(t):
    return Tensor(np.zeros_like(t.data))


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class no_record:
    """Context in which primitives execute without recording.

    Used for inference: forward values are identical, but backward() is
    unavailable for tensors created inside.
    """

    def __enter__(self):
        self._prev = _state.recording
        _state.recording = False
        return self

    def __exit__(self, *exc):
        _state.recording = self._prev
        return False


class strict_nonfinite:
    """Context in which primitives reject NaN/inf operands."""

    def __enter__(self):
        self._prev = _state.strict
        _state.strict = True
        return self

    def __exit__(self, *exc):
        _state.strict = self._prev
        return False


def _record(kind, inputs, out_data, ctx):
    if _state.strict:
        for t in inputs:
            if t.data.size and not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"{kind}: non-finite operand (shape {t.data.shape})")
    out = Tensor(out_data)
    tracked = False
    if _state.recording:
        for t in inputs:
            if t.requires_grad:
                tracked = True
                break
    if tracked:
        g = active_graph()
        for t in inputs:
            if t.graph is not None and t.graph is not g:
                raise GraphError(
                    f"{kind}: input tensor {t.node_id} belongs to a different graph"
                )
        out.requires_grad = True
        out.op = OpRecord(kind, tuple(inputs), out, ctx)
        out.graph = g
        g.records.append(out.op)
    return out


def _binop(kind, ufunc, a, b):
    # let numpy do the broadcast check; re-raising keeps the error uniform
    try:
        out = ufunc(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _record(kind, (a, b), out, None)


def _unbroadcast(g, shape):
    """Reduce a gradient back to the pre-broadcast operand shape."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    if axes:
        g = sum_reduce(g, axes, keepdims=False)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# Primitives.  Forward kernels are registered for graph replay; backward
# rules (VJPs) build new records so gradients stay differentiable.
# ---------------------------------------------------------------------------

_FORWARD = {}
_VJP = {}


def _primitive(kind):
    def deco(fn):
        _FORWARD[kind] = fn
        return fn

    return deco


def _vjp(kind):
    def deco(fn):
        _VJP[kind] = fn
        return fn

    return deco


@_primitive("add")
def _f_add(xs, ctx):
    return xs[0] + xs[1]


def add(a, b):
    return _binop("add", np.add, a, b)


@_vjp("add")
def _b_add(rec, g, need):
    a, b = rec.inputs
    return (
        _unbroadcast(g, a.shape) if need[0] else None,
        _unbroadcast(g, b.shape) if need[1] else None,
    )


@_primitive("sub")
def _f_sub(xs, ctx):
    return xs[0] - xs[1]


def sub(a, b):
    return _binop("sub", np.subtract, a, b)


@_vjp("sub")
def _b_sub(rec, g, need):
    a, b = rec.inputs
    return (
        _unbroadcast(g, a.shape) if need[0] else None,
        _unbroadcast(neg(g), b.shape) if need[1] else None,
    )


@_primitive("mul")
def _f_mul(xs, ctx):
    return xs[0] * xs[1]


def mul(a, b):
    return _binop("mul", np.multiply, a, b)


@_vjp("mul")
def _b_mul(rec, g, need):
    a, b = rec.inputs
    ga = _unbroadcast(mul(g, b), a.shape) if need[0] else None
    gb = _unbroadcast(mul(g, a), b.shape) if need[1] else None
    return (ga, gb)


@_primitive("div")
def _f_div(xs, ctx):
    return xs[0] / xs[1]


def div(a, b):
    return _binop("div", np.divide, a, b)


@_vjp("div")
def _b_div(rec, g, need):
    a, b = rec.inputs
    ga = _unbroadcast(div(g, b), a.shape) if need[0] else None
    gb = None
    if need[1]:
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
    return (ga, gb)


@_primitive("neg")
def _f_neg(xs, ctx):
    return -xs[0]


def neg(a):
    return _record("neg", (a,), -a.data, None)


@_vjp("neg")
def _b_neg(rec, g, need):
    return (neg(g),)


@_primitive("scale")
def _f_scale(xs, ctx):
    return xs[0] * ctx


def scale(a, s):
    """Multiply by a python float; cheaper than mul with a lifted constant."""
    s = float(s)
    return _record("scale", (a,), a.data * s, s)


@_vjp("scale")
def _b_scale(rec, g, need):
    return (scale(g, rec.ctx),)


def _mm(a, b):
    # collapse leading axes into one GEMM when the right operand is a plain
    # matrix: same contraction order per output element, so bit-identical,
    # but far cheaper than looping many small GEMM calls
    if a.ndim > 2 and b.ndim == 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
    return a @ b


@_primitive("matmul")
def _f_matmul(xs, ctx):
    return _mm(xs[0], xs[1])


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    try:
        out = _mm(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None
    return _record("matmul", (a, b), out, None)


def _swap_last(t):
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return permute(t, axes)


def _flat_rows(t):
    return reshape(t, (t.data.size // t.shape[-1], t.shape[-1]))


@_vjp("matmul")
def _b_matmul(rec, g, need):
    a, b = rec.inputs
    ga = _unbroadcast(matmul(g, _swap_last(b)), a.shape) if need[0] else None
    gb = None
    if need[1]:
        if a.ndim > 2 and b.ndim == 2:
            # one flattened GEMM replaces batched GEMMs plus a reduction
            gb = matmul(_swap_last(_flat_rows(a)), _flat_rows(g))
        else:
            gb = _unbroadcast(matmul(_swap_last(a), g), b.shape)
    return (ga, gb)


@_primitive("exp")
def _f_exp(xs, ctx):
    return np.exp(xs[0])


def exp(a):
    return _record("exp", (a,), np.exp(a.data), None)


@_vjp("exp")
def _b_exp(rec, g, need):
    return (mul(g, rec.out),)


@_primitive("log")
def _f_log(xs, ctx):
    return np.log(xs[0])


def log(a):
    return _record("log", (a,), np.log(a.data), None)


@_vjp("log")
def _b_log(rec, g, need):
    return (div(g, rec.inputs[0]),)


@_primitive("sqrt")
def _f_sqrt(xs, ctx):
    return np.sqrt(xs[0])


def sqrt(a):
    return _record("sqrt", (a,), np.sqrt(a.data), None)


@_vjp("sqrt")
def _b_sqrt(rec, g, need):
    return (scale(div(g, rec.out), 0.5),)


@_primitive("pow_const")
def _f_pow(xs, ctx):
    return xs[0] ** ctx


def pow_const(a, p):
    p = float(p)
    return _record("pow_const", (a,), a.data**p, p)


@_vjp("pow_const")
def _b_pow(rec, g, need):
    (a,) = rec.inputs
    p = rec.ctx
    return (scale(mul(g, pow_const(a, p - 1.0)), p),)


@_primitive("sum")
def _f_sum(xs, ctx):
    axes, keepdims = ctx
    return np.sum(xs[0], axis=axes, keepdims=keepdims)


def sum_reduce(a, axes=None, keepdims=False):
    if axes is not None:
        axes = tuple(ax % a.ndim for ax in (axes if isinstance(axes, (tuple, list)) else (axes,)))
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    return _record("sum", (a,), out, (axes, keepdims))


@_vjp("sum")
def _b_sum(rec, g, need):
    (a,) = rec.inputs
    axes, keepdims = rec.ctx
    if axes is not None and not keepdims:
        kept = list(rec.out.shape)
        for ax in sorted(axes):
            kept.insert(ax, 1)
        g = reshape(g, tuple(kept))
    return (broadcast_to(g, a.shape),)


@_primitive("broadcast_to")
def _f_bcast(xs, ctx):
    return np.broadcast_to(xs[0], ctx)


def broadcast_to(a, shape):
    # a read-only view; every kernel allocates its own output, so sharing is safe
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _record("broadcast_to", (a,), out, tuple(shape))


@_vjp("broadcast_to")
def _b_bcast(rec, g, need):
    (a,) = rec.inputs
    return (_unbroadcast(g, a.shape),)


@_primitive("reshape")
def _f_reshape(xs, ctx):
    return xs[0].reshape(ctx)


def reshape(a, shape):
    return _record("reshape", (a,), a.data.reshape(shape), tuple(shape))


@_vjp("reshape")
def _b_reshape(rec, g, need):
    return (reshape(g, rec.inputs[0].shape),)


@_primitive("permute")
def _f_permute(xs, ctx):
    return np.transpose(xs[0], ctx)


def permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for ndim {a.ndim}")
    return _record("permute", (a,), np.transpose(a.data, axes), axes)


@_vjp("permute")
def _b_permute(rec, g, need):
    inverse = tuple(int(i) for i in np.argsort(rec.ctx))
    return (permute(g, inverse),)


@_primitive("concat")
def _f_concat(xs, ctx):
    return np.concatenate(xs, axis=ctx)


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} incompatible along axis {axis}") from None
    return _record("concat", tuple(tensors), out, axis)


@_vjp("concat")
def _b_concat(rec, g, need):
    axis = rec.ctx
    grads = []
    offset = 0
    for t, want in zip(rec.inputs, need):
        extent = t.shape[axis]
        grads.append(narrow(g, axis, offset, extent) if want else None)
        offset += extent
    return tuple(grads)


@_primitive("narrow")
def _f_narrow(xs, ctx):
    axis, start, length = ctx
    index = [slice(None)] * xs[0].ndim
    index[axis] = slice(start, start + length)
    return xs[0][tuple(index)]


def narrow(a, axis, start, length):
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: window [{start}, {start + length}) outside extent {a.shape[axis]}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    return _record("narrow", (a,), a.data[tuple(index)], (axis, start, length))


@_vjp("narrow")
def _b_narrow(rec, g, need):
    (a,) = rec.inputs
    axis, start, _ = rec.ctx
    return (pad_axis(g, axis, start, a.shape[axis] - start - g.shape[axis]),)


@_primitive("pad_axis")
def _f_pad(xs, ctx):
    axis, before, after = ctx
    widths = [(0, 0)] * xs[0].ndim
    widths[axis] = (before, after)
    return np.pad(xs[0], widths)


def pad_axis(a, axis, before, after):
    axis = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    return _record("pad_axis", (a,), np.pad(a.data, widths), (axis, before, after))


@_vjp("pad_axis")
def _b_pad(rec, g, need):
    (a,) = rec.inputs
    axis, before, _ = rec.ctx
    return (narrow(g, axis, before, a.shape[axis]),)


@_primitive("gather_rows")
def _f_gather(xs, ctx):
    return xs[0][ctx].copy()


def gather_rows(a, indices):
    """Select rows (axis 0) by integer index; duplicates allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    return _record("gather_rows", (a,), a.data[idx].copy(), idx)


@_vjp("gather_rows")
def _b_gather(rec, g, need):
    (a,) = rec.inputs
    return (scatter_add_rows(g, rec.ctx, a.shape[0]),)


@_primitive("scatter_add_rows")
def _f_scatter(xs, ctx):
    idx, n_rows = ctx
    out = np.zeros((n_rows,) + xs[0].shape[1:], dtype=xs[0].dtype)
    np.add.at(out, idx, xs[0])
    return out


def scatter_add_rows(src, indices, n_rows):
    """Accumulate src rows into a zero tensor of n_rows rows (adjoint of gather)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (src.shape[0],):
        raise ShapeError(
            f"scatter_add_rows: {idx.shape[0] if idx.ndim else 0} indices for {src.shape[0]} rows"
        )
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, idx, src.data)
    return _record("scatter_add_rows", (src,), out, (idx, n_rows))


@_vjp("scatter_add_rows")
def _b_scatter(rec, g, need):
    idx, _ = rec.ctx
    return (gather_rows(g, idx),)


@_primitive("maximum_scalar")
def _f_maximum(xs, ctx):
    return np.maximum(xs[0], ctx[0])


def maximum_scalar(a, c):
    c = float(c)
    # subgradient 0 at the kink; mask frozen at record time
    mask = (a.data > c).astype(a.dtype)
    return _record("maximum_scalar", (a,), np.maximum(a.data, c), (c, mask))


@_vjp("maximum_scalar")
def _b_maximum(rec, g, need):
    return (mul(g, constant(rec.ctx[1])),)


# ---------------------------------------------------------------------------
# Fused primitives.  Mathematically these are compositions of the ops above,
# but recording them as single nodes keeps training graphs (and the second
# graphs the score-matching objective builds on top of them) much smaller.
# Their VJPs are themselves built from recorded ops, so nothing is lost for
# higher-order differentiation.
# ---------------------------------------------------------------------------


@_primitive("affine")
def _f_affine(xs, ctx):
    return _mm(xs[0], xs[1]) + xs[2]


def affine(x, w, b):
    """x @ w + b in one record."""
    if x.ndim < 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine: got x {x.shape}, w {w.shape}, b {b.shape}")
    if x.shape[-1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine: shapes {x.shape}, {w.shape}, {b.shape} inconsistent")
    return _record("affine", (x, w, b), _mm(x.data, w.data) + b.data, None)


@_vjp("affine")
def _b_affine(rec, g, need):
    x, w, b = rec.inputs
    gx = matmul(g, _swap_last(w)) if need[0] else None
    gw = None
    if need[1]:
        if x.ndim > 2:
            gw = matmul(_swap_last(_flat_rows(x)), _flat_rows(g))
        else:
            gw = matmul(_swap_last(x), g)
    gb = _unbroadcast(g, b.shape) if need[2] else None
    return (gx, gw, gb)


@_primitive("sigmoid")
def _f_sigmoid(xs, ctx):
    # via tanh: stable at both tails, one transcendental call
    return 0.5 * (1.0 + np.tanh(0.5 * xs[0]))


def sigmoid(a):
    return _record("sigmoid", (a,), _f_sigmoid((a.data,), None), None)


@_vjp("sigmoid")
def _b_sigmoid(rec, g, need):
    s = rec.out
    return (mul(g, mul(s, sub(constant(np.ones(())), s))),)


def silu(a):
    # composite on purpose: the sigmoid output stays in the graph, so both
    # backward passes reuse it instead of re-evaluating the transcendental
    return mul(a, sigmoid(a))


@_primitive("norm_affine")
def _f_norm_affine(xs, ctx):
    x, gain, bias = xs
    c = x - x.mean(axis=-1, keepdims=True)
    s = np.sqrt((c * c).mean(axis=-1, keepdims=True) + ctx[0])
    return c / s * gain + bias


def norm_affine(x, gain, bias, eps=1e-5):
    """layer_norm(x) * gain + bias as a single record."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"norm_affine: gain {gain.shape} / bias {bias.shape} must match last axis of x {x.shape}"
        )
    xd = x.data
    c = xd - xd.mean(axis=-1, keepdims=True)
    s = np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    xhat = c / s
    # xhat and s ride along for the unrecorded backward fast path
    return _record("norm_affine", (x, gain, bias), xhat * gain.data + bias.data, (eps, xhat, s))


@_vjp("norm_affine")
def _b_norm_affine(rec, g, need):
    x, gain, bias = rec.inputs
    eps = rec.ctx[0]
    xhat = None
    gx = None
    if need[0] or need[1]:
        # one shared recompute of the normalization chain (recorded, so the
        # result stays differentiable for second-order use)
        mu = mean_reduce(x, (-1,), keepdims=True)
        c = sub(x, mu)
        s = sqrt(add(mean_reduce(mul(c, c), (-1,), keepdims=True), _lift(eps, x.dtype)))
        xhat = div(c, s)
    if need[0]:
        # standard layer-norm backward, with means along the normalized axis
        gg = mul(g, gain)
        m1 = mean_reduce(gg, (-1,), keepdims=True)
        m2 = mean_reduce(mul(gg, xhat), (-1,), keepdims=True)
        gx = div(sub(sub(gg, m1), mul(xhat, m2)), s)
    ggain = _unbroadcast(mul(g, xhat), gain.shape) if need[1] else None
    gbias = _unbroadcast(g, bias.shape) if need[2] else None
    return (gx, ggain, gbias)


@_primitive("softmax")
def _f_softmax(xs, ctx):
    x = xs[0]
    e = np.exp(x - np.max(x, axis=ctx, keepdims=True))
    return e / np.sum(e, axis=ctx, keepdims=True)


def softmax(a, axis=-1):
    axis = axis % a.ndim
    return _record("softmax", (a,), _f_softmax((a.data,), axis), axis)


@_vjp("softmax")
def _b_softmax(rec, g, need):
    y = rec.out
    axis = rec.ctx
    gy = mul(g, y)
    return (sub(gy, mul(y, sum_reduce(gy, (axis,), keepdims=True))),)


# ---------------------------------------------------------------------------
# Raw backward rules.  backward(record=False) walks these instead of the
# recorded VJPs: same arithmetic in the same order (so results match the
# recorded path bit for bit), but operating on bare arrays with no graph
# bookkeeping.  Used for final differentiation passes that feed an optimizer
# step, where nothing downstream ever differentiates the gradient again.
# ---------------------------------------------------------------------------

_VJP_RAW = {}


def _raw(kind):
    def deco(fn):
        _VJP_RAW[kind] = fn
        return fn
    return deco


def _raw_unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    if axes:
        g = np.sum(g, axis=axes)
    if g.shape != shape:
        g = g.reshape(shape)
    return g


@_raw("add")
def _r_add(rec, g, need):
    a, b = rec.inputs
    return (
        _raw_unbroadcast(g, a.shape) if need[0] else None,
        _raw_unbroadcast(g, b.shape) if need[1] else None,
    )


@_raw("sub")
def _r_sub(rec, g, need):
    a, b = rec.inputs
    return (
        _raw_unbroadcast(g, a.shape) if need[0] else None,
        _raw_unbroadcast(-g, b.shape) if need[1] else None,
    )


@_raw("mul")
def _r_mul(rec, g, need):
    a, b = rec.inputs
    ga = _raw_unbroadcast(g * b.data, a.shape) if need[0] else None
    gb = _raw_unbroadcast(g * a.data, b.shape) if need[1] else None
    return (ga, gb)


@_raw("div")
def _r_div(rec, g, need):
    a, b = rec.inputs
    ga = _raw_unbroadcast(g / b.data, a.shape) if need[0] else None
    gb = None
    if need[1]:
        gb = _raw_unbroadcast(-((g * a.data) / (b.data * b.data)), b.shape)
    return (ga, gb)


@_raw("neg")
def _r_neg(rec, g, need):
    return (-g,)


@_raw("scale")
def _r_scale(rec, g, need):
    return (g * rec.ctx,)


@_raw("matmul")
def _r_matmul(rec, g, need):
    a, b = rec.inputs
    ga = None
    if need[0]:
        ga = _raw_unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
    gb = None
    if need[1]:
        if a.ndim > 2 and b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _raw_unbroadcast(_mm(np.swapaxes(a.data, -1, -2), g), b.shape)
    return (ga, gb)


@_raw("exp")
def _r_exp(rec, g, need):
    return (g * rec.out.data,)


@_raw("log")
def _r_log(rec, g, need):
    return (g / rec.inputs[0].data,)


@_raw("sqrt")
def _r_sqrt(rec, g, need):
    return ((g / rec.out.data) * 0.5,)


@_raw("pow_const")
def _r_pow(rec, g, need):
    a = rec.inputs[0].data
    p = rec.ctx
    return ((g * a ** (p - 1.0)) * p,)


@_raw("sum")
def _r_sum(rec, g, need):
    (a,) = rec.inputs
    axes, keepdims = rec.ctx
    if axes is not None and not keepdims:
        kept = list(rec.out.shape)
        for ax in sorted(axes):
            kept.insert(ax, 1)
        g = g.reshape(kept)
    return (np.broadcast_to(g, a.shape),)


@_raw("broadcast_to")
def _r_bcast(rec, g, need):
    return (_raw_unbroadcast(g, rec.inputs[0].shape),)


@_raw("reshape")
def _r_reshape(rec, g, need):
    return (g.reshape(rec.inputs[0].shape),)


@_raw("permute")
def _r_permute(rec, g, need):
    return (np.transpose(g, np.argsort(rec.ctx)),)


@_raw("concat")
def _r_concat(rec, g, need):
    axis = rec.ctx
    grads = []
    offset = 0
    index = [slice(None)] * g.ndim
    for t, want in zip(rec.inputs, need):
        extent = t.shape[axis]
        if want:
            index[axis] = slice(offset, offset + extent)
            grads.append(g[tuple(index)])
        else:
            grads.append(None)
        offset += extent
    return tuple(grads)


@_raw("narrow")
def _r_narrow(rec, g, need):
    (a,) = rec.inputs
    axis, start, length = rec.ctx
    out = np.zeros(a.shape, dtype=g.dtype)
    index = [slice(None)] * out.ndim
    index[axis] = slice(start, start + length)
    out[tuple(index)] = g
    return (out,)


@_raw("pad_axis")
def _r_pad(rec, g, need):
    (a,) = rec.inputs
    axis, before, _ = rec.ctx
    index = [slice(None)] * g.ndim
    index[axis] = slice(before, before + a.shape[axis])
    return (g[tuple(index)],)


@_raw("gather_rows")
def _r_gather(rec, g, need):
    (a,) = rec.inputs
    out = np.zeros((a.shape[0],) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, rec.ctx, g)
    return (out,)


@_raw("scatter_add_rows")
def _r_scatter(rec, g, need):
    return (g[rec.ctx[0]],)


@_raw("maximum_scalar")
def _r_maximum(rec, g, need):
    return (g * rec.ctx[1],)


@_raw("affine")
def _r_affine(rec, g, need):
    x, w, b = rec.inputs
    gx = _mm(g, w.data.T) if need[0] else None
    gw = None
    if need[1]:
        if x.ndim > 2:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gw = x.data.T @ g
    gb = _raw_unbroadcast(g, b.shape) if need[2] else None
    return (gx, gw, gb)


@_raw("sigmoid")
def _r_sigmoid(rec, g, need):
    s = rec.out.data
    return (g * (s * (1.0 - s)),)


@_raw("norm_affine")
def _r_norm_affine(rec, g, need):
    x, gain, bias = rec.inputs
    _, xhat, s = rec.ctx
    gx = None
    if need[0]:
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = ((gg - m1) - xhat * m2) / s
    ggain = _raw_unbroadcast(g * xhat, gain.shape) if need[1] else None
    gbias = _raw_unbroadcast(g, bias.shape) if need[2] else None
    return (gx, ggain, gbias)


@_raw("softmax")
def _r_softmax(rec, g, need):
    y = rec.out.data
    gy = g * y
    return (gy - y * np.sum(gy, axis=rec.ctx, keepdims=True),)


def _raw_fallback(rec, g, need):
    # any kind without a dedicated raw rule goes through the recorded VJP
    # with recording suppressed; slower, never wrong
    with no_record():
        outs = _VJP[rec.kind](rec, constant(g), need)
    return tuple(None if o is None else o.data for o in outs)


# ---------------------------------------------------------------------------
# Composites (fully differentiable by construction).
# ---------------------------------------------------------------------------


def mean_reduce(a, axes=None, keepdims=False):
    if axes is None:
        n = a.data.size
    else:
        axs = axes if isinstance(axes, (tuple, list)) else (axes,)
        n = 1
        for ax in axs:
            n *= a.shape[ax % a.ndim]
    return scale(sum_reduce(a, axes, keepdims), 1.0 / n)


def relu(a):
    return maximum_scalar(a, 0.0)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean and (eps-adjusted) unit variance."""
    mu = mean_reduce(a, (-1,), keepdims=True)
    centered = sub(a, mu)
    var = mean_reduce(mul(centered, centered), (-1,), keepdims=True)
    return div(centered, sqrt(add(var, _lift(eps, a.dtype))))


def dropout(a, p, rng):
    """Randomly zero elements with probability p, rescaling survivors by 1/(1-p).

    The Bernoulli mask is saved as a constant, so backward is exact.  Callers
    gate on training mode; rng is the run's seeded generator.
    """
    if p <= 0.0:
        return a
    keep = 1.0 - p
    mask = (rng.random(a.shape) < keep).astype(a.dtype) / keep
    return mul(a, constant(mask))


# ---------------------------------------------------------------------------
# Backward.
# ---------------------------------------------------------------------------


def backward(scalar, wrt, warn_non_ancestor=True, record=True):
    """Reverse-mode gradients of a one-element tensor.

    Returns one gradient tensor per entry of ``wrt``, each of matching shape.
    With ``record=True`` (the default) the gradients are graph-recorded, so
    expressions built from them can be differentiated again.  Pass
    ``record=False`` for a final differentiation pass whose result only feeds
    an optimizer step: the VJP sweep then runs unrecorded, which keeps the
    graph from doubling in size every time.  A wrt tensor that the scalar
    does not depend on yields zeros (with a RuntimeWarning unless
    suppressed): the ligand-only ablation legitimately detaches inputs.
    """
    if scalar.data.size != 1:
        raise GraphError(f"backward: scalar must have one element, got shape {scalar.shape}")
    wrt = list(wrt)
    if scalar.op is None:
        grads = {scalar.node_id: constant(np.ones_like(scalar.data))}
        return _collect(grads, wrt, warn_non_ancestor)

    graph = scalar.graph
    records = graph.records

    # One forward sweep marks every tensor whose value depends on some wrt
    # tensor and precomputes per-record need flags; records with no needed
    # input are dropped here, so the reverse sweep only touches the relevant
    # slice of the graph (e.g. the coordinate path when differentiating with
    # respect to ligand positions alone).  No ancestor set is needed: a
    # marked node outside the scalar's history never receives an output
    # gradient.  A wrt tensor without requires_grad cannot receive gradient
    # anyway, so it does not seed the marking.
    marked = set()
    for w in wrt:
        if w.requires_grad:
            marked.add(w.node_id)
    todo = []
    if marked:
        madd = marked.add
        tapp = todo.append
        for rec in records:
            inputs = rec.inputs
            need = None
            for i, inp in enumerate(inputs):
                if inp.node_id in marked:
                    if need is None:
                        need = [False] * len(inputs)
                    need[i] = True
            if need is not None:
                madd(rec.out.node_id)
                tapp((rec, tuple(need)))

    if not record:
        raw = {scalar.node_id: np.ones_like(scalar.data)}
        # ids whose stored array is a private accumulation buffer; first
        # contributions may alias VJP outputs (often views of g), so they
        # are only added into in place after a fresh sum replaced them
        owned = set()
        get = raw.get
        raw_rules = _VJP_RAW
        for rec, need in reversed(todo):
            g = get(rec.out.node_id)
            if g is None:
                continue
            fn = raw_rules.get(rec.kind)
            in_grads = fn(rec, g, need) if fn is not None else _raw_fallback(rec, g, need)
            for inp, ig, want in zip(rec.inputs, in_grads, need):
                if not want or ig is None:
                    continue
                nid = inp.node_id
                prev = get(nid)
                if prev is None:
                    raw[nid] = ig
                elif nid in owned:
                    prev += ig
                else:
                    raw[nid] = prev + ig
                    owned.add(nid)
        grads = {}
        for w in wrt:
            arr = raw.get(w.node_id)
            if arr is not None:
                grads[w.node_id] = constant(arr)
        return _collect(grads, wrt, warn_non_ancestor)

    grads = {scalar.node_id: constant(np.ones_like(scalar.data))}
    get = grads.get
    rules = _VJP
    with graph:
        for rec, need in reversed(todo):
            g = get(rec.out.node_id)
            if g is None:
                continue
            in_grads = rules[rec.kind](rec, g, need)
            for inp, ig, want in zip(rec.inputs, in_grads, need):
                if not want or ig is None:
                    continue
                nid = inp.node_id
                prev = get(nid)
                grads[nid] = ig if prev is None else add(prev, ig)
    return _collect(grads, wrt, warn_non_ancestor)


def _collect(grads, wrt, warn):
    out = []
    missing = 0
    for w in wrt:
        g = grads.get(w.node_id)
        if g is None:
            missing += 1
            g = zeros_like(w)
        out.append(g)
    if missing and warn:
        warnings.warn(
            f"backward: {missing} of {len(wrt)} wrt tensors are not ancestors "
            "of the scalar; returning zeros for them",
            RuntimeWarning,
            stacklevel=3,
        )
    return out


def grad_arrays(scalar, wrt, warn_non_ancestor=False):
    """Convenience: backward() then extract plain numpy arrays."""
    return [g.data for g in backward(scalar, wrt, warn_non_ancestor)]


def finite_difference_check(f, point, step=1e-5):
    """Max relative error between backward() and central finite differences.

    ``f`` maps a Tensor to a one-element Tensor.  The relative error uses
    denominator max(|analytic|, |numeric|, 1e-8) elementwise.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    with Graph():
        x = tensor(point.data.copy(), requires_grad=True)
        y = f(x)
        analytic = backward(y, [x], warn_non_ancestor=False)[0].data.copy()

    flat = point.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sgn, slot in ((1.0, 0), (-1.0, 1)):
            bumped = flat.copy()
            bumped[i] += sgn * step
            # fresh throwaway graph, not no_record(): f may call backward itself
            with Graph():
                val = f(tensor(bumped.reshape(point.data.shape), requires_grad=True)).item()
            if not np.isfinite(val):
                raise NonFiniteError(
                    f"finite_difference_check: f returned {val} at element {i}, "
                    f"offset {sgn * step:+g}"
                )
            numeric[i] += val if slot == 0 else -val
        numeric[i] /= 2.0 * step
    numeric = numeric.reshape(point.data.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
