"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Values are numpy arrays in channels-last, row-major layout. A `Node` wraps
one array together with references to its parents and a closure computing
the parents' gradients, forming an acyclic tape. `backward` walks the tape
in reverse topological order with a fixed accumulation order, so gradients
are bitwise deterministic for identical inputs.

Convolutions accept arbitrary leading batch axes: conv2d expects
[..., H, W, Cin] and conv3d expects [..., T, H, W, Cin]. Broadcasting of
binary elementwise ops follows numpy alignment of trailing axes, which
covers the leading-1 broadcasts used throughout the models.
"""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError, DomainError, ShapeError

_DEFAULT_DTYPE = np.float32

# When enabled, every accumulated gradient is checked for NaN/Inf during
# backward. Off by default: the loss value and parameter gradients are
# always checked, which catches divergence at equal reliability.
strict_finite_checks = False


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"precision must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "backward_fn", "grad")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"

    # Operator sugar; scalars are promoted to constants of matching dtype.
    def __add__(self, other):
        return add(self, _as_node(other, self.dtype))

    def __radd__(self, other):
        return add(_as_node(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_node(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_node(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_node(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_node(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_node(other, self.dtype))

    def __neg__(self):
        return negate(self)


class Parameter(Node):
    """Leaf node with a unique name; the unit of optimization and checkpointing."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name, trainable=True):
        super().__init__(np.asarray(value))
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def constant(value, dtype=None):
    arr = np.asarray(value, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
    return Node(arr)


def _as_node(x, dtype):
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcastable(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------

def add(a, b):
    _check_broadcastable(a, b)
    out = a.value + b.value

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(out, (a, b), backward_fn)


def sub(a, b):
    _check_broadcastable(a, b)
    out = a.value - b.value

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node(out, (a, b), backward_fn)


def mul(a, b):
    _check_broadcastable(a, b)
    out = a.value * b.value

    def backward_fn(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(out, (a, b), backward_fn)


def div(a, b):
    _check_broadcastable(a, b)
    if np.any(b.value == 0):
        raise DomainError("division by zero")
    out = a.value / b.value

    def backward_fn(g):
        ga = _unbroadcast(g / b.value, a.shape)
        gb = _unbroadcast(-g * a.value / (b.value * b.value), b.shape)
        return ga, gb

    return Node(out, (a, b), backward_fn)


def negate(a):
    return Node(-a.value, (a,), lambda g: (-g,))


def scale_by_constant(a, c):
    c = a.value.dtype.type(c)
    return Node(a.value * c, (a,), lambda g: (g * c,))


def exp(a):
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.value <= 0):
        raise DomainError("log of non-positive value")
    out = np.log(a.value)
    return Node(out, (a,), lambda g: (g / a.value,))


def tanh(a):
    out = np.tanh(a.value)
    return Node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    # Numerically stable: exp of negated magnitude only.
    v = a.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = out.astype(v.dtype, copy=False)
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    out = np.maximum(a.value, 0)
    mask = a.value > 0
    return Node(out, (a,), lambda g: (g * mask,))


def clip(a, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    out = np.clip(a.value, lo, hi)
    mask = (a.value >= lo) & (a.value <= hi)
    return Node(out, (a,), lambda g: (g * mask,))


def square(a):
    return Node(a.value * a.value, (a,), lambda g: (g * 2.0 * a.value,))


_UNARY = {
    "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid,
    "relu": relu, "negate": negate,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind, a, b=None):
    """Dispatch an elementwise op by name; `b` is a second operand or, for
    scale_by_constant, a plain float."""
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} requires two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "scale_by_constant":
        return scale_by_constant(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# Shape operations
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(nodes, axis=-1):
    nodes = list(nodes)
    sizes = [n.value.shape[axis] for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(nodes))
        )

    return Node(out, tuple(nodes), backward_fn)


def concat_channels(nodes):
    return concat(nodes, axis=-1)


def slice_axis(a, axis, start, stop):
    dim = a.value.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of size {dim}")
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward_fn(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        return (full,)

    return Node(a.value[idx], (a,), backward_fn)


def split_channels(a):
    c = a.value.shape[-1]
    if c % 2 != 0:
        raise ShapeError(f"cannot split odd channel count {c}")
    return slice_axis(a, -1, 0, c // 2), slice_axis(a, -1, c // 2, c)


def slice_time(a, start, stop, axis=-4):
    return slice_axis(a, axis, start, stop)


def stack(nodes, axis):
    nodes = list(nodes)
    out = np.stack([n.value for n in nodes], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis

    def backward_fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(nodes)))

    return Node(out, tuple(nodes), backward_fn)


def sum_(a, axes=None):
    if axes is None:
        out = a.value.sum()

        def backward_fn(g):
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
    else:
        axes = tuple(ax % a.value.ndim for ax in axes)
        out = a.value.sum(axis=axes)

        def backward_fn(g):
            ge = np.expand_dims(g, axes)
            return (np.broadcast_to(ge, a.shape).astype(a.dtype, copy=False),)

    return Node(out, (a,), backward_fn)


def mean(a, axes=None):
    n = a.value.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return scale_by_constant(sum_(a, axes), 1.0 / n)


def shape_ops(kind, *args, **kwargs):
    """Dispatch a shape op by name (reshape, concat_channels, split_channels,
    sum, mean, slice_time)."""
    table = {
        "reshape": reshape,
        "concat_channels": concat_channels,
        "split_channels": split_channels,
        "sum": sum_,
        "mean": mean,
        "slice_time": slice_time,
    }
    if kind not in table:
        raise ValueError(f"unknown shape op {kind!r}")
    return table[kind](*args, **kwargs)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul_last(x, m):
    """y[..., j] = sum_i x[..., i] * m[i, j]."""
    if x.value.shape[-1] != m.value.shape[0]:
        raise ShapeError(f"matmul: {x.shape} @ {m.value.shape}")
    out = x.value @ m.value

    def backward_fn(g):
        gx = g @ m.value.T
        lead = list(range(g.ndim - 1))
        gm = np.tensordot(x.value, g, axes=(lead, lead))
        return gx, gm

    return Node(out, (x, m), backward_fn)


def logabsdet(m):
    """log|det M| of a square matrix, differentiable w.r.t. M."""
    from .errors import SingularMatrixError

    sign, ld = np.linalg.slogdet(m.value)
    if sign == 0 or ld <= np.log(1e-12):
        raise SingularMatrixError(f"matrix is numerically singular (log|det|={ld:.3g})")
    inv_t = np.linalg.inv(m.value).T
    out = np.asarray(ld, dtype=m.value.dtype)
    return Node(out, (m,), lambda g: (g * inv_t,))


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def conv2d(x, kernel, bias=None, padding="same"):
    """2-D convolution, stride 1, channels last, arbitrary leading batch axes."""
    kv = kernel.value
    if kv.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [kh,kw,Cin,Cout], got {kv.shape}")
    kh, kw, cin, cout = kv.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    xv = x.value
    if xv.ndim < 3 or xv.shape[-1] != cin:
        raise ShapeError(f"conv2d input {xv.shape} incompatible with kernel {kv.shape}")
    h, w = xv.shape[-3], xv.shape[-2]

    if padding == "same":
        ph, pw = kh // 2, kw // 2
        ho, wo = h, w
    elif padding == "valid":
        ph = pw = 0
        ho, wo = h - kh + 1, w - kw + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    if kh == kw == 1:
        # 1x1 fast path: a plain channel matmul.
        kmat = kv.reshape(cin, cout)
        out = xv @ kmat
        if bias is not None:
            out += bias.value

        def backward_fn(g):
            lead = list(range(g.ndim - 1))
            gx = g @ kmat.T
            gk = np.tensordot(xv, g, axes=(lead, lead)).reshape(kv.shape)
            grads = [gx, gk]
            if bias is not None:
                grads.append(g.sum(axis=tuple(lead)))
            return tuple(grads)

        parents = (x, kernel) if bias is None else (x, kernel, bias)
        return Node(out, parents, backward_fn)

    if ph or pw:
        spec = [(0, 0)] * (xv.ndim - 3) + [(ph, ph), (pw, pw), (0, 0)]
        xp = np.pad(xv, spec)
    else:
        xp = xv

    # im2col: one matmul over all kernel taps.
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.stack([xp[..., i:i + ho, j:j + wo, :] for i, j in taps], axis=-2)
    cols = cols.reshape(xv.shape[:-3] + (ho, wo, len(taps) * cin))
    kmat = kv.reshape(len(taps) * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out += bias.value

    def backward_fn(g):
        lead = list(range(g.ndim - 1))
        gk = np.tensordot(cols, g, axes=(lead, lead)).reshape(kv.shape)
        gcols = (g @ kmat.T).reshape(xv.shape[:-3] + (ho, wo, len(taps), cin))
        gxp = np.zeros_like(xp)
        for idx, (i, j) in enumerate(taps):
            gxp[..., i:i + ho, j:j + wo, :] += gcols[..., idx, :]
        gx = gxp[..., ph:ph + h, pw:pw + w, :] if (ph or pw) else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=tuple(lead)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Node(out, parents, backward_fn)


def conv3d(x, kernel, bias=None, dilation=1):
    """Causal 3-D convolution: temporal kernel 1 or 2, replicate-left temporal
    padding, spatially 'same' with the given dilation. Output T equals input T
    and output at t depends only on inputs at times <= t."""
    kv = kernel.value
    if kv.ndim != 5:
        raise ShapeError(f"conv3d kernel must be [kt,kh,kw,Cin,Cout], got {kv.shape}")
    kt, kh, kw, cin, cout = kv.shape
    if kt not in (1, 2):
        raise ShapeError(f"temporal kernel size must be 1 or 2, got {kt}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"spatial kernel dims must be odd, got {kh}x{kw}")
    xv = x.value
    if xv.ndim < 4 or xv.shape[-1] != cin:
        raise ShapeError(f"conv3d input {xv.shape} incompatible with kernel {kv.shape}")
    t, h, w = xv.shape[-4], xv.shape[-3], xv.shape[-2]
    d = int(dilation)
    if d < 1:
        raise ShapeError(f"dilation must be >= 1, got {d}")
    ph, pw = d * (kh // 2), d * (kw // 2)
    if d * (kh - 1) + 1 > h + 2 * ph or d * (kw - 1) + 1 > w + 2 * pw:
        raise ShapeError(f"dilated kernel exceeds padded spatial extent ({h}x{w}, d={d})")

    if kt == 1 and kh == kw == 1:
        # 1x1x1 fast path: a plain channel matmul.
        kmat = kv.reshape(cin, cout)
        out = xv @ kmat
        if bias is not None:
            out += bias.value

        def backward_fn(g):
            lead = list(range(g.ndim - 1))
            gx = g @ kmat.T
            gk = np.tensordot(xv, g, axes=(lead, lead)).reshape(kv.shape)
            grads = [gx, gk]
            if bias is not None:
                grads.append(g.sum(axis=tuple(lead)))
            return tuple(grads)

        parents = (x, kernel) if bias is None else (x, kernel, bias)
        return Node(out, parents, backward_fn)

    spec = [(0, 0)] * (xv.ndim - 4) + [(kt - 1, 0), (ph, ph), (pw, pw), (0, 0)]
    # Temporal axis is replicate-padded with the earliest frame; spatial is zero.
    xp = np.pad(xv, spec)
    if kt > 1:
        xp[..., 0, :, :, :] = xp[..., 1, :, :, :]

    # im2col: one matmul over all kernel taps.
    taps = [(a, i, j) for a in range(kt) for i in range(kh) for j in range(kw)]
    cols = np.stack(
        [xp[..., a:a + t, i * d:i * d + h, j * d:j * d + w, :] for a, i, j in taps],
        axis=-2)
    cols = cols.reshape(xv.shape[:-4] + (t, h, w, len(taps) * cin))
    kmat = kv.reshape(len(taps) * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out += bias.value

    def backward_fn(g):
        lead = list(range(g.ndim - 1))
        gk = np.tensordot(cols, g, axes=(lead, lead)).reshape(kv.shape)
        gcols = (g @ kmat.T).reshape(xv.shape[:-4] + (t, h, w, len(taps), cin))
        gxp = np.zeros_like(xp)
        for idx, (a, i, j) in enumerate(taps):
            gxp[..., a:a + t, i * d:i * d + h, j * d:j * d + w, :] += gcols[..., idx, :]
        gx = gxp[..., kt - 1:, ph:ph + h, pw:pw + w, :].copy()
        if kt > 1:
            # Gradient through the replicated earliest frame folds into frame 0.
            gx[..., 0, :, :, :] += gxp[..., 0, ph:ph + h, pw:pw + w, :]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=tuple(lead)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Node(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate gradients of a scalar loss over its tape.

    Returns {parameter name -> gradient array} for every Parameter reached.
    """
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.value):
        raise DivergenceError("loss is NaN/Inf")

    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)

    for node in reversed(order):
        if node.grad is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None:
                continue
            if strict_finite_checks and not np.all(np.isfinite(g)):
                raise DivergenceError("NaN/Inf encountered during backward accumulation")
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g

    grads = {}
    for node in order:
        if isinstance(node, Parameter) and node.grad is not None:
            if not np.all(np.isfinite(node.grad)):
                raise DivergenceError(f"NaN/Inf gradient for parameter {node.name!r}")
            grads[node.name] = node.grad
    return grads


def grad_check(function, point, step=1e-5):
    """Compare backward gradients against central finite differences.

    `function` maps a Node to a scalar Node. Returns the worst relative
    error over all coordinates, with denominators floored at 1e-8.
    """
    point = np.asarray(point, dtype=np.float64)
    x = Parameter(point.copy(), "grad_check.x")
    loss = function(x)
    grads = backward(loss)
    analytic = grads.get("grad_check.x", np.zeros_like(point))

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(function(Node(point)).value)
        flat[i] = orig - step
        fm = float(function(Node(point)).value)
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
