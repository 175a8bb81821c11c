"""Dense float tensors with reverse-mode automatic differentiation.

Buffers are numpy arrays; the tape is the graph of TapeNode records hanging
off each result tensor.  Backward rules are themselves expressed with the
public ops, so gradients can be differentiated again (needed when a loss is
taken through a chain of gradient-based parameter updates).  Running
``backward`` without ``create_graph`` executes the same rules inside a
no-grad block, which keeps the fast path free of bookkeeping.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Dimension mismatch, tagged with the operation that raised it."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class GraphError(RuntimeError):
    """Misuse of the tape (non-scalar backward, freed graph, ...)."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

_DTYPES = {"float32": np.float32, "float64": np.float64}


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors ("float32"/"float64")."""
    global _DEFAULT_DTYPE
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}")
        dtype = _DTYPES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default dtype (used by verification tests)."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class TapeNode:
    """One recorded operation: parents plus the rule mapping the output
    gradient to per-parent gradients."""

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._freed = False

    # ---- basic introspection -------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def clone(self, requires_grad=None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # ---- operators ------------------------------------------------------
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
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # ---- method sugar ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, create_graph: bool = False):
        backward(self, create_graph=create_graph)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _make(data: np.ndarray, inputs, op: str, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._freed = False
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = TapeNode(op, tuple(inputs), vjp)
    else:
        out.requires_grad = False
        out._node = None
    return out


def _zeros_const(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce g back to `shape` (adjoint of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    if not isinstance(b, Tensor):
        b = _coerce(b, a)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(a.data - b.data, (a, b), "sub", vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(a.data * b.data, (a, b), "mul", vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _make(a.data / b.data, (a, b), "div", None)

    def vjp(g):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, out), b)), b.shape)
        return ga, gb

    if out._node is not None:
        out._node.vjp = vjp
    return out


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (neg(g),)

    return _make(-a.data, (a,), "neg", vjp)


def power(a: Tensor, p) -> Tensor:
    p = float(p)

    def vjp(g):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(a.data ** p, (a,), "pow", vjp)


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,), "exp", None)

    def vjp(g):
        return (mul(g, out),)

    if out._node is not None:
        out._node.vjp = vjp
    return out


def log(a: Tensor) -> Tensor:
    def vjp(g):
        return (div(g, a),)

    return _make(np.log(a.data), (a,), "log", vjp)


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(a.data.dtype), dtype=a.data.dtype)

    def vjp(g):
        return (mul(g, mask),)

    return _make(np.maximum(a.data, 0), (a,), "relu", vjp)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data, dtype=a.data.dtype)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {shape}")

    def vjp(g):
        return (reshape(g, a.shape),)

    return _make(data, (a,), "reshape", vjp)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("permute", f"axes {axes} invalid for ndim {a.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (permute(g, inv),)

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), "permute", vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", f"expected 2-d input, got shape {a.shape}")
    return permute(a, (1, 0))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError("broadcast_to", f"cannot broadcast {a.shape} to {shape}")

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _make(data, (a,), "broadcast_to", vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (int(axis),)

    def vjp(g):
        if axis is None:
            gk = reshape(g, (1,) * a.ndim) if a.ndim else g
        elif not keepdims:
            kept = list(g.shape)
            for ax in sorted(ax % a.ndim for ax in axis):
                kept.insert(ax, 1)
            gk = reshape(g, tuple(kept))
        else:
            gk = g
        return (broadcast_to(gk, a.shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.shape[i % a.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    dim = a.shape[axis]
    if not (0 <= start <= stop <= dim):
        raise ShapeError("slice_axis", f"range [{start}:{stop}] out of bounds for axis {axis} of size {dim}")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))

    def vjp(g):
        pieces = []
        if start > 0:
            lead = list(a.shape)
            lead[axis] = start
            pieces.append(_zeros_const(tuple(lead), a.data.dtype))
        pieces.append(g)
        if stop < dim:
            tail = list(a.shape)
            tail[axis] = dim - stop
            pieces.append(_zeros_const(tuple(tail), a.data.dtype))
        if len(pieces) == 1:
            return (g,)
        return (concat(pieces, axis),)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), "slice_axis", vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", "need at least one tensor")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1])) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", vjp)


def rotate90(a: Tensor, k: int) -> Tensor:
    """Rotate the trailing two (spatial) axes by k quarter turns.

    Pure index permutation: lossless and exactly invertible.
    """
    if a.ndim < 2:
        raise ShapeError("rotate90", f"need at least 2 dims, got shape {a.shape}")
    if a.shape[-1] != a.shape[-2]:
        raise ShapeError("rotate90", f"spatial axes must be square, got {a.shape[-2]}x{a.shape[-1]}")
    k = int(k) % 4
    if k == 0:
        return a

    def vjp(g):
        return (rotate90(g, 4 - k),)

    return _make(np.ascontiguousarray(np.rot90(a.data, k, axes=(-2, -1))), (a,), "rotate90", vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", f"expected 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.data @ b.data, (a, b), "matmul", vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N,in) @ w (in,out) + b (out,)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError("linear", f"expected 2-d x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError("linear", f"x columns {x.shape[1]} != w rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError("linear", f"bias shape {b.shape} != ({w.shape[1]},)")
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# gather / scatter (shared by pooling)
# ---------------------------------------------------------------------------


def _gather_flat(a: Tensor, idx: np.ndarray, out_shape) -> Tensor:
    def vjp(g):
        return (_scatter_flat(g, idx, a.shape),)

    data = a.data.reshape(-1)[idx].reshape(out_shape)
    return _make(np.ascontiguousarray(data), (a,), "gather", vjp)


def _scatter_flat(g: Tensor, idx: np.ndarray, target_shape) -> Tensor:
    def vjp(gg):
        return (_gather_flat(gg, idx, g.shape),)

    flat = np.zeros(int(np.prod(target_shape)), dtype=g.data.dtype)
    np.add.at(flat, idx.reshape(-1), g.data.reshape(-1))
    return _make(flat.reshape(target_shape), (g,), "scatter", vjp)


# ---------------------------------------------------------------------------
# convolution plumbing
# ---------------------------------------------------------------------------


def _conv_out_size(size, k, stride, pad, op):
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(op, f"window {k} stride {stride} pad {pad} does not tile size {size}")
    return span // stride + 1


def unfold2d(x: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """im2col: (N,C,H,W) -> (N, C*kh*kw, H_out*W_out)."""
    if x.ndim != 4:
        raise ShapeError("unfold2d", f"expected (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, pad, "unfold2d")
    wo = _conv_out_size(w, kw, stride, pad, "unfold2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]

    def vjp(g):
        return (fold2d(g, x.shape, kh, kw, stride, pad),)

    return _make(cols.reshape(n, c * kh * kw, ho * wo), (x,), "unfold2d", vjp)


def fold2d(cols: Tensor, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """col2im scatter-add, the adjoint of unfold2d."""
    n, c, h, w = x_shape
    ho = _conv_out_size(h, kh, stride, pad, "fold2d")
    wo = _conv_out_size(w, kw, stride, pad, "fold2d")
    if cols.shape != (n, c * kh * kw, ho * wo):
        raise ShapeError("fold2d", f"columns {cols.shape} do not match image {tuple(x_shape)}")
    blocks = cols.data.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += blocks[:, :, i, j]
    out = xp[:, :, pad : pad + h, pad : pad + w] if pad else xp

    def vjp(g):
        return (unfold2d(g, kh, kw, stride, pad),)

    return _make(np.ascontiguousarray(out), (cols,), "fold2d", vjp)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding="same") -> Tensor:
    """2-d convolution, NCHW layout, weight (F, C, kh, kw)."""
    if x.ndim != 4:
        raise ShapeError("conv2d", f"expected input (N,C,H,W), got {x.shape}")
    if w.ndim != 4:
        raise ShapeError("conv2d", f"expected weight (F,C,kh,kw), got {w.shape}")
    n, c, h, wdt = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError("conv2d", f"input channels {c} != weight channels {cw}")
    if b.shape != (f,):
        raise ShapeError("conv2d", f"bias shape {b.shape} != ({f},)")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d", "'same' padding requires odd kernel sizes")
        pad = (kh - 1) // 2
    else:
        pad = int(padding)
    ho = _conv_out_size(h, kh, stride, pad, "conv2d")
    wo = _conv_out_size(wdt, kw, stride, pad, "conv2d")

    cols = unfold2d(x, kh, kw, stride, pad)                  # (N, CKK, L)
    cols2 = reshape(permute(cols, (1, 0, 2)), (c * kh * kw, n * ho * wo))
    wm = reshape(w, (f, c * kh * kw))
    out2 = matmul(wm, cols2)                                  # (F, N*L)
    out = permute(reshape(out2, (f, n, ho, wo)), (1, 0, 2, 3))
    return add(out, reshape(b, (1, f, 1, 1)))


def max_pool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over non-overlapping (or strided) windows; ties resolve to
    the lowest window offset, so gradients route to a single element."""
    if x.ndim != 4:
        raise ShapeError("max_pool2d", f"expected (N,C,H,W), got {x.shape}")
    stride = stride or size
    n, c, h, w = x.shape
    ho = _conv_out_size(h, size, stride, 0, "max_pool2d")
    wo = _conv_out_size(w, size, stride, 0, "max_pool2d")

    vals = np.empty((size * size, n, c, ho, wo), dtype=x.data.dtype)
    for i in range(size):
        for j in range(size):
            vals[i * size + j] = x.data[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    arg = vals.argmax(axis=0)
    out = np.max(vals, axis=0)

    ii, jj = arg // size, arg % size
    hh = np.arange(ho)[None, None, :, None] * stride + ii
    ww = np.arange(wo)[None, None, None, :] * stride + jj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    idx = ((nn * c + cc) * h + hh) * w + ww

    def vjp(g):
        return (_scatter_flat(g, idx, x.shape),)

    return _make(out, (x,), "max_pool2d", vjp)


# ---------------------------------------------------------------------------
# normalization and losses
# ---------------------------------------------------------------------------


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, num_groups: int, eps: float = 1e-5) -> Tensor:
    """GroupNorm over (N,C,H,W): per-sample, per-group standardization
    followed by a per-channel affine map.  Uses the biased variance."""
    if x.ndim != 4:
        raise ShapeError("group_norm", f"expected (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if c % num_groups != 0:
        raise ShapeError("group_norm", f"channels {c} not divisible by groups {num_groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm", f"affine shapes {gamma.shape}, {beta.shape} != ({c},)")
    xg = reshape(x, (n, num_groups, (c // num_groups) * h * w))
    mu = tmean(xg, axis=2, keepdims=True)
    centered = sub(xg, mu)
    var = tmean(mul(centered, centered), axis=2, keepdims=True)
    inv_std = power(add(var, eps), -0.5)
    xn = reshape(mul(centered, inv_std), (n, c, h, w))
    return add(mul(xn, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    # constant shift for stability; exact for every derivative order because
    # the function is shift-invariant
    m = Tensor(np.max(x.data, axis=axis, keepdims=True), dtype=x.data.dtype)
    z = sub(x, m)
    lse = log(tsum(exp(z), axis=axis, keepdims=True))
    return sub(z, lse)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under the logits."""
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
        labels = np.asarray([labels])
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", f"expected (N,C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("cross_entropy", f"labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = mul(log_softmax(logits, axis=1), Tensor(onehot, dtype=logits.data.dtype))
    return mul(tsum(picked), -1.0 / float(n))


def entropy_of_logits(logits: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the softmax distributions."""
    lp = log_softmax(logits, axis=1)
    p = exp(lp)
    per_row = neg(tsum(mul(p, lp), axis=1))
    return tmean(per_row)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.inputs:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def _sweep(loss: Tensor, create_graph: bool):
    """Reverse-topological gradient propagation.  Returns (grads-by-id, topo)."""
    topo = _topo(loss)
    grads = {id(loss): Tensor(np.ones(loss.shape, dtype=loss.data.dtype), dtype=loss.data.dtype)}
    results = {}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            results[id(t)] = g
            node = t._node
            if node is None:
                continue
            parts = node.vjp(g)
            for parent, pg in zip(node.inputs, parts):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = add(grads[key], pg)
                else:
                    grads[key] = pg
    return results, topo


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate gradients of a scalar loss into the .grad of every
    reachable leaf that requires gradients.  Without ``create_graph`` the
    graph is freed afterwards; a second backward raises."""
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss._freed:
            raise GraphError("backward through an already-freed graph; re-run the forward pass")
        if not loss.requires_grad:
            raise GraphError("loss is not connected to any recorded operation")
        # bare leaf: d loss / d loss = 1
        seed = Tensor(np.ones(loss.shape, dtype=loss.data.dtype), dtype=loss.data.dtype)
        loss.grad = seed if loss.grad is None else add(loss.grad, seed)
        return
    results, topo = _sweep(loss, create_graph)
    with no_grad():
        for t in topo:
            if t.requires_grad and t._node is None and id(t) in results:
                g = results[id(t)]
                t.grad = g if t.grad is None else add(t.grad, g)
    if not create_graph:
        for t in topo:
            if t._node is not None:
                t._node = None
                t._freed = True


def grad(loss: Tensor, wrt, create_graph: bool = False):
    """Gradients of a scalar loss with respect to a list of tensors (leaves
    or interior nodes).  Does not touch .grad and never frees the graph.
    Returns None for tensors the loss does not depend on."""
    if loss.size != 1:
        raise GraphError(f"grad requires a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("grad through an already-freed graph; re-run the forward pass")
    if loss._node is None:
        return [None for _ in wrt]
    results, _ = _sweep(loss, create_graph)
    return [results.get(id(w)) for w in wrt]
