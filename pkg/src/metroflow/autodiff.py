"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tensor` is a shape plus a flat row-major buffer. Operations applied
inside a ``with Tape():`` block append nodes to that tape; :func:`backward`
replays the tape in reverse and accumulates ``dLoss/dLeaf`` into the ``grad``
buffer of every leaf that requires gradients. Outside a tape nothing is
recorded, so inference-mode tensors are plain immutable values.

Design constraints honoured throughout:

* no implicit broadcasting — binary ops demand equal shapes, and explicit
  ``reshape`` / ``add_rowvec`` / ``mul_rowvec`` ops cover the cases where a
  smaller operand is applied per row;
* gradient accumulation is ``+=`` on leaves with an explicit
  :func:`zero_grads`, so calling :func:`backward` twice doubles leaf grads;
* intermediate gradients live in per-call scratch buffers and are discarded,
  which keeps repeated backward passes exact.
"""

from __future__ import annotations

import threading
from array import array

from . import backend as _b


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Backward invoked without a usable tape, or recording on a frozen one."""


_LOCAL = threading.local()


def _stack():
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def _prod(shape):
    n = 1
    for s in shape:
        n *= s
    return n


class Tensor:
    """Dense float64 tensor; ``data`` is flat row-major."""

    __slots__ = ("shape", "data", "requires_grad", "grad", "tape_id", "_tape")

    def __init__(self, shape, data, requires_grad=False):
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if not isinstance(data, array):
            data = array("d", data)
        if len(data) != _prod(shape):
            raise ShapeError(
                f"shape {shape} needs {_prod(shape)} values, got {len(data)}"
            )
        self.shape = shape
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_id = None
        self._tape = None

    @property
    def size(self):
        return len(self.data)

    @property
    def ndim(self):
        return len(self.shape)

    def item(self):
        if len(self.data) != 1:
            raise ShapeError(f"item() needs a single-element tensor, shape is {self.shape}")
        return self.data[0]

    def __getitem__(self, idx):
        if isinstance(idx, int):
            return self.data[idx]
        flat = 0
        for extent, i in zip(self.shape, idx):
            flat = flat * extent + i
        return self.data[flat]

    def tolist(self):
        def build(dims, off, stride):
            if not dims:
                return self.data[off]
            step = stride // dims[0]
            return [build(dims[1:], off + i * step, step) for i in range(dims[0])]

        return build(list(self.shape), 0, self.size)

    def copy(self):
        return Tensor(self.shape, array("d", self.data), self.requires_grad)

    def detach(self):
        return Tensor(self.shape, self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    __slots__ = ("nodes", "frozen")

    def __init__(self):
        self.nodes = []
        self.frozen = False

    def freeze(self):
        self.frozen = True

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def tensor(values, shape=None, requires_grad=False):
    """Build a tensor from a flat buffer or nested lists (shape inferred)."""
    if shape is not None:
        return Tensor(shape, values, requires_grad)
    if isinstance(values, (int, float)):
        return Tensor((1,), [float(values)], requires_grad)
    dims = []
    probe = values
    while isinstance(probe, (list, tuple)):
        dims.append(len(probe))
        probe = probe[0]
    flat = array("d", bytes(8 * _prod(dims)))
    pos = 0

    def fill(node, depth):
        nonlocal pos
        if depth == len(dims):
            flat[pos] = node
            pos += 1
            return
        if len(node) != dims[depth]:
            raise ShapeError("ragged nested input")
        for child in node:
            fill(child, depth + 1)

    fill(values, 0)
    return Tensor(tuple(dims), flat, requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(shape, _b.alloc(_prod(shape)), requires_grad)


def full(shape, value, requires_grad=False):
    t = zeros(shape, requires_grad)
    _b.kernels.fill(t.data, float(value), t.size)
    return t


def ones(shape, requires_grad=False):
    return full(shape, 1.0, requires_grad)


def uniform(shape, low, high, rng, requires_grad=False):
    """Seeded uniform tensor (``rng`` is a ``random.Random``)."""
    n = _prod(shape)
    data = array("d", bytes(8 * n))
    for i in range(n):
        data[i] = rng.uniform(low, high)
    return Tensor(shape, data, requires_grad)


def zero_grads(params):
    for p in params:
        p.grad = None


def _emit(shape, data, inputs, bwd):
    """Wrap an op result, recording it when any input participates in grads."""
    # trusted construction: op code guarantees shape/data consistency
    out = Tensor.__new__(Tensor)
    out.shape = shape
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.tape_id = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.frozen:
            raise TapeError("cannot record on a frozen tape")
        out.requires_grad = True
        out.tape_id = len(tape.nodes)
        out._tape = tape
        tape.nodes.append((out, inputs, bwd))
    return out


def backward(loss):
    """Accumulate dLoss/dLeaf into every requiring leaf reachable from loss.

    Repeated calls without :func:`zero_grads` keep adding, yielding exact
    multiples of the single-pass gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, shape is {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not attached to a tape")
    if tape.frozen:
        raise TapeError("tape is frozen")
    pending = {}
    seed = array("d", [1.0])
    pending[loss.tape_id] = seed
    nodes = tape.nodes
    for idx in range(loss.tape_id, -1, -1):
        gout = pending.pop(idx, None)
        if gout is None:
            continue
        _, inputs, bwd = nodes[idx]
        gins = []
        for t in inputs:
            if not t.requires_grad:
                gins.append(None)
            elif t._tape is tape and t.tape_id is not None:
                buf = pending.get(t.tape_id)
                if buf is None:
                    buf = _b.alloc(t.size)
                    pending[t.tape_id] = buf
                gins.append(buf)
            else:
                if t.grad is None:
                    t.grad = _b.alloc(t.size)
                gins.append(t.grad)
        bwd(gout, gins)


# ---------------------------------------------------------------------------
# operations


def matmul(a, b, transpose_b=False):
    """2-D matrix product; backward dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    m, k = a.shape
    kb = b.shape[0] if not transpose_b else b.shape[1]
    n = b.shape[1] if not transpose_b else b.shape[0]
    if k != kb:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = _b.alloc_raw(m * n)
    _b.kernels.matmul(a.data, b.data, out, m, k, n, False, transpose_b, False)
    ad, bd = a.data, b.data

    def bwd(g, gins):
        ga, gb = gins
        if ga is not None:
            _b.kernels.matmul(g, bd, ga, m, n, k, False, not transpose_b, True)
        if gb is not None:
            if not transpose_b:
                _b.kernels.matmul(ad, g, gb, k, m, n, True, False, True)
            else:
                _b.kernels.matmul(g, ad, gb, n, m, k, True, False, True)

    return _emit((m, n), out, (a, b), bwd)


def linear(x, w, bias=None, relu_after=False):
    """Fused dense layer: x @ w (+ bias) (then relu), one output buffer.

    x is [R x C], w is [C x F], bias is [F]. The relu mask for backward is
    recovered from the saved output (post-relu > 0 iff pre-relu > 0).
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shapes incompatible: {x.shape} x {w.shape}")
    r, c = x.shape
    f = w.shape[1]
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"linear bias must be ({f},), got {bias.shape}")
    K = _b.kernels
    out = _b.alloc_raw(r * f)
    K.matmul(x.data, w.data, out, r, c, f, False, False, False)
    if bias is not None:
        K.add_rowvec(out, bias.data, out, r, f)
    if relu_after:
        K.relu(out, out, r * f)
    xd, wd = x.data, w.data
    inputs = (x, w) if bias is None else (x, w, bias)

    def bwd(g, gins):
        K2 = _b.kernels
        if relu_after:
            gm = _b.alloc_raw(r * f)
            K2.relu_mask(out, g, gm, r * f)
        else:
            gm = g
        gx, gw = gins[0], gins[1]
        if gx is not None:
            K2.matmul(gm, wd, gx, r, f, c, False, True, True)
        if gw is not None:
            K2.matmul(xd, gm, gw, c, r, f, True, False, True)
        if bias is not None and gins[2] is not None:
            K2.colsum_acc(gm, gins[2], r, f)

    return _emit((r, f), out, inputs, bwd)


def bmm(a, b, transpose_b=False):
    """Batched matmul over a shared leading axis (used per attention head)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    nb, m, k = a.shape
    if not transpose_b:
        if b.shape[1] != k:
            raise ShapeError(f"bmm inner extents differ: {a.shape} x {b.shape}")
        n = b.shape[2]
    else:
        if b.shape[2] != k:
            raise ShapeError(f"bmm inner extents differ: {a.shape} x {b.shape}^T")
        n = b.shape[1]
    out = _b.alloc_raw(nb * m * n)
    _b.kernels.bmm(a.data, b.data, out, nb, m, k, n, False, transpose_b, False)
    ad, bd = a.data, b.data

    def bwd(g, gins):
        ga, gb = gins
        if ga is not None:
            # dA = g · op(B)ᵀ
            _b.kernels.bmm(g, bd, ga, nb, m, n, k, False, not transpose_b, True)
        if gb is not None:
            if not transpose_b:
                _b.kernels.bmm(ad, g, gb, nb, k, m, n, True, False, True)
            else:
                _b.kernels.bmm(g, ad, gb, nb, n, m, k, True, False, True)

    return _emit((nb, m, n), out, (a, b), bwd)


def softmax_rows(x):
    """Softmax over the last axis with max-subtraction for stability."""
    cols = x.shape[-1]
    rows = x.size // cols
    out = _b.alloc_raw(x.size)
    _b.kernels.softmax(x.data, out, rows, cols)

    def bwd(g, gins):
        (gx,) = gins
        if gx is not None:
            _b.kernels.softmax_bwd(out, g, gx, rows, cols)

    return _emit(x.shape, out, (x,), bwd)


def _unary(x, fwd_kernel, bwd_kernel, save_output):
    out = _b.alloc_raw(x.size)
    fwd_kernel(x.data, out, x.size)
    saved = out if save_output else x.data
    n = x.size

    def bwd(g, gins):
        (gx,) = gins
        if gx is not None:
            bwd_kernel(saved, g, gx, n)

    return _emit(x.shape, out, (x,), bwd)


def relu(x):
    return _unary(x, _b.kernels.relu, _b.kernels.relu_bwd, False)


def tanh(x):
    return _unary(x, _b.kernels.tanh, _b.kernels.tanh_bwd, True)


def sigmoid(x):
    return _unary(x, _b.kernels.sigmoid, _b.kernels.sigmoid_bwd, True)


def absolute(x):
    return _unary(x, _b.kernels.absv, _b.kernels.absv_bwd, False)


def _binary_check(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} vs {b.shape}")


def add(a, b):
    _binary_check(a, b, "add")
    out = _b.alloc_raw(a.size)
    _b.kernels.add(a.data, b.data, out, a.size)
    n = a.size

    def bwd(g, gins):
        ga, gb = gins
        if ga is not None:
            _b.kernels.axpy(1.0, g, ga, n)
        if gb is not None:
            _b.kernels.axpy(1.0, g, gb, n)

    return _emit(a.shape, out, (a, b), bwd)


def subtract(a, b):
    _binary_check(a, b, "subtract")
    out = _b.alloc_raw(a.size)
    _b.kernels.sub(a.data, b.data, out, a.size)
    n = a.size

    def bwd(g, gins):
        ga, gb = gins
        if ga is not None:
            _b.kernels.axpy(1.0, g, ga, n)
        if gb is not None:
            _b.kernels.axpy(-1.0, g, gb, n)

    return _emit(a.shape, out, (a, b), bwd)


def hadamard(a, b):
    _binary_check(a, b, "hadamard")
    out = _b.alloc_raw(a.size)
    _b.kernels.mul(a.data, b.data, out, a.size)
    ad, bd, n = a.data, b.data, a.size

    def bwd(g, gins):
        ga, gb = gins
        if ga is not None:
            _b.kernels.mul_acc(bd, g, ga, n)
        if gb is not None:
            _b.kernels.mul_acc(ad, g, gb, n)

    return _emit(a.shape, out, (a, b), bwd)


def scale(x, alpha):
    """Multiply by a python float (the only scalar-with-tensor case allowed)."""
    alpha = float(alpha)
    out = _b.alloc_raw(x.size)
    _b.kernels.scale(x.data, alpha, out, x.size)
    n = x.size

    def bwd(g, gins):
        (gx,) = gins
        if gx is not None:
            _b.kernels.axpy(alpha, g, gx, n)

    return _emit(x.shape, out, (x,), bwd)


def mul_scalar(x, s):
    """Multiply by a learnable single-element tensor."""
    if s.size != 1:
        raise ShapeError(f"mul_scalar needs a single-element scalar, got {s.shape}")
    alpha = s.data[0]
    out = _b.alloc_raw(x.size)
    _b.kernels.scale(x.data, alpha, out, x.size)
    xd, n = x.data, x.size

    def bwd(g, gins):
        gx, gs = gins
        if gx is not None:
            _b.kernels.axpy(alpha, g, gx, n)
        if gs is not None:
            gs[0] += _b.kernels.dot(xd, g, n)

    return _emit(x.shape, out, (x, s), bwd)


def blend(z, a, b):
    """Convex combination z ⊙ a + (1 - z) ⊙ b in one fused op."""
    if z.shape != a.shape or z.shape != b.shape:
        raise ShapeError(
            f"blend needs equal shapes, got {z.shape}, {a.shape}, {b.shape}"
        )
    out = _b.alloc_raw(z.size)
    _b.kernels.blend(z.data, a.data, b.data, out, z.size)
    zd, ad_, bd, n = z.data, a.data, b.data, z.size

    def bwd(g, gins):
        gz, ga, gb = gins
        scratch = None
        if gz is None or ga is None or gb is None:
            scratch = _b.alloc(n)
        _b.kernels.blend_bwd(
            zd, ad_, bd, g,
            gz if gz is not None else scratch,
            ga if ga is not None else scratch,
            gb if gb is not None else scratch,
            n,
        )

    return _emit(z.shape, out, (z, a, b), bwd)


def elementwise(kind, *operands):
    """Dispatch an elementwise op by name (relu/tanh/sigmoid/add/subtract/hadamard/scale)."""
    table = {
        "relu": relu,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "add": add,
        "subtract": subtract,
        "hadamard": hadamard,
        "scale": scale,
    }
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*operands)


def concat_features(a, b):
    """Concatenate along the last axis; leading extents must match."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(
            f"concat_features leading extents differ: {a.shape} vs {b.shape}"
        )
    ca, cb = a.shape[-1], b.shape[-1]
    rows = a.size // ca
    out = _b.alloc_raw(rows * (ca + cb))
    _b.kernels.concat2(a.data, b.data, out, rows, ca, cb)

    def bwd(g, gins):
        ga, gb = gins
        # splitting the gradient back; a missing side still needs the other
        tmp_a = ga if ga is not None else _b.alloc(rows * ca)
        tmp_b = gb if gb is not None else _b.alloc(rows * cb)
        _b.kernels.split2_acc(g, tmp_a, tmp_b, rows, ca, cb)

    return _emit(a.shape[:-1] + (ca + cb,), out, (a, b), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must be shaped ({d},), got {gain.shape}/{bias.shape}"
        )
    rows = x.size // d
    out = _b.alloc_raw(x.size)
    mean = _b.alloc_raw(rows)
    rstd = _b.alloc_raw(rows)
    _b.kernels.layer_norm(x.data, gain.data, bias.data, out, mean, rstd, rows, d, eps)
    xd, gd = x.data, gain.data

    def bwd(g, gins):
        gx, ggain, gbias = gins
        tmp_x = gx if gx is not None else _b.alloc(rows * d)
        tmp_g = ggain if ggain is not None else _b.alloc(d)
        tmp_b = gbias if gbias is not None else _b.alloc(d)
        _b.kernels.layer_norm_bwd(xd, gd, mean, rstd, g, tmp_x, tmp_g, tmp_b, rows, d)

    return _emit(x.shape, out, (x, gain, bias), bwd)


def reshape(x, shape):
    """Reinterpret the flat buffer under a new shape (no copy).

    For on-tape intermediates the view aliases the producer's gradient slot
    (row-major layout is unchanged), so no tape node is recorded; reshaped
    leaves get an identity node so gradients still reach ``leaf.grad``.
    """
    shape = tuple(int(s) for s in shape)
    if _prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    tape = _active_tape()
    if tape is not None and x.requires_grad and x._tape is tape and x.tape_id is not None:
        if tape.frozen:
            raise TapeError("cannot record on a frozen tape")
        out = Tensor.__new__(Tensor)
        out.shape = shape
        out.data = x.data
        out.grad = None
        out.requires_grad = True
        out.tape_id = x.tape_id
        out._tape = tape
        return out
    n = x.size

    def bwd(g, gins):
        (gx,) = gins
        if gx is not None:
            _b.kernels.axpy(1.0, g, gx, n)

    return _emit(shape, x.data, (x,), bwd)


def narrow(x, axis, start, length):
    """Slice ``length`` entries from ``axis`` starting at ``start`` (copy)."""
    dims = x.shape
    if not 0 <= axis < len(dims):
        raise ShapeError(f"narrow axis {axis} out of range for {dims}")
    if start < 0 or length < 1 or start + length > dims[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] exceeds extent {dims[axis]}"
        )
    outer = _prod(dims[:axis])
    inner = _prod(dims[axis + 1 :])
    dim = dims[axis]
    out = _b.alloc_raw(outer * length * inner)
    _b.kernels.narrow(x.data, out, outer, dim, inner, start, length)

    def bwd(g, gins):
        (gx,) = gins
        if gx is not None:
            _b.kernels.narrow_acc(g, gx, outer, dim, inner, start, length)

    return _emit(dims[:axis] + (length,) + dims[axis + 1 :], out, (x,), bwd)


def swap_axes(x, ax1, ax2):
    """Transpose two axes (copying)."""
    if ax1 == ax2:
        raise ShapeError("swap_axes needs two distinct axes")
    ax1, ax2 = min(ax1, ax2), max(ax1, ax2)
    dims = x.shape
    if ax2 >= len(dims):
        raise ShapeError(f"swap_axes axes ({ax1},{ax2}) out of range for {dims}")
    outer = _prod(dims[:ax1])
    da = dims[ax1]
    mid = _prod(dims[ax1 + 1 : ax2])
    db = dims[ax2]
    inner = _prod(dims[ax2 + 1 :])
    out = _b.alloc_raw(x.size)
    _b.kernels.swapaxes(x.data, out, outer, da, mid, db, inner, False)
    new_shape = list(dims)
    new_shape[ax1], new_shape[ax2] = new_shape[ax2], new_shape[ax1]

    def bwd(g, gins):
        (gx,) = gins
        if gx is not None:
            _b.kernels.swapaxes(g, gx, outer, db, mid, da, inner, True)

    return _emit(tuple(new_shape), out, (x,), bwd)


def tile_rows(v, n):
    """Stack a 1-D tensor as n identical rows (the explicit form of a
    row-broadcast); backward sums the row gradients."""
    if v.ndim != 1 or n < 1:
        raise ShapeError(f"tile_rows needs a 1-D tensor and n >= 1, got {v.shape}, {n}")
    d = v.size
    out = _b.alloc_raw(n * d)
    for r in range(n):
        out[r * d : (r + 1) * d] = v.data

    def bwd(g, gins):
        (gv,) = gins
        if gv is not None:
            _b.kernels.colsum_acc(g, gv, n, d)

    return _emit((n, d), out, (v,), bwd)


def add_rowvec(x, v):
    """Add a 1-D vector to every consecutive block of ``v.size`` entries."""
    if v.ndim != 1 or x.size % v.size != 0:
        raise ShapeError(f"add_rowvec cannot apply {v.shape} to {x.shape}")
    d = v.size
    rows = x.size // d
    out = _b.alloc_raw(x.size)
    _b.kernels.add_rowvec(x.data, v.data, out, rows, d)
    n = x.size

    def bwd(g, gins):
        gx, gv = gins
        if gx is not None:
            _b.kernels.axpy(1.0, g, gx, n)
        if gv is not None:
            _b.kernels.colsum_acc(g, gv, rows, d)

    return _emit(x.shape, out, (x, v), bwd)


def mul_rowvec(x, v):
    """Multiply every consecutive block of ``v.size`` entries by ``v``."""
    if v.ndim != 1 or x.size % v.size != 0:
        raise ShapeError(f"mul_rowvec cannot apply {v.shape} to {x.shape}")
    d = v.size
    rows = x.size // d
    out = _b.alloc_raw(x.size)
    _b.kernels.mul_rowvec(x.data, v.data, out, rows, d)
    xd, vd = x.data, v.data

    def bwd(g, gins):
        gx, gv = gins
        if gx is not None:
            tmp = _b.alloc_raw(rows * d)
            _b.kernels.mul_rowvec(g, vd, tmp, rows, d)
            _b.kernels.axpy(1.0, tmp, gx, rows * d)
        if gv is not None:
            _b.kernels.colsum_prod_acc(g, xd, gv, rows, d)

    return _emit(x.shape, out, (x, v), bwd)


def mix_nodes(support, x):
    """Left-multiply node features by a shared [N x N] support.

    ``x`` is [N x C] or [B x N x C]; out[b,i] = sum_j support[i,j] x[b,j].
    """
    if support.ndim != 2 or support.shape[0] != support.shape[1]:
        raise ShapeError(f"support must be square, got {support.shape}")
    nn = support.shape[0]
    if x.ndim == 2:
        nb, c = 1, x.shape[1]
        n_axis = x.shape[0]
    elif x.ndim == 3:
        nb, n_axis, c = x.shape
    else:
        raise ShapeError(f"mix_nodes needs 2-D or 3-D features, got {x.shape}")
    if n_axis != nn:
        raise ShapeError(f"support {support.shape} does not match features {x.shape}")
    out = _b.alloc_raw(x.size)
    _b.kernels.mix_nodes(support.data, x.data, out, nb, nn, c, False, False)
    sd, xd = support.data, x.data

    def bwd(g, gins):
        gs, gx = gins
        if gx is not None:
            _b.kernels.mix_nodes(sd, g, gx, nb, nn, c, True, True)
        if gs is not None:
            _b.kernels.mix_nodes_bwd_support(g, xd, gs, nb, nn, c)

    return _emit(x.shape, out, (support, x), bwd)


def node_linear(theta, x, bias=None):
    """Apply node n's own [C x F] weight block to node n's features.

    ``theta`` is [N x C x F]; ``x`` is [N x C] or [B x N x C]; the optional
    ``bias`` is [N x F], added to every batch row's node block in place.
    """
    if theta.ndim != 3:
        raise ShapeError(f"theta must be [N x C x F], got {theta.shape}")
    nn, c, f = theta.shape
    if x.ndim == 2:
        nb = 1
        n_axis, c_axis = x.shape
        out_shape = (nn, f)
    elif x.ndim == 3:
        nb, n_axis, c_axis = x.shape
        out_shape = (nb, nn, f)
    else:
        raise ShapeError(f"node_linear needs 2-D or 3-D features, got {x.shape}")
    if n_axis != nn or c_axis != c:
        raise ShapeError(f"features {x.shape} do not match theta {theta.shape}")
    if bias is not None and bias.shape != (nn, f):
        raise ShapeError(f"node bias must be ({nn}, {f}), got {bias.shape}")
    out = _b.alloc_raw(nb * nn * f)
    _b.kernels.node_linear(theta.data, x.data, out, nb, nn, c, f, False, False)
    if bias is not None:
        _b.kernels.add_rowvec(out, bias.data, out, nb, nn * f)
    td, xd = theta.data, x.data
    inputs = (theta, x) if bias is None else (theta, x, bias)

    def bwd(g, gins):
        gt, gx = gins[0], gins[1]
        if gx is not None:
            _b.kernels.node_linear(td, g, gx, nb, nn, f, c, True, True)
        if gt is not None:
            _b.kernels.node_linear_bwd_theta(xd, g, gt, nb, nn, c, f)
        if bias is not None and gins[2] is not None:
            _b.kernels.colsum_acc(g, gins[2], nb, nn * f)

    return _emit(out_shape, out, inputs, bwd)


def sum_all(x):
    """Sum every entry into a single-element tensor."""
    out = array("d", [_b.kernels.asum(x.data, x.size)])
    n = x.size

    def bwd(g, gins):
        (gx,) = gins
        if gx is not None:
            _b.kernels.affine(gx, 1.0, g[0], gx, n)

    return _emit((1,), out, (x,), bwd)


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.size)


def grad_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure scalar-valued function of ``x``; purity is checked
    by re-evaluation. Relative error per coordinate is
    |analytic - fd| / max(1, |fd|).
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"h must be in (0, 1e-3], got {h}")
    v1 = f(x).item()
    v2 = f(x).item()
    if v1 != v2:
        raise ValueError("f is not deterministic: re-evaluation mismatch")

    was_requiring = x.requires_grad
    old_grad = x.grad
    x.requires_grad = True
    x.grad = None
    with Tape():
        y = f(x)
        backward(y)
    analytic = array("d", x.grad)
    x.grad = old_grad
    x.requires_grad = was_requiring

    max_err = 0.0
    data = x.data
    for i in range(x.size):
        orig = data[i]
        data[i] = orig + h
        fp = f(x).item()
        data[i] = orig - h
        fm = f(x).item()
        data[i] = orig
        fd = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - fd) / max(1.0, abs(fd))
        if err > max_err:
            max_err = err
    return max_err
