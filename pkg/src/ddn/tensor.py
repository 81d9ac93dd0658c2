"""Dense float32 arrays with reverse-mode autodiff on a define-by-run tape.

Everything a discrete-distribution network needs and nothing more: a handful
of forward ops (conv, pooling, concat, mse, ...), a topological backward pass,
an Adam optimizer, and per-node "slot" cloning of parameters together with
their optimizer moments.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for an op; names the op and shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class SlotError(ValueError):
    """Raised on invalid slot-axis operations (clone without slot_axis, bad index)."""


_grad_enabled = True
# Count of backward() invocations; gradient-free paths assert this stays flat.
_backward_calls = 0


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def backward_call_count():
    return _backward_calls


class Tensor:
    """A dense float32 array plus an optional gradient buffer.

    Ops record their inputs and a gradient closure on the result, so calling
    backward() on a scalar loss fills .grad on every reachable tensor that
    has requires_grad set. The tape is rebuilt on every forward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_spent")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._grad_fn = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, grad_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.asarray(g, dtype=np.float32).copy()
    else:
        t.grad = t.grad + np.asarray(g, dtype=np.float32)


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss over its tape."""
    global _backward_calls
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise RuntimeError("backward already ran for this loss; build a fresh forward pass")
    loss._spent = True
    _backward_calls += 1

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, ready = stack.pop()
        if ready:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


# ---------------------------------------------------------------------------
# forward ops


def add(a, b):
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None

    def grad_fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), grad_fn)


def sub(a, b):
    return add(a, scale(b, -1.0))


def add_n(tensors):
    tensors = list(tensors)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeMismatch("add_n", shape, t.shape)
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data += t.data

    def grad_fn(g):
        for t in tensors:
            _accum(t, g)

    return _result(data, tuple(tensors), grad_fn)


def scale(a, s):
    s = np.float32(s)
    data = a.data * s

    def grad_fn(g):
        _accum(a, g * s)

    return _result(data, (a,), grad_fn)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def grad_fn(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(data, (a, b), grad_fn)


def relu(a):
    data = np.maximum(a.data, 0)

    def grad_fn(g):
        _accum(a, g * (a.data > 0))

    return _result(data, (a,), grad_fn)


def leaky_relu(a, alpha=0.2):
    alpha = np.float32(alpha)
    data = np.where(a.data > 0, a.data, a.data * alpha)

    def grad_fn(g):
        _accum(a, g * np.where(a.data > 0, np.float32(1.0), alpha))

    return _result(data, (a,), grad_fn)


def conv2d(x, w, b=None):
    """2-D convolution, stride 1, zero padding to same spatial size.

    Feature maps are channels-last: x is (N,H,W,C), the output (N,H,W,O).
    w is (O,C,k,k) with k in {1,3}; b is (O,) and optional. The 3x3 case runs
    as nine shifted matmuls, which beats im2col on memory traffic here.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    o, ci, kh, kw = w.shape
    if kh != kw or kh not in (1, 3) or ci != x.shape[3]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    n, h, wid, c = x.shape

    if kh == 1:
        data = (x.data.reshape(-1, c) @ w.data.reshape(o, c).T).reshape(n, h, wid, o)
        xp = None
    else:
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
        wk = w.data.transpose(2, 3, 1, 0)  # (3,3,C,O)
        acc = np.zeros((n * h * wid, o), np.float32)
        for i in range(3):
            for j in range(3):
                sl = np.ascontiguousarray(xp[:, i:i + h, j:j + wid, :]).reshape(-1, c)
                acc += sl @ np.ascontiguousarray(wk[i, j])
        data = acc.reshape(n, h, wid, o)
    if b is not None:
        if b.shape != (o,):
            raise ShapeMismatch("conv2d-bias", (o,), b.shape)
        data += b.data

    def grad_fn(g):
        g2 = g.reshape(-1, o)
        if kh == 1:
            _accum(x, (g2 @ w.data.reshape(o, c)).reshape(x.shape))
            _accum(w, (g2.T @ x.data.reshape(-1, c)).reshape(w.shape))
        else:
            wk_ = w.data.transpose(2, 3, 1, 0)
            gw = np.zeros((3, 3, c, o), np.float32)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    sl = np.ascontiguousarray(xp[:, i:i + h, j:j + wid, :]).reshape(-1, c)
                    gw[i, j] = sl.T @ g2
                    gxp[:, i:i + h, j:j + wid, :] += (
                        g2 @ np.ascontiguousarray(wk_[i, j]).T
                    ).reshape(n, h, wid, c)
            _accum(x, gxp[:, 1:h + 1, 1:wid + 1, :])
            _accum(w, gw.transpose(3, 2, 0, 1))
        if b is not None:
            _accum(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(data, parents, grad_fn)


def concat_channels(tensors):
    tensors = list(tensors)
    lead = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(lead) or t.shape[:-1] != lead[:-1]:
            raise ShapeMismatch("concat-channels", lead, t.shape)
    data = np.concatenate([t.data for t in tensors], axis=-1)
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def grad_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=-1)):
            _accum(t, piece)

    return _result(data, tuple(tensors), grad_fn)


def avgpool2x2(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch("avgpool2x2", x.shape)
    data = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def grad_fn(g):
        _accum(x, np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * np.float32(0.25))

    return _result(data, (x,), grad_fn)


def upsample_nearest2x2(x):
    n, h, w, c = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def grad_fn(g):
        _accum(x, g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return _result(data, (x,), grad_fn)


def mse(a, b):
    """Mean squared error over all elements, accumulated in float64."""
    if a.shape != b.shape:
        raise ShapeMismatch("mse", a.shape, b.shape)
    d = a.data - b.data
    data = np.float32(np.mean(d.astype(np.float64) ** 2))

    def grad_fn(g):
        coeff = np.float32(2.0 / d.size) * g.reshape(())
        _accum(a, coeff * d)
        _accum(b, -coeff * d)

    return _result(data, (a, b), grad_fn)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch("reshape", a.shape, shape)
    data = a.data.reshape(shape)

    def grad_fn(g):
        _accum(a, g.reshape(a.shape))

    return _result(data, (a,), grad_fn)


def gather_nodes(cands, idx):
    """Pick per-sample slices: cands (N,K,...) and idx (N,) -> (N,...)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = cands.shape[0]
    if idx.shape != (n,):
        raise ShapeMismatch("gather_nodes", cands.shape, idx.shape)
    rows = np.arange(n)
    data = cands.data[rows, idx]

    def grad_fn(g):
        full = np.zeros_like(cands.data)
        full[rows, idx] = g
        _accum(cands, full)

    return _result(data, (cands,), grad_fn)


def embed(table, ids):
    """Row lookup: table (V,E), ids (N,) -> (N,E)."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _result(data, (table,), grad_fn)


def transpose(a, axes):
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        _accum(a, g.transpose(inverse))

    return _result(data, (a,), grad_fn)


def broadcast_hw(a, h, w):
    """(N,C) -> (N,h,w,C) constant over space."""
    n, c = a.shape
    data = np.broadcast_to(a.data[:, None, None, :], (n, h, w, c)).copy()

    def grad_fn(g):
        _accum(a, g.sum(axis=(1, 2)))

    return _result(data, (a,), grad_fn)


def broadcast_batch(a, n):
    """(...) -> (n, ...) repeated along a new leading axis."""
    data = np.broadcast_to(a.data[None], (n,) + a.shape).copy()

    def grad_fn(g):
        _accum(a, g.sum(axis=0))

    return _result(data, (a,), grad_fn)


_OP_TABLE = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "conv2d": lambda inputs, attrs: conv2d(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "concat-channels": lambda inputs, attrs: concat_channels(inputs),
    "relu": lambda inputs, attrs: relu(*inputs),
    "leaky-relu": lambda inputs, attrs: leaky_relu(inputs[0], **attrs),
    "avgpool2x2": lambda inputs, attrs: avgpool2x2(*inputs),
    "nearest-upsample2x2": lambda inputs, attrs: upsample_nearest2x2(*inputs),
    "mse": lambda inputs, attrs: mse(*inputs),
}


def op_forward(kind, inputs, attrs=None):
    """Dispatch one forward op by kind name, recording it on the tape."""
    if kind not in _OP_TABLE:
        raise ValueError(f"unknown op kind {kind!r}; have {sorted(_OP_TABLE)}")
    return _OP_TABLE[kind](list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# parameters and Adam


class Parameter:
    """A trainable tensor, optionally partitioned into K node slots.

    When slot_axis is set, the extent along that axis is the node count K and
    slot_clone can copy one node's slice (plus optimizer moments) onto another.
    """

    def __init__(self, data, slot_axis=None, name=""):
        self.value = Tensor(data, requires_grad=True)
        self.slot_axis = slot_axis
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, slot_axis={self.slot_axis})"


class AdamState:
    """First/second moment buffers plus step count for one Parameter."""

    def __init__(self, shape, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape, np.float32)
        self.v = np.zeros(shape, np.float32)
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, states):
    """Standard Adam update; treats a missing grad as zero and clears grads."""
    for p, s in zip(params, states):
        if s.m.shape != p.shape:
            raise ShapeMismatch("adam_step", p.shape, s.m.shape)
        g = p.value.grad if p.value.grad is not None else np.zeros(p.shape, np.float32)
        s.t += 1
        s.m = s.beta1 * s.m + (1.0 - s.beta1) * g
        s.v = s.beta2 * s.v + (1.0 - s.beta2) * (g * g)
        mhat = s.m / (1.0 - s.beta1 ** s.t)
        vhat = s.v / (1.0 - s.beta2 ** s.t)
        p.value.data -= (s.lr * mhat / (np.sqrt(vhat) + s.eps)).astype(np.float32)
        p.value.grad = None


def _slot_index(param, k):
    idx = [slice(None)] * param.value.data.ndim
    idx[param.slot_axis] = k
    return tuple(idx)


def slot_clone(param, state, src, dst):
    """Overwrite the dst node slot (value and Adam moments) with a copy of src."""
    if param.slot_axis is None:
        raise SlotError(f"{param.name or 'parameter'} has no slot_axis")
    if src == dst:
        raise SlotError(f"slot_clone src == dst ({src})")
    extent = param.shape[param.slot_axis]
    for k in (src, dst):
        if not 0 <= k < extent:
            raise SlotError(f"slot index {k} out of range [0, {extent})")
    si, di = _slot_index(param, src), _slot_index(param, dst)
    param.value.data[di] = param.value.data[si]
    state.m[di] = state.m[si]
    state.v[di] = state.v[si]
