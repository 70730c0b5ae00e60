"""Differentiable primitive ops.

Every op takes :class:`Tensor` (or array-like) inputs, computes its result
with NumPy, and registers a vector-Jacobian product on the active tape when
any input requires gradients. Elementwise binary ops follow NumPy
broadcasting; gradients are summed back to each operand's shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_output


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make_output(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_output(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_output(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_output(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 1-D or 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def vjp(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
        else:
            ga = g @ bd.T
            a2 = ad.reshape(-1, ad.shape[-1])
            gb = a2.T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return make_output(ad @ bd, (a, b), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_output(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return make_output(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return make_output(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return make_output(y, (a,), lambda g: (g / x,))


def softmax(a) -> Tensor:
    """Softmax along the last axis (max-subtracted)."""
    a = as_tensor(a)
    y = softmax_np(a.data)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return make_output(y, (a,), vjp)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    y = log_softmax_np(a.data)

    def vjp(g):
        return (g - np.exp(y) * np.sum(g, axis=-1, keepdims=True),)

    return make_output(y, (a,), vjp)


def logsumexp(a) -> Tensor:
    """Log-sum-exp along the last axis."""
    a = as_tensor(a)
    m = np.max(a.data, axis=-1, keepdims=True)
    y = np.log(np.sum(np.exp(a.data - m), axis=-1)) + m[..., 0]
    p = np.exp(a.data - y[..., None])
    return make_output(y, (a,), lambda g: (g[..., None] * p,))


def softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    s = x - np.max(x, axis=-1, keepdims=True)
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def gather_rows(table, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table {table.shape}")
    rows, width = table.shape

    def vjp(g):
        out = np.zeros((rows, width))
        np.add.at(out, idx.reshape(-1), g.reshape(-1, width))
        return (out,)

    return make_output(table.data[idx], (table,), vjp, check_finite=False)


def pick(a, idx) -> Tensor:
    """Select ``a[..., idx[...]]`` along the last axis (e.g. target log-probs)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.shape[:-1] != idx.shape:
        raise ShapeError(f"pick: leading shape {a.shape[:-1]} != index shape {idx.shape}")
    y = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return make_output(y, (a,), vjp, check_finite=False)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_output(np.sum(a.data, axis=axis), (a,), vjp, check_finite=False)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=ax))

    return make_output(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp,
                       check_finite=False)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return make_output(y, (a,), lambda g: (g.reshape(old),), check_finite=False)


def index(a, key) -> Tensor:
    """Basic slicing/indexing, ``a[key]``."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return make_output(a.data[key], (a,), vjp, check_finite=False)


def gru_sequence(x, h0, w, u, b) -> Tensor:
    """Run a gated recurrent cell over a batch of sequences.

    Shapes: ``x`` (B, T, I), ``h0`` (B, H), ``w`` (I, 3H), ``u`` (H, 3H),
    ``b`` (3H,). Gate blocks in ``w``/``u``/``b`` are ordered
    reset | update | candidate. Returns all hidden states, (B, T, H)::

        r = sigmoid(x W_r + h U_r + b_r)
        z = sigmoid(x W_z + h U_z + b_z)
        n = tanh(x W_n + b_n + r * (h U_n))
        h' = (1 - z) * n + z * h
    """
    x, h0, w, u, b = (as_tensor(t) for t in (x, h0, w, u, b))
    if x.ndim != 3 or h0.ndim != 2 or h0.shape[0] != x.shape[0]:
        raise ShapeError(f"gru_sequence: x {x.shape} / h0 {h0.shape} do not conform")
    B, T, I = x.shape
    H = h0.shape[1]
    if w.shape != (I, 3 * H) or u.shape != (H, 3 * H) or b.shape != (3 * H,):
        raise ShapeError(f"gru_sequence: weights {w.shape}, {u.shape}, {b.shape} "
                         f"do not match input {I} / hidden {H}")
    xd, ud = x.data, u.data
    xw = (xd.reshape(B * T, I) @ w.data + b.data).reshape(B, T, 3 * H)
    hs = np.empty((B, T, H))
    rs = np.empty((B, T, H))
    zs = np.empty((B, T, H))
    ns = np.empty((B, T, H))
    hun = np.empty((B, T, H))
    h = h0.data
    for t in range(T):
        a = xw[:, t]
        hu = h @ ud
        r = _sigmoid(a[:, :H] + hu[:, :H])
        z = _sigmoid(a[:, H:2 * H] + hu[:, H:2 * H])
        n = np.tanh(a[:, 2 * H:] + r * hu[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        rs[:, t], zs[:, t], ns[:, t], hun[:, t], hs[:, t] = r, z, n, hu[:, 2 * H:], h
    h0d = h0.data
    need_u = u.requires_grad

    def vjp(g):
        dxw = np.empty((B, T, 3 * H))
        du = np.zeros((H, 3 * H)) if need_u else None
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            hp = hs[:, t - 1] if t > 0 else h0d
            dh = dh + g[:, t]
            r, z, n = rs[:, t], zs[:, t], ns[:, t]
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (hp - n) * z * (1.0 - z)
            dr = dn * hun[:, t] * r * (1.0 - r)
            dhu = np.concatenate([dr, dz, dn * r], axis=1)
            dxw[:, t, :H] = dr
            dxw[:, t, H:2 * H] = dz
            dxw[:, t, 2 * H:] = dn
            if need_u:
                du += hp.T @ dhu
            dh = dh * z + dhu @ ud.T
        flat = dxw.reshape(B * T, 3 * H)
        dx = (flat @ w.data.T).reshape(B, T, I) if x.requires_grad else None
        dw = xd.reshape(B * T, I).T @ flat if w.requires_grad else None
        db = flat.sum(axis=0) if b.requires_grad else None
        return dx, (dh if h0.requires_grad else None), dw, du, db

    return make_output(hs, (x, h0, w, u, b), vjp)
