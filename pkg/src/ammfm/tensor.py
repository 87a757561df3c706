"""Dense tensors with reverse-mode differentiation.

Only the operations the fusion pipeline needs are provided. Feature maps are
laid out channel-last, ``(..., H, W, C)``, and every op accepts extra leading
batch axes. Shapes must agree exactly; the only implicit broadcast is the bias
add in :func:`conv1x1`, :func:`linear` and :func:`conv2d`.
"""

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

_DTYPES = {"float64": np.float64, "float32": np.float32}
_dtype = np.float64


def set_precision(name):
    """Select the floating dtype for newly created tensors ("float64" or "float32")."""
    global _dtype
    try:
        _dtype = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


def get_precision():
    return np.dtype(_dtype).name


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=_dtype)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.grad = np.zeros_like(arr) if (self.requires_grad and _backward is None) else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.reshape(-1)

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    """Create an op output; attach the backward rule only if some input needs gradients."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss):
    """Populate ``.grad`` of every requires_grad leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing leaf buffers, so a tensor consumed twice
    receives the sum of both contributions.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------- elementwise


def _same_shape(a, b, what):
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise DimensionError(f"{what}: axis {axis} has size {da} vs {db}")
        raise DimensionError(f"{what}: rank {len(a.shape)} vs {len(b.shape)}")


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c):
    a = _wrap(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tsum(a):
    a = _wrap(a)
    return _result(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a):
    return scale(tsum(a), 1.0 / a.size)


def silu(a):
    """x * sigmoid(x); smooth, so finite-difference checks never straddle a kink."""
    a = _wrap(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * sig

    def bw(g):
        return (g * (sig + out * (1.0 - sig)),)

    return _result(out, (a,), bw, "silu")


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- reshaping


def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten_spatial(a):
    """(..., H, W, C) -> (..., H*W, C)."""
    *lead, h, w, c = a.shape
    return reshape(a, (*lead, h * w, c))


def transpose_last(a):
    a = _wrap(a)
    if a.data.ndim < 2:
        raise DimensionError("transpose needs rank >= 2")
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if len(t.shape) != nd:
            raise DimensionError(f"concat: rank {len(t.shape)} vs {nd}")
        for i in range(nd):
            if i != ax and t.shape[i] != ref[i]:
                raise DimensionError(f"concat: axis {i} has size {t.shape[i]} vs {ref[i]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """(..., M, K) @ (..., K, P) with identical leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner axis mismatch, a axis {a.data.ndim - 1} has {a.shape[-1]}, "
            f"b axis {b.data.ndim - 2} has {b.shape[-2]}"
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes {a.shape[:-2]} vs {b.shape[:-2]}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias):
    """Affine map over the last axis: x @ weight + bias.

    ``weight`` is (C_in, C_out), ``bias`` is (C_out,). Used both as the
    1x1 convolution on feature maps and as the fully connected head.
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if weight.data.ndim != 2:
        raise DimensionError(f"weight must be a matrix, got shape {weight.shape}")
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise DimensionError(
            f"channel axis {x.data.ndim - 1} has {x.shape[-1]} entries, weight expects C_in={cin}"
        )
    if bias.shape != (cout,):
        raise DimensionError(f"bias axis 0 has {bias.shape} entries, expected ({cout},)")
    flat = x.data.reshape(-1, cin)
    out = (flat @ weight.data + bias.data).reshape(*x.shape[:-1], cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), bw, "linear")


def conv1x1(x, weight, bias):
    """Pointwise convolution of a (..., H, W, C_in) feature map."""
    if _wrap(x).data.ndim < 3:
        raise DimensionError("conv1x1 expects a (..., H, W, C) feature map")
    return linear(x, weight, bias)


fully_connected = linear


def conv2d(x, weight, bias, stride=1):
    """3x3-style convolution with 'same' zero padding; weight is (k, k, C_in, C_out), k odd."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.ndim != 4:
        raise DimensionError("conv2d expects a (B, H, W, C) batch")
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if x.shape[-1] != cin:
        raise DimensionError(f"channel axis 3 has {x.shape[-1]} entries, kernel expects C_in={cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias axis 0 has {bias.shape} entries, expected ({cout},)")
    p = k // 2
    bsz, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols @ wmat + bias.data).reshape(bsz, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(bsz, ho, wo, k, k, cin)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, p : p + h, p : p + w, :]
        return gx, gw, gb

    return _result(out, (x, weight, bias), bw, "conv2d")


# ---------------------------------------------------------------- pooling


def global_avg_pool(x):
    """(..., H, W, C) -> (..., C)."""
    x = _wrap(x)
    if x.data.ndim < 3:
        raise DimensionError("global_avg_pool expects (..., H, W, C)")
    h, w = x.shape[-3], x.shape[-2]

    def bw(g):
        return (np.broadcast_to(g[..., None, None, :] / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(-3, -2)), (x,), bw, "gap")


def avg_pool(x, k):
    """Non-overlapping k x k average pooling on (..., H, W, C); H and W must divide by k."""
    x = _wrap(x)
    *lead, h, w, c = x.shape
    if h % k:
        raise DimensionError(f"avg_pool: axis {len(lead)} size {h} not divisible by {k}")
    if w % k:
        raise DimensionError(f"avg_pool: axis {len(lead) + 1} size {w} not divisible by {k}")
    blocks = x.data.reshape(*lead, h // k, k, w // k, k, c)
    out = blocks.mean(axis=(-4, -2))

    def bw(g):
        gb = np.broadcast_to(g[..., :, None, :, None, :] / (k * k), blocks.shape)
        return (gb.reshape(x.shape).copy(),)

    return _result(out, (x,), bw, "avg_pool")


def upsample_nearest(x, k):
    """Repeat every spatial position k times along H and W."""
    x = _wrap(x)
    *lead, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=-3), k, axis=-2)

    def bw(g):
        return (g.reshape(*lead, h, k, w, k, c).sum(axis=(-4, -2)),)

    return _result(out, (x,), bw, "upsample")


# ---------------------------------------------------------------- probabilities


def _check_finite(arr, what):
    if np.isnan(arr).any():
        raise NumericError(f"{what}: NaN in input")
    if not np.isfinite(arr).all():
        raise NumericError(f"{what}: non-finite input")


def softmax_array(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis, max-shifted for overflow safety."""
    x = _wrap(x)
    _check_finite(x.data, "softmax")
    y = softmax_array(x.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def log_softmax_array(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target):
    """Per-case -log softmax(logits)[target].

    ``logits`` is (..., K); ``target`` an int or an int array of shape
    logits.shape[:-1]. Returns a tensor of that leading shape (a scalar for a
    single vector); reduce with :func:`tsum` or :func:`mean`.
    """
    logits = _wrap(logits)
    _check_finite(logits.data, "cross_entropy")
    k = logits.shape[-1]
    if k < 2:
        raise DimensionError(f"cross_entropy needs K >= 2 categories, got {k}")
    t = np.asarray(target, dtype=np.int64)
    if t.shape != logits.shape[:-1]:
        raise DimensionError(f"target shape {t.shape} does not match logits leading shape {logits.shape[:-1]}")
    if t.size and (t.min() < 0 or t.max() >= k):
        bad = int(t.min()) if t.min() < 0 else int(t.max())
        raise IndexError(f"target {bad} outside [0, {k})")
    logp = log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * np.asarray(g)[..., None],)

    return _result(-picked, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- serialization

_MAGIC = b"AMMT"


def tensor_to_bytes(arr):
    """Flat binary layout: b"AMMT", uint32 rank, rank x uint64 dims, then float64 LE values."""
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    header = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf):
    if buf[:4] != _MAGIC:
        raise ContractError("not a tensor blob (bad magic)")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    off = 8 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) - off != 8 * count:
        raise ContractError(f"tensor blob length mismatch: header says {count} values")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
