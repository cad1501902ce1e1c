"""Small dense-tensor engine with reverse-mode automatic differentiation.

Everything runs on numpy arrays.  A ``Tensor`` remembers the op that produced
it and its parents; ``backward`` walks that graph once in reverse topological
order.  Only the ops the NeRN pipeline needs are provided.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
TENSOR_MAGIC = b"NRT1"
PROB_FLOOR = 1e-12


class AutodiffError(Exception):
    """Base error for the tensor engine."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible."""


class GraphError(AutodiffError):
    """Misuse of the computation graph (non-scalar loss, double backward)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: tuple["Tensor", ...] = (),
        _op: str = "leaf",
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = _op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data, _parents=tuple(parents), _op=op)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward_fn
    else:
        out._parents = ()
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.dtype:
        g = g.astype(t.dtype)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------
def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), "add", bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), "div", bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: _accum(a, g * mask))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), "exp", lambda g: _accum(a, g * e))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: _accum(a, g / a.data))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return _make(r, (a,), "sqrt", lambda g: _accum(a, g * 0.5 / r))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: _accum(a, 2.0 * g * a.data))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient is zero where the floor is active."""
    mask = a.data >= lo
    return _make(np.where(mask, a.data, lo).astype(a.dtype), (a,), "clamp_min", lambda g: _accum(a, g * mask))


# -- reductions and shape ops -------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: _accum(a, np.transpose(g, inv)))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        _accum(a, full)

    return _make(np.array(out), (a,), "getitem", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    edges = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, edges[:-1], edges[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def l2_norm(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Euclidean norm; the gradient at an exactly-zero vector is taken as zero."""
    r = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def bw(g):
        rr, gg = r, g
        if axis is not None and not keepdims:
            rr, gg = np.expand_dims(r, axis), np.expand_dims(g, axis)
        safe = np.where(rr > 0, rr, 1.0)
        _accum(a, np.where(rr > 0, gg * a.data / safe, 0.0))

    return _make(np.asarray(r), (a,), "l2_norm", bw)


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight stored as [Dout, Din]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        _accum(x, g @ weight.data)
        _accum(weight, g.T @ x.data)
        if bias is not None:
            _accum(bias, g.sum(axis=0))

    return _make(out, parents, "dense", bw)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip), NCHW layout."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if kh < 1 or kh != kw:
        raise ShapeError(f"conv2d: square kernels only, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride/padding {stride}/{padding}")
    Ho, Wo = conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {Ho}x{Wo}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {O} filters")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # cols: [B*Ho*Wo, C*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if weight.requires_grad:
            _accum(weight, (g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accum(x, dxp)

    return _make(out, parents, "conv2d", bw)


# -- probabilities ------------------------------------------------------------
def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (logits,), "log_softmax", lambda g: _accum(logits, g - p * g.sum(axis=1, keepdims=True)))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return _make(p, (logits,), "softmax", lambda g: _accum(logits, p * (g - (g * p).sum(axis=1, keepdims=True))))


softmax_logits = softmax


def _check_distribution(p: np.ndarray, name: str) -> None:
    if p.ndim != 2:
        raise ShapeError(f"{name} must be [B, K], got {p.shape}")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise AutodiffError(f"{name} rows are not probability distributions")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Batch mean of KL(p || q), with 0 * ln(0 / q) = 0.

    Gradients flow into ``q`` only; ``p`` is the target distribution.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_div shapes {p.shape} vs {q.shape}")
    _check_distribution(p.data, "p")
    _check_distribution(q.data, "q")
    if ((q.data == 0) & (p.data > 0)).any():
        raise AutodiffError("kl_div undefined: q is zero where p is positive")
    pd = p.data
    plogp = np.where(pd > 0, pd * np.log(np.where(pd > 0, pd, 1.0)), 0.0).sum()
    logq = log(q)
    cross = tsum(mul(logq, Tensor(pd.astype(q.dtype))))
    B = p.shape[0]
    return (cross * -1.0 + float(plogp)) * (1.0 / B)


def kl_div_logits(target_logits: Tensor, logits: Tensor) -> Tensor:
    """Batch mean of KL(softmax(target) || softmax(logits)), probabilities floored."""
    if target_logits.shape != logits.shape:
        raise ShapeError(f"kl_div_logits shapes {target_logits.shape} vs {logits.shape}")
    floor = float(np.log(PROB_FLOOR))
    logp = np.maximum(log_softmax(target_logits.detach()).data, floor)
    logq = clamp_min(log_softmax(logits), floor)
    B = logits.shape[0]
    # elementwise difference so equal logits give exactly zero
    gap = Tensor(logp.astype(logits.dtype)) - logq
    return tsum(mul(gap, Tensor(np.exp(logp).astype(logits.dtype)))) * (1.0 / B)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels."""
    lp = log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return tsum(mul(lp, Tensor(onehot))) * (-1.0 / len(labels))


# -- backward -----------------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every tensor that requires them.
    If ``params`` is given, their gradients are returned, with exact zeros
    for parameters the loss does not depend on.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass first")
    loss._consumed = True
    if loss.requires_grad:
        order = _topo(loss)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # interior grads are transient; leaves keep theirs
        for node in order:
            if node._parents:
                node.grad = None
                node._backward = None
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# -- dump format --------------------------------------------------------------
def dumps_tensor(arr) -> bytes:
    """Serialize as ``NRT1 | dtype u8 | rank u8 | u64 extents | LE payload``."""
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    if a.dtype not in _DTYPE_CODES:
        raise AutodiffError(f"unsupported dtype {a.dtype}")
    header = TENSOR_MAGIC + struct.pack("<BB", _DTYPE_CODES[a.dtype], a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes()


def loads_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != TENSOR_MAGIC:
        raise AutodiffError("not a tensor dump (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODE_DTYPES:
        raise AutodiffError(f"unknown dtype code {code}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise AutodiffError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    dt = _CODE_DTYPES[code].newbyteorder("<")
    n = int(np.prod(shape)) if rank else 1
    if len(buf) != off + n * dt.itemsize:
        raise AutodiffError("tensor payload size mismatch")
    return np.frombuffer(buf, dtype=dt, offset=off, count=n).reshape(shape).astype(_CODE_DTYPES[code])


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())
