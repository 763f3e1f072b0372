"""A small reverse-mode autodiff engine over numpy arrays.

Each :class:`Tensor` produced by an operation records its parents and a
closure that maps the output gradient to parent gradients.  ``backward``
walks the graph in reverse topological order.  Images use NHWC layout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name
        self._consumed = False

    # construction helpers -------------------------------------------------
    @staticmethod
    def _from_op(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -----------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # differentiation ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate gradients into every tensor that ``self`` depends on.

        A graph can be differentiated once; a second call raises.
        """
        if not self.requires_grad:
            raise AutodiffError("cannot differentiate a detached tensor")
        if self._consumed:
            raise AutodiffError("backward already called on this graph; rebuild it before differentiating again")
        if grad is None:
            if self.data.size != 1:
                raise AutodiffError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype).reshape(self.shape)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._consumed = True


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
    order.reverse()
    return order


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor they meet
    if not isinstance(a, Tensor):
        a = _lift(a, b if isinstance(b, Tensor) else None)
    return a, _lift(b, a)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return Tensor._from_op(out, (a,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),))


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2 * a.data * g,))


# reductions and shape ------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return Tensor._from_op(np.asarray(out, dtype=a.dtype), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), np.asarray(1.0 / count, dtype=a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# linear algebra ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def outer_add_relu(points: Tensor, codes: Tensor, bias: Tensor) -> Tensor:
    """``relu(points[None] + codes[:, None] + bias)`` as one fused node.

    ``points`` is ``(N, H)``, ``codes`` is ``(B, H)``; the result is ``(B, N, H)``.
    """
    z = points.data[None, :, :] + codes.data[:, None, :]
    z += bias.data
    np.maximum(z, 0, out=z)

    def backward(g):
        gz = np.where(z > 0, g, 0).astype(g.dtype, copy=False)
        g_points = gz.sum(axis=0)
        return g_points, gz.sum(axis=1), g_points.sum(axis=0)

    return Tensor._from_op(z, (points, codes, bias), backward)


# convolution and pooling (NHWC) --------------------------------------------
def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)
    b, h, w, c = x.shape
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """'Same' stride-1 convolution; ``weight`` has shape ``(k, k, C_in, C_out)``."""
    k, _, cin, cout = weight.shape
    b, h, w, c = x.shape
    if c != cin:
        raise AutodiffError(f"conv2d expects {cin} input channels, got {c}")
    cols = _im2col(x.data, k)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(b, h, w, cout)
    pad = k // 2

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(b, h, w, k, k, cin)
        gx = np.zeros((b, h + 2 * pad, w + 2 * pad, cin), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
        return gx[:, pad : pad + h, pad : pad + w, :], gw

    conv = Tensor._from_op(out, (x, weight), backward)
    return conv if bias is None else add(conv, bias)


def maxpool2x2(x: Tensor) -> Tensor:
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise AutodiffError("max-pooling needs even spatial dimensions")
    blocks = x.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# losses --------------------------------------------------------------------
def _nearest_pairs(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest ``b`` index for each ``a`` point and nearest ``a`` index for each ``b`` point.

    Brute force in float64; one distance matrix serves both directions.
    """
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.argmin(d2, axis=1), np.argmin(d2, axis=0)


def chamfer_loss(pred: Tensor, gt) -> Tensor:
    """Bidirectional Chamfer on squared distances, averaged over both directions and the batch.

    ``pred`` is ``(N, 3)`` or ``(B, N, 3)``; ``gt`` matches its batch layout.
    Nearest-neighbour assignments are held fixed while differentiating.
    """
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    p = pred.data
    single = p.ndim == 2
    if single:
        p, gt = p[None], np.asarray(gt)[None]
    if p.shape[1] == 0 or gt.shape[1] == 0:
        raise AutodiffError("empty point cloud")
    if len(p) != len(gt):
        raise AutodiffError("prediction and ground-truth batches differ in size")
    gt = gt.astype(p.dtype)
    batch, n, _ = p.shape
    m = gt.shape[1]
    total = 0.0
    grad = np.zeros_like(p)
    for i in range(batch):
        fwd, bwd = _nearest_pairs(p[i], gt[i])  # pred -> gt, gt -> pred
        d_f = p[i] - gt[i][fwd]
        d_b = p[i][bwd] - gt[i]
        total += 0.5 * ((d_f * d_f).sum() / n + (d_b * d_b).sum() / m)
        grad[i] += d_f / n
        np.add.at(grad[i], bwd, d_b / m)
    value = np.asarray(total / batch, dtype=p.dtype)
    grad = grad / batch  # d/dp of 0.5 * (sum d^2) is d
    if single:
        grad = grad[0]

    return Tensor._from_op(value, (pred,), lambda g: (g * grad,))
