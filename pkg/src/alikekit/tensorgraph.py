"""Minimal dense-tensor computation graph with reverse-mode autodiff.

Covers exactly the operations the backbone, the detector, and the losses
need: conv2d, pooling, bilinear upsampling, softmax variants, reductions,
matmul, indexing, and elementwise arithmetic. Values are numpy arrays;
gradients accumulate additively into leaf tensors, so calling backward on
two graphs sharing a leaf sums both contributions (this is what gradient
accumulation in the trainer relies on).
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tensor",
    "concat",
    "conv2d",
    "l2_normalize",
    "log_softmax",
    "maxpool2d",
    "relu",
    "sigmoid",
    "softmax",
    "upsample_bilinear",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]


def _unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense array node in the computation graph.

    data is a row-major numpy array of at most 4 dimensions. When
    requires_grad is set, backward() on a downstream scalar fills .grad
    with dRoot/dSelf, accumulating over repeated calls.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    # keep numpy from elementwise-iterating `ndarray <op> Tensor`; the
    # reflected operators below handle the mixed cases
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64 if not isinstance(data, np.ndarray) else data.dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- graph plumbing ---------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad):
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar root.

        Every requires_grad leaf reachable from this node receives its
        gradient; each graph node is visited exactly once.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not (parent.requires_grad or parent._backward is not None):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- op construction helper -------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad or p._backward is not None for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- elementwise arithmetic -------------------------------------------

    @staticmethod
    def _coerce(x, dtype=np.float64):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))

    def __add__(self, other):
        other = Tensor._coerce(other, self.dtype)
        def bw(g):
            return ((self, _unbroadcast(g, self.shape)),
                    (other, _unbroadcast(g, other.shape)))
        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._coerce(other, self.dtype)
        def bw(g):
            return ((self, _unbroadcast(g, self.shape)),
                    (other, _unbroadcast(-g, other.shape)))
        return Tensor._make(self.data - other.data, (self, other), bw)

    def __rsub__(self, other):
        return Tensor._coerce(other) - self

    def __mul__(self, other):
        other = Tensor._coerce(other, self.dtype)
        def bw(g):
            return ((self, _unbroadcast(g * other.data, self.shape)),
                    (other, _unbroadcast(g * self.data, other.shape)))
        return Tensor._make(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other, self.dtype)
        def bw(g):
            return ((self, _unbroadcast(g / other.data, self.shape)),
                    (other, _unbroadcast(-g * self.data / (other.data * other.data), other.shape)))
        return Tensor._make(self.data / other.data, (self, other), bw)

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __neg__(self):
        def bw(g):
            return ((self, -g),)
        return Tensor._make(-self.data, (self,), bw)

    def __pow__(self, p):
        p = float(p)
        def bw(g):
            return ((self, g * p * self.data ** (p - 1.0)),)
        return Tensor._make(self.data ** p, (self,), bw)

    def exp(self):
        out_data = np.exp(self.data)
        def bw(g):
            return ((self, g * out_data),)
        return Tensor._make(out_data, (self,), bw)

    def log(self):
        def bw(g):
            return ((self, g / self.data),)
        return Tensor._make(np.log(self.data), (self,), bw)

    def sqrt(self):
        out_data = np.sqrt(self.data)
        def bw(g):
            return ((self, g * 0.5 / out_data),)
        return Tensor._make(out_data, (self,), bw)

    def abs(self):
        # subgradient 0 at the kink
        def bw(g):
            return ((self, g * np.sign(self.data)),)
        return Tensor._make(np.abs(self.data), (self,), bw)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bw(g):
            if axis is None:
                return ((self, np.broadcast_to(g, self.shape).copy()),)
            gx = g if keepdims else np.expand_dims(g, axis)
            return ((self, np.broadcast_to(gx, self.shape).copy()),)
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def max(self, axis=None, keepdims=False):
        if axis is None:
            axes = tuple(range(self.ndim))
        elif isinstance(axis, tuple):
            axes = tuple(a % self.ndim for a in axis)
        else:
            axes = (axis % self.ndim,)
        kd_shape = tuple(1 if a in axes else n for a, n in enumerate(self.shape))
        out_data = self.data.max(axis=axis, keepdims=keepdims)

        def bw(g):
            # route gradient to the first maximum only (row-major order)
            keep_axes = tuple(a for a in range(self.ndim) if a not in axes)
            perm = keep_axes + axes
            moved = self.data.transpose(perm)
            flat = moved.reshape(moved.shape[:len(keep_axes)] + (-1,))
            first = np.zeros(flat.shape, dtype=bool)
            np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
            mask = first.reshape(moved.shape).transpose(np.argsort(perm))
            return ((self, mask * np.asarray(g).reshape(kd_shape)),)
        return Tensor._make(out_data, (self,), bw)

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        def bw(g):
            return ((self, g.reshape(old)),)
        return Tensor._make(self.data.reshape(shape), (self,), bw)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        def bw(g):
            return ((self, g.transpose(inv)),)
        return Tensor._make(self.data.transpose(axes), (self,), bw)

    def __getitem__(self, idx):
        out_data = self.data[idx]
        def bw(g):
            gx = np.zeros_like(self.data)
            np.add.at(gx, idx, g)
            return ((self, gx),)
        return Tensor._make(out_data, (self,), bw)

    # -- linear algebra ----------------------------------------------------

    def matmul(self, other):
        other = Tensor._coerce(other, self.dtype)
        a, b = self.data, other.data
        def bw(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return ((self, _unbroadcast(ga, a.shape)),
                    (other, _unbroadcast(gb, b.shape)))
        return Tensor._make(a @ b, (self, other), bw)

    __matmul__ = matmul

    def item(self):
        return float(self.data.reshape(()))


# -- free functions --------------------------------------------------------


def relu(x):
    x = Tensor._coerce(x)
    def bw(g):
        return ((x, g * (x.data > 0)),)
    return Tensor._make(np.maximum(x.data, 0.0), (x,), bw)


def sigmoid(x):
    x = Tensor._coerce(x)
    out_data = 1.0 / (1.0 + np.exp(-x.data))
    def bw(g):
        return ((x, g * out_data * (1.0 - out_data)),)
    return Tensor._make(out_data, (x,), bw)


def softmax(x, axis=-1):
    x = Tensor._coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((x, out_data * (g - dot)),)
    return Tensor._make(out_data, (x,), bw)


def log_softmax(x, axis=-1):
    x = Tensor._coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    def bw(g):
        return ((x, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True)),)
    return Tensor._make(out_data, (x,), bw)


def l2_normalize(x, axis=-1, eps=1e-12):
    """x / max(||x||2, eps) along `axis`; eps guards the zero vector."""
    x = Tensor._coerce(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out_data = x.data / denom
    def bw(g):
        live = norm > eps  # below eps the denominator is constant
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((x, (g - np.where(live, dot * out_data, 0.0)) / denom),)
    return Tensor._make(out_data, (x,), bw)


def concat(tensors, axis=0):
    tensors = [Tensor._coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return tuple(out)
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def _im2col(x, k, stride, padding):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, k, k)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of x[N,C,H,W] with weight[O,C,k,k].

    Output spatial size is (H + 2*padding - k)//stride + 1.
    """
    x = Tensor._coerce(x)
    weight = Tensor._coerce(weight)
    bias = Tensor._coerce(bias) if bias is not None else None
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if k != k2:
        raise ValueError("conv2d supports square kernels only")
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(o, c * k * k)
    out_data = np.matmul(wmat, cols)  # (n, o, ho*wo)
    if bias is not None:
        out_data = out_data + bias.data[:, None]
    out_data = out_data.reshape(n, o, ho, wo)

    def bw(g):
        gmat = g.reshape(n, o, ho * wo)
        gw = np.einsum("nol,ncl->oc", gmat, cols).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gmat)  # (n, c*k*k, ho*wo)
        gcols = gcols.reshape(n, c, k, k, ho, wo)
        hp, wp = h + 2 * padding, w + 2 * padding
        gx = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        if padding:
            gx = gx[:, :, padding:hp - padding, padding:wp - padding]
        grads = [(x, gx), (weight, gw)]
        if bias is not None:
            grads.append((bias, gmat.sum(axis=(0, 2))))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out_data, parents, bw)


def maxpool2d(x, kernel):
    """Max pooling with kernel == stride (the only case the backbone uses)."""
    x = Tensor._coerce(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"maxpool2d: spatial dims {h}x{w} not divisible by {kernel}")
    ho, wo = h // kernel, w // kernel
    tiles = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    tiles = tiles.reshape(n, c, ho, wo, kernel * kernel)
    idx = tiles.argmax(axis=-1)  # first max: deterministic tie-break
    out_data = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gt = np.zeros_like(tiles)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        gt = gt.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        return ((x, gt.reshape(n, c, h, w)),)

    return Tensor._make(out_data, (x,), bw)


def _lerp_matrix(n_out, n_in, dtype):
    """Dense (n_out, n_in) bilinear interpolation matrix, half-pixel convention."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    np.add.at(a, (np.arange(n_out), i0), 1.0 - f)
    np.add.at(a, (np.arange(n_out), i1), f)
    return a


def upsample_bilinear(x, out_h, out_w):
    """Bilinear resize of x[N,C,H,W]; sample points follow the half-pixel
    (pixel-center) convention used by the rest of the artifact."""
    x = Tensor._coerce(x)
    n, c, h, w = x.shape
    ay = _lerp_matrix(out_h, h, x.data.dtype)
    ax = _lerp_matrix(out_w, w, x.data.dtype)
    out_data = np.einsum("oh,nchw,pw->ncop", ay, x.data, ax, optimize=True)

    def bw(g):
        return ((x, np.einsum("oh,ncop,pw->nchw", ay, g, ax, optimize=True)),)

    return Tensor._make(out_data, (x,), bw)


# -- checkpoint format ------------------------------------------------------

CHECKPOINT_MAGIC = b"ALIKEKIT1"


def save_checkpoint(path, tensors):
    """Write named arrays: magic, then per-tensor name, rank, extents (u64 LE)
    and float32 data."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in tensors.items():
            arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint back as a dict of float32 arrays."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: bad checkpoint magic at byte 0")
    pos = len(CHECKPOINT_MAGIC)
    out = {}
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise ValueError(f"{path}: truncated record header at byte {pos}")
        (nlen,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        end = pos + 4 * count
        if end > len(blob):
            raise ValueError(f"{path}: truncated tensor data at byte {pos}")
        out[name] = np.frombuffer(blob[pos:end], dtype="<f4").reshape(shape).copy()
        pos = end
    return out
