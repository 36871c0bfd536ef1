"""Dense N-d tensor with reverse-mode automatic differentiation.

Covers exactly the operations the segmentation architecture needs: elementwise
math, matmul, shape moves (reshape/permute/flip/pad/slice/concat), 3-d
convolution and its transpose, normalizations, and the activations used by the
blocks. Buffers are row-major contiguous numpy arrays; f64 is the default so
verification suites have finite-difference headroom, training demos switch to
f32. No GPU kernels, no broadcasting beyond numpy's, no graph compiler.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf as _erf

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    """Set the dtype used by tensor factories (np.float32 or np.float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forwards run buffer-only (eval/inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-d value with an optional backward-graph record.

    Immutable after forward construction except the grad buffer. The graph is
    acyclic by construction; `backward` may be called once per loss tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op", "_done")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, _op=""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward
        self._op = _op
        self._done = False

    # -- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad}{tag})"

    # -- graph ----------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate dL/dθ into every reachable tensor with requires_grad."""
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward already called on this tensor; rebuild the graph first")
        self._done = True

        # iterative topo sort: graphs can exceed the recursion limit
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return powc(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # method aliases for the common chains
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def permute(self, *axes):
        return permute(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def flip(self, axes):
        return flip(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Adjoint of numpy broadcasting: reduce g back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ------------------------------------------------------


def add(a, b):
    a = _lift(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b):
    a = _lift(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b):
    a = _lift(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward, "mul")


def div(a, b):
    a = _lift(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward, "div")


def neg(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), backward, "neg")


def powc(a, exponent):
    if not isinstance(exponent, (int, float)):
        raise TypeError("only scalar exponents are supported")
    out_data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), backward, f"pow{exponent}")


def maximum(a, b):
    """Elementwise max; ties send the full gradient to `a` (subgradient pick)."""
    a = _lift(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _make(out_data, (a, b), backward, "maximum")


# -- elementwise unary -------------------------------------------------------


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, "exp")


def log(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward, "sqrt")


def tabs(a):
    sign = np.sign(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * sign)

    return _make(np.abs(a.data), (a,), backward, "abs")


def sigmoid(a):
    # stable two-sided form
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def relu(a):
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward, "relu")


def gelu(a):
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
    out_data = x * cdf

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            a._accumulate(g * (cdf + x * pdf))

    return _make(out_data, (a,), backward, "gelu")


def silu(a):
    x = a.data
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = x * sig

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (sig + x * sig * (1.0 - sig)))

    return _make(out_data, (a,), backward, "silu")


def softplus(a):
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        if a.requires_grad:
            sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a._accumulate(g * sig)

    return _make(out_data, (a,), backward, "softplus")


def prelu(a, alpha, channel_axis=1):
    """Parametric ReLU with a learnable slope per channel on `channel_axis`."""
    x = a.data
    cshape = [1] * x.ndim
    cshape[channel_axis] = alpha.data.shape[0]
    if alpha.data.ndim != 1 or x.shape[channel_axis] != alpha.data.shape[0]:
        raise ValueError(
            f"prelu alpha must be 1-d of size {x.shape[channel_axis]}, got shape {alpha.data.shape}"
        )
    alpha_b = alpha.data.reshape(cshape)
    pos = x > 0
    out_data = np.where(pos, x, alpha_b * x)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.where(pos, g, alpha_b * g))
        if alpha.requires_grad:
            axes = tuple(i for i in range(x.ndim) if i != channel_axis)
            alpha._accumulate((g * np.where(pos, 0.0, x)).sum(axis=axes))

    return _make(out_data, (a, alpha), backward, "prelu")


def dropout(a, p, rng: np.random.Generator, training: bool):
    """Inverted dropout; identity when eval or p == 0."""
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must be in [0, 1)")
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward, "dropout")


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full_like(a.data, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- linear algebra -------------------------------------------------------------


def matmul(a, b):
    a = _lift(a, getattr(b, "dtype", _DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward, "matmul")


# -- shape moves -------------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(shape)
    src_shape = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(src_shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def permute(a, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "permute")


def flip(a, axes):
    axes = (axes,) if isinstance(axes, int) else tuple(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.flip(g, axes))

    return _make(np.flip(a.data, axes).copy(), (a,), backward, "flip")


def pad(a, pad_width):
    """Zero padding; pad_width follows numpy's ((before, after), ...) form."""
    pad_width = tuple(tuple(p) for p in pad_width)
    slices = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, a.shape))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[slices])

    return _make(np.pad(a.data, pad_width), (a,), backward, "pad")


def getitem(a, key):
    out_data = a.data[key]
    if out_data.base is not None:
        out_data = out_data.copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g  # basic slicing only: indices never repeat
            a._accumulate(full)

    return _make(out_data, (a,), backward, "slice")


def concat(tensors, axis):
    tensors = [t for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


# -- 3-d convolution -------------------------------------------------------------

_ALLOWED_KERNELS = (1, 2, 3, 7)  # 2 only via conv_transpose pairing checks


def _conv3d_cols(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Gather im2col patches from a padded input: (B, P, Ci*k^3)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    b, ci, do, ho, wo = win.shape[:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b, do * ho * wo, ci * k * k * k)
    return np.ascontiguousarray(cols), (do, ho, wo)


_COL2IM_CACHE: dict = {}


def _col2im_indices(padded_shape, k, stride, out_dhw):
    """Flat scatter indices mapping (P, Ci*k^3) col entries into a padded volume."""
    key = (padded_shape, k, stride, out_dhw)
    hit = _COL2IM_CACHE.get(key)
    if hit is not None:
        return hit
    ci, dp, hp, wp = padded_shape[1:]
    do, ho, wo = out_dhw
    dd = np.arange(do) * stride
    hh = np.arange(ho) * stride
    ww = np.arange(wo) * stride
    kd, kh, kw = np.meshgrid(np.arange(k), np.arange(k), np.arange(k), indexing="ij")
    base_c = np.arange(ci) * (dp * hp * wp)
    # per output position: start offset into the (Ci,Dp,Hp,Wp) flat buffer
    pos = (dd[:, None, None] * (hp * wp) + hh[None, :, None] * wp + ww[None, None, :]).reshape(-1)
    ker = (kd * (hp * wp) + kh * wp + kw).reshape(-1)
    idx = pos[:, None] + (base_c[:, None] + ker[None, :]).reshape(-1)[None, :]
    idx = np.ascontiguousarray(idx, dtype=np.int64)  # (P, Ci*k^3)
    _COL2IM_CACHE[key] = idx
    return idx


def conv3d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x[B,Ci,D,H,W] with w[Co,Ci,k,k,k] (+bias[Co])."""
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5-d input and weight, got {x.shape} and {w.shape}")
    co, ci_w, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k):
        raise ValueError(f"conv3d kernel must be cubic, got {w.shape[2:]}")
    if k not in (1, 3, 7):
        raise ValueError(f"conv3d kernel size must be 1, 3, or 7, got {k}")
    if x.shape[1] != ci_w:
        raise ValueError(f"conv3d channel mismatch: input has {x.shape[1]}, weight expects {ci_w}")
    if b is not None and b.shape != (co,):
        raise ValueError(f"conv3d bias must have shape ({co},), got {b.shape}")

    record = _GRAD_ENABLED and (x.requires_grad or w.requires_grad or (b is not None and b.requires_grad))
    pw = ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pw) if padding else x.data
    wmat = w.data.reshape(co, -1)

    if record:
        cols, (do, ho, wo) = _conv3d_cols(xp, k, stride)
        out = cols @ wmat.T
        if b is not None:
            out = out + b.data
        bsz = x.shape[0]
        out_data = np.ascontiguousarray(out.reshape(bsz, do, ho, wo, co).transpose(0, 4, 1, 2, 3))

        def backward(g):
            gmat = g.transpose(0, 2, 3, 4, 1).reshape(bsz, do * ho * wo, co)
            if b is not None and b.requires_grad:
                b._accumulate(gmat.sum(axis=(0, 1)))
            if w.requires_grad:
                gw = np.einsum("bpo,bpc->oc", gmat, cols, optimize=True)
                w._accumulate(gw.reshape(w.shape))
            if x.requires_grad:
                gcols = gmat @ wmat  # (B, P, Ci*k^3)
                idx = _col2im_indices(xp.shape, k, stride, (do, ho, wo))
                gx = np.zeros((bsz, xp[0].size), dtype=g.dtype)
                for bi in range(bsz):
                    np.add.at(gx[bi], idx.ravel(), gcols[bi].ravel())
                gx = gx.reshape(xp.shape)
                if padding:
                    gx = gx[:, :, padding:-padding, padding:-padding, padding:-padding]
                x._accumulate(gx)

        parents = (x, w) if b is None else (x, w, b)
        return _make(out_data, parents, backward, "conv3d")

    # buffer-only path: stream depth slabs to bound im2col memory
    bsz, ci = xp.shape[0], xp.shape[1]
    dp = xp.shape[2]
    do = (dp - k) // stride + 1
    ho = (xp.shape[3] - k) // stride + 1
    wo = (xp.shape[4] - k) // stride + 1
    out_data = np.empty((bsz, co, do, ho, wo), dtype=x.dtype)
    budget = 24_000_000 // max(1, ho * wo * ci * k * k * k)  # slab rows ~= 24M scalars
    slab = max(1, budget)
    for d0 in range(0, do, slab):
        d1 = min(do, d0 + slab)
        lo = d0 * stride
        hi = (d1 - 1) * stride + k
        cols, (sd, sh, sw) = _conv3d_cols(xp[:, :, lo:hi], k, stride)
        seg = cols @ wmat.T
        if b is not None:
            seg = seg + b.data
        out_data[:, :, d0:d1] = seg.reshape(bsz, sd, sh, sw, co).transpose(0, 4, 1, 2, 3)
    return Tensor(out_data)


def conv_transpose3d(x, w, b=None, stride=2):
    """Transposed conv with kernel == stride (non-overlapping x2 upsampling)."""
    if stride != 2 or w.shape[2:] != (2, 2, 2):
        raise ValueError("conv_transpose3d supports kernel 2 / stride 2 only")
    ci, co = w.shape[0], w.shape[1]
    if x.shape[1] != ci:
        raise ValueError(f"conv_transpose3d channel mismatch: input {x.shape[1]}, weight {ci}")
    bsz, _, d, h, wd = x.shape
    out = np.einsum("bcdhw,coijk->bodihjwk", x.data, w.data, optimize=True)
    out_data = np.ascontiguousarray(out.reshape(bsz, co, 2 * d, 2 * h, 2 * wd))
    if b is not None:
        out_data += b.data.reshape(1, co, 1, 1, 1)

    def backward(g):
        gw = g.reshape(bsz, co, d, 2, h, 2, wd, 2)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if w.requires_grad:
            w._accumulate(np.einsum("bcdhw,bodihjwk->coijk", x.data, gw, optimize=True))
        if x.requires_grad:
            x._accumulate(np.einsum("bodihjwk,coijk->bcdhw", gw, w.data, optimize=True))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward, "conv_transpose3d")


# -- pooling ----------------------------------------------------------------------


def adaptive_avg_pool3d_to_1(x):
    """Mean over (D, H, W) per channel, keeping singleton spatial dims."""
    if x.ndim != 5:
        raise ValueError(f"expected 5-d input, got shape {x.shape}")
    return tmean(x, axis=(2, 3, 4), keepdims=True)


# -- normalizations ------------------------------------------------------------------

NORM_EPS = 1e-5


def _normalize(x, axes, eps):
    mu = tmean(x, axis=axes, keepdims=True)
    xc = x - mu
    var = tmean(xc * xc, axis=axes, keepdims=True)
    return xc / sqrt(var + eps)


def instance_norm(x, gamma, beta, eps=NORM_EPS):
    """Per-(sample, channel) normalization over spatial axes of [B,C,D,H,W]."""
    if x.ndim != 5:
        raise ValueError(f"instance_norm expects 5-d input, got {x.shape}")
    xh = _normalize(x, (2, 3, 4), eps)
    c = x.shape[1]
    return xh * reshape(gamma, (1, c, 1, 1, 1)) + reshape(beta, (1, c, 1, 1, 1))


def group_norm(x, gamma, beta, groups, eps=NORM_EPS):
    """Normalization over (C/groups, D, H, W) blocks of [B,C,D,H,W]."""
    if x.ndim != 5:
        raise ValueError(f"group_norm expects 5-d input, got {x.shape}")
    b, c = x.shape[0], x.shape[1]
    if c % groups != 0:
        raise ValueError(f"groups ({groups}) must divide channel count ({c})")
    xg = reshape(x, (b, groups, c // groups) + x.shape[2:])
    xh = _normalize(xg, (2, 3, 4, 5), eps)
    xh = reshape(xh, x.shape)
    return xh * reshape(gamma, (1, c, 1, 1, 1)) + reshape(beta, (1, c, 1, 1, 1))


def layer_norm(x, gamma, beta, axis=-1, eps=NORM_EPS):
    """Normalization over a single axis with per-position affine."""
    axis = axis % x.ndim
    xh = _normalize(x, (axis,), eps)
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return xh * reshape(gamma, shape) + reshape(beta, shape)
