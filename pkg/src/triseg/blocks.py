"""Spatial and sequence blocks: residual gated convolution, tri-orientation
flattening with sequence fusion, and the group-rational feed-forward layer.

The rational activation family is P(x)/Q(x) with numerator order 5 and the
safe denominator Q(x) = 1 + |b1 x + b2 x^2 + b3 x^3 + b4 x^4| >= 1, shared per
channel group. Coefficients are fitted to GELU at construction by an on-grid
least-squares solve, so the initialization itself is an auditable oracle.
"""

from __future__ import annotations

import math
from math import gcd

import numpy as np
from scipy.special import erf

from . import tensor as T
from .module import Linear, Module, he_normal
from .tensor import Tensor


# -- norm -> conv -> PReLU unit ---------------------------------------------------


class ConvBlock(Module):
    """Instance-norm, then conv (shape-preserving), then PReLU."""

    def __init__(self, channels, kernel, rng: np.random.Generator, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        fan_in = channels * kernel**3
        self.weight = Tensor(he_normal(rng, fan_in, (channels, channels, kernel, kernel, kernel), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.alpha = Tensor(np.full(channels, 0.25, dtype=dtype), requires_grad=True)
        self.kernel = kernel

    def __call__(self, x):
        h = T.instance_norm(x, self.gamma, self.beta)
        h = T.conv3d(h, self.weight, self.bias, stride=1, padding=self.kernel // 2)
        return T.prelu(h, self.alpha)


class GatedSpatialConv(Module):
    """Residual two-path spatial block applied before sequence flattening.

    out = z + C1(C3(C3(z)) + C1(z)), every C a norm/conv/PReLU unit. Zeroing
    the outer unit's conv makes the block an exact identity.
    """

    def __init__(self, channels, rng: np.random.Generator, dtype=None):
        super().__init__()
        self.conv3_a = ConvBlock(channels, 3, rng, dtype)
        self.conv3_b = ConvBlock(channels, 3, rng, dtype)
        self.conv1_side = ConvBlock(channels, 1, rng, dtype)
        self.conv1_out = ConvBlock(channels, 1, rng, dtype)

    def __call__(self, z):
        deep = self.conv3_b(self.conv3_a(z))
        side = self.conv1_side(z)
        return z + self.conv1_out(deep + side)


# -- tri-orientation flattening ----------------------------------------------------
#
# All three orderings are bijections of the voxel index set:
#   forward:     row-major over (D, H, W), W fastest
#   reverse:     position-reversal of forward
#   inter-slice: row-major over (H, W, D), D fastest (same-(h,w) runs adjacent)


def flatten_forward(z):
    b, c, d, h, w = z.shape
    return T.reshape(T.permute(z, (0, 2, 3, 4, 1)), (b, d * h * w, c))


def unflatten_forward(seq, dhw):
    b, L, c = seq.shape
    d, h, w = dhw
    return T.permute(T.reshape(seq, (b, d, h, w, c)), (0, 4, 1, 2, 3))


def flatten_reverse(z):
    return T.flip(flatten_forward(z), 1)


def unflatten_reverse(seq, dhw):
    return unflatten_forward(T.flip(seq, 1), dhw)


def flatten_interslice(z):
    b, c, d, h, w = z.shape
    return T.reshape(T.permute(z, (0, 3, 4, 2, 1)), (b, d * h * w, c))


def unflatten_interslice(seq, dhw):
    b, L, c = seq.shape
    d, h, w = dhw
    return T.permute(T.reshape(seq, (b, h, w, d, c)), (0, 4, 3, 1, 2))


def flatten_tri(z):
    """The three sequence views (B, L, C) of a volume feature map."""
    return flatten_forward(z), flatten_reverse(z), flatten_interslice(z)


class TriMamba(Module):
    """Three independent sequence blocks over the three orderings, unflattened
    and summed voxelwise. Unshared weights across directions."""

    def __init__(self, channels, rng: np.random.Generator, ssm_config=None, dtype=None):
        super().__init__()
        from .ssm import MambaBlock

        self.fwd = MambaBlock(channels, rng, ssm_config, dtype)
        self.rev = MambaBlock(channels, rng, ssm_config, dtype)
        self.inter = MambaBlock(channels, rng, ssm_config, dtype)

    def __call__(self, z):
        dhw = z.shape[2:]
        yf = unflatten_forward(self.fwd(flatten_forward(z)), dhw)
        yr = unflatten_reverse(self.rev(flatten_reverse(z)), dhw)
        ys = unflatten_interslice(self.inter(flatten_interslice(z)), dhw)
        return yf + yr + ys


# -- group-rational activation ----------------------------------------------------

GELU_FIT_GRID = (-3.0, 3.0, 0.01)
GELU_FIT_TOL = 0.01


def _gelu_np(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def fit_rational_to(fn, grid=GELU_FIT_GRID):
    """Least-squares fit of the order-(5,4) safe rational to `fn` on a grid.

    Solves the linearized system P(x) - fn(x) q(x) = fn(x) first; if the true
    max error (with the |q| denominator) misses GELU_FIT_TOL, refines on the
    exact residual. Returns (a[6], b[4], max_err).
    """
    lo, hi, step = grid
    x = np.arange(lo, hi + step / 2, step)
    g = fn(x)
    p_cols = np.stack([x**i for i in range(6)], axis=1)
    m = np.concatenate([p_cols, np.stack([-g * x**i for i in range(1, 5)], axis=1)], axis=1)
    theta, *_ = np.linalg.lstsq(m, g, rcond=None)

    def eval_err(t):
        a, b = t[:6], t[6:]
        q = x * (b[0] + x * (b[1] + x * (b[2] + x * b[3])))
        return np.max(np.abs(p_cols @ a / (1.0 + np.abs(q)) - g))

    err = eval_err(theta)
    if err >= GELU_FIT_TOL:
        from scipy.optimize import least_squares

        def resid(t):
            a, b = t[:6], t[6:]
            q = x * (b[0] + x * (b[1] + x * (b[2] + x * b[3])))
            return p_cols @ a / (1.0 + np.abs(q)) - g

        theta = least_squares(resid, theta, method="lm").x
        err = eval_err(theta)
    return theta[:6].copy(), theta[6:].copy(), float(err)


_GELU_FIT_CACHE: dict = {}


def gelu_rational_init(grid=GELU_FIT_GRID):
    hit = _GELU_FIT_CACHE.get(grid)
    if hit is None:
        a, b, err = fit_rational_to(_gelu_np, grid)
        if err >= GELU_FIT_TOL:
            raise RuntimeError(f"rational init failed its GELU bound: max err {err:.4g}")
        hit = (a, b, err)
        _GELU_FIT_CACHE[grid] = hit
    return hit


def rational_eval(x, num_coeffs, den_coeffs):
    """Elementwise P(x)/(1+|q(x)|) with coefficients broadcast over x.

    Tensor in, Tensor out; plain arrays are evaluated in numpy. Coefficient
    arrays carry a trailing axis per order: num (..., 6), den (..., 4), where
    leading axes broadcast against x (group sharing reshapes upstream).
    """
    if isinstance(x, Tensor):
        num = num_coeffs if isinstance(num_coeffs, Tensor) else Tensor(num_coeffs)
        den = den_coeffs if isinstance(den_coeffs, Tensor) else Tensor(den_coeffs)
        p = T.getitem(num, (..., 5))
        for i in (4, 3, 2, 1, 0):
            p = p * x + T.getitem(num, (..., i))
        q = T.getitem(den, (..., 3))
        for i in (2, 1, 0):
            q = q * x + T.getitem(den, (..., i))
        q = q * x
        return p / (1.0 + T.tabs(q))
    num = np.asarray(num_coeffs)
    den = np.asarray(den_coeffs)
    p = num[..., 5]
    for i in (4, 3, 2, 1, 0):
        p = p * x + num[..., i]
    q = den[..., 3]
    for i in (2, 1, 0):
        q = q * x + den[..., i]
    q = q * x
    return p / (1.0 + np.abs(q))


def resolve_groups(channels, groups):
    """Group count actually used: falls back to gcd when it does not divide."""
    return gcd(channels, groups)


class RationalGroupActivation(Module):
    """Learnable rational activation shared within channel groups.

    Operates on the trailing axis of its input. Initialized to approximate
    GELU; the fit bound is re-verified at construction.
    """

    def __init__(self, channels, groups=8, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.channels = channels
        self.groups = resolve_groups(channels, groups)
        a, b, self.init_fit_err = gelu_rational_init()
        self.num = Tensor(np.tile(a, (self.groups, 1)).astype(dtype), requires_grad=True)
        self.den = Tensor(np.tile(b, (self.groups, 1)).astype(dtype), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected trailing axis {self.channels}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        g = self.groups
        xg = T.reshape(x, lead + (g, self.channels // g))
        shape = (1,) * len(lead) + (g, 1, -1)
        y = rational_eval(xg, T.reshape(self.num, shape[:-1] + (6,)), T.reshape(self.den, shape[:-1] + (4,)))
        return T.reshape(y, x.shape)

    def denominator_min(self, xs: np.ndarray) -> float:
        """Smallest Q(x) over samples and groups; >= 1 by construction."""
        den = self.den.data  # (g, 4)
        q = den[:, 3]
        for i in (2, 1, 0):
            q = q * xs[..., None] + den[:, i]
        q = q * xs[..., None]
        return float(np.min(1.0 + np.abs(q)))


class KanLayer(Module):
    """Pointwise expand -> group-rational activation -> pointwise project.

    Flattens (B, C, D, H, W) to a voxel sequence, applies the two 1x1x1 linear
    maps around the shared rational activation, and reshapes back. The second
    linear is zero-initialized so the caller's residual starts as identity.
    Dropout slots sit after the activation and after the projection.
    """

    def __init__(self, channels, rng: np.random.Generator, expansion=4, groups=8, dropout=0.0, dtype=None):
        super().__init__()
        hidden = expansion * channels
        self.expand = Linear(channels, hidden, rng, dtype=dtype)
        self.act = RationalGroupActivation(hidden, groups, dtype=dtype)
        self.project = Linear(hidden, channels, rng, init="zeros", dtype=dtype)
        self.dropout_p = dropout
        self._rng = rng

    def __call__(self, z):
        b, c, d, h, w = z.shape
        seq = flatten_forward(z)
        hdn = self.act(self.expand(seq))
        hdn = T.dropout(hdn, self.dropout_p, self._rng, self.training)
        out = self.project(hdn)
        out = T.dropout(out, self.dropout_p, self._rng, self.training)
        return unflatten_forward(out, (d, h, w))
