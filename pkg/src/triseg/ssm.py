"""Selective state-space layer: discretization, scans, and the gated block.

The recurrence h_t = Abar_t * h_{t-1} + Bbar_t * x_t, y_t = Cbar_t . h_t is
implemented twice: an exact left-to-right loop (the correctness oracle) and an
O(L)-work Blelloch prefix scan over the associative composition
(a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2). State is diagonal per channel, so
all lanes vectorize. The block around it follows the usual gated layout:
in-projection, causal depthwise conv, selective scan, silu gate, out-projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .module import Linear, Module
from .tensor import Tensor


# -- discretization -----------------------------------------------------------


def zoh_discretize(a, b, delta, mode="simplified"):
    """Discretize continuous (A, B) with step delta.

    Diagonal-state form: Abar = exp(delta*A).  Bbar is delta*B in the
    "simplified" mode (standard selective-SSM practice) or the exact
    zero-order-hold (exp(delta*A)-1)/A * B in "full" mode (diagonal A only).
    Works on Tensors (differentiable) or plain arrays/scalars.
    """
    if mode not in ("simplified", "full"):
        raise ValueError(f"unknown discretization mode {mode!r}")
    tensorial = any(isinstance(v, Tensor) for v in (a, b, delta))
    if tensorial:
        a = a if isinstance(a, Tensor) else Tensor(a)
        b = b if isinstance(b, Tensor) else Tensor(b)
        delta = delta if isinstance(delta, Tensor) else Tensor(delta)
        if np.any(delta.data <= 0):
            raise ValueError("delta must be positive")
        abar = T.exp(delta * a)
        if mode == "simplified":
            bbar = delta * b
        else:
            bbar = (abar - 1.0) / a * b
        return abar, bbar
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    abar = np.exp(delta * a)
    bbar = delta * b if mode == "simplified" else (abar - 1.0) / a * b
    return abar, bbar


# -- scan kernels (numpy level) ------------------------------------------------


def _canon(arrs, x):
    """Align scan operands to (L, lanes..., N) with x as (L, lanes...).

    Operands may omit lane axes (e.g. Cbar as (L, N)); singleton lanes are
    inserted after the time axis so numpy broadcasting lines everything up.
    """
    arrs = [np.asarray(v, dtype=np.float64) for v in arrs]
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0] if x.ndim else max(a.shape[0] for a in arrs if a.ndim)
    out = []
    for a in arrs:
        if a.ndim == 0:
            a = np.broadcast_to(a, (L, 1))
        elif a.ndim == 1:
            a = a[:, None]
        if a.shape[0] != L:
            raise ValueError(f"time axis mismatch: expected {L}, got {a.shape[0]}")
        out.append(a)
    if x.ndim == 0:
        x = np.broadcast_to(x, (L,))
    if x.shape[0] != L:
        raise ValueError(f"time axis mismatch: expected {L}, got {x.shape[0]}")
    state_ndim = max(max(a.ndim for a in out), x.ndim + 1)
    out = [a.reshape(a.shape[:1] + (1,) * (state_ndim - a.ndim) + a.shape[1:]) for a in out]
    x = x.reshape(x.shape[:1] + (1,) * (state_ndim - 1 - x.ndim) + x.shape[1:])
    return out[0], out[1], out[2], x, L


def scan_sequential(abar, bbar, cbar, x, h0=None):
    """Exact recurrence oracle. Shapes: abar/bbar/cbar (L, ..., N), x (L, ...)."""
    abar, bbar, cbar, x, L = _canon((abar, bbar, cbar), x)
    b_in = bbar * x[..., None]
    full = np.broadcast_shapes(abar.shape, b_in.shape, cbar.shape)
    h = np.zeros(full[1:], dtype=np.float64)
    if h0 is not None:
        h = h + np.asarray(h0, dtype=np.float64)
    a_b = np.broadcast_to(abar, full)
    bi_b = np.broadcast_to(b_in, full)
    c_b = np.broadcast_to(cbar, full)
    y = np.empty(full[:-1], dtype=np.float64)
    for t in range(L):
        h = a_b[t] * h + bi_b[t]
        y[t] = (c_b[t] * h).sum(axis=-1)
    return y


def _blelloch(a, b):
    """In-place inclusive composition scan over axis 0 of (a, b) pairs.

    Returns arrays (A, B) with (A_t, B_t) = p_t o ... o p_1, i.e.
    h_t = A_t * h0 + B_t. Non-power-of-two lengths are padded with the
    identity element (1, 0).
    """
    L = a.shape[0]
    n = 1 << (L - 1).bit_length() if L > 1 else 1
    lane = a.shape[1:]
    A = np.ones((n,) + lane, dtype=a.dtype)
    B = np.zeros((n,) + lane, dtype=a.dtype)
    A[:L] = a
    B[:L] = b
    a_orig = A[:L].copy()
    b_orig = B[:L].copy()

    # up-sweep: right node absorbs left sibling (later o earlier)
    offset = 1
    while offset < n:
        step = 2 * offset
        r_a = A[step - 1 :: step]
        l_a = A[offset - 1 :: step][: r_a.shape[0]]
        r_b = B[step - 1 :: step]
        l_b = B[offset - 1 :: step][: r_b.shape[0]]
        r_b += r_a * l_b
        r_a *= l_a
        offset = step

    # down-sweep: distribute exclusive prefixes
    A[n - 1] = 1.0
    B[n - 1] = 0.0
    offset = n // 2
    while offset >= 1:
        step = 2 * offset
        r_a = A[step - 1 :: step]
        l_a = A[offset - 1 :: step][: r_a.shape[0]]
        r_b = B[step - 1 :: step]
        l_b = B[offset - 1 :: step][: r_b.shape[0]]
        tmp_a = l_a.copy()
        tmp_b = l_b.copy()
        l_a[...] = r_a
        l_b[...] = r_b
        r_a *= tmp_a  # left-subtree product composed after parent prefix
        r_b *= tmp_a
        r_b += tmp_b
        offset //= 2

    # exclusive -> inclusive: P_t = p_t o E_t
    inc_a = a_orig * A[:L]
    inc_b = a_orig * B[:L] + b_orig
    return inc_a, inc_b


def scan_parallel(abar, bbar, cbar, x, h0=None):
    """Same contract as scan_sequential via the associative prefix scan."""
    abar, bbar, cbar, x, L = _canon((abar, bbar, cbar), x)
    b_in = bbar * x[..., None]
    full = np.broadcast_shapes(abar.shape, b_in.shape, cbar.shape)
    a_b = np.ascontiguousarray(np.broadcast_to(abar, full))
    bi_b = np.ascontiguousarray(np.broadcast_to(b_in, full))
    inc_a, inc_b = _blelloch(a_b, bi_b)
    if h0 is not None:
        h = inc_a * np.asarray(h0, dtype=np.float64) + inc_b
    else:
        h = inc_b
    return (np.broadcast_to(cbar, full) * h).sum(axis=-1)


def scan_states_parallel(abar, b_in):
    """Hidden states h_t (zero initial state) via the prefix scan; lane shapes preserved."""
    _, inc_b = _blelloch(np.ascontiguousarray(abar), np.ascontiguousarray(b_in))
    return inc_b


# -- differentiable scan op ------------------------------------------------------


def recurrent_scan(abar: Tensor, b_in: Tensor, cbar: Tensor) -> Tensor:
    """Differentiable y_t = Cbar_t . h_t with h_t = Abar_t*h_{t-1} + b_in_t.

    Shapes: abar/b_in (B, L, D, N), cbar (B, L, N). Forward runs the parallel
    kernel; backward replays the reverse recurrence sequentially.
    """
    bs, L, d, n = abar.shape
    if b_in.shape != (bs, L, d, n):
        raise ValueError(f"b_in shape {b_in.shape} != {(bs, L, d, n)}")
    if cbar.shape != (bs, L, n):
        raise ValueError(f"cbar shape {cbar.shape} != {(bs, L, n)}")

    a_t = np.ascontiguousarray(abar.data.transpose(1, 0, 2, 3))  # (L, B, D, N)
    b_t = np.ascontiguousarray(b_in.data.transpose(1, 0, 2, 3))
    h_t = scan_states_parallel(a_t, b_t)  # (L, B, D, N)
    c_t = np.ascontiguousarray(cbar.data.transpose(1, 0, 2))  # (L, B, N)
    y = np.ascontiguousarray((h_t * c_t[:, :, None, :]).sum(axis=-1).transpose(1, 0, 2))

    def backward(g):
        # reverse-time replay: dh_t = c_t * g_t + a_{t+1} * dh_{t+1}
        gy = np.ascontiguousarray(g.transpose(1, 0, 2))  # (L, B, D)
        dh = np.zeros((bs, d, n), dtype=g.dtype)
        da = np.empty_like(a_t) if abar.requires_grad else None
        db = np.empty_like(b_t) if b_in.requires_grad else None
        dc = np.empty((L, bs, n), dtype=g.dtype) if cbar.requires_grad else None
        for t in range(L - 1, -1, -1):
            gy_t = gy[t][:, :, None]
            dh += c_t[t][:, None, :] * gy_t
            if dc is not None:
                dc[t] = (h_t[t] * gy_t).sum(axis=1)
            if da is not None:
                da[t] = dh * h_t[t - 1] if t > 0 else 0.0  # h before step 0 is zero
            if db is not None:
                db[t] = dh
            dh = a_t[t] * dh
        if abar.requires_grad:
            abar._accumulate(da.transpose(1, 0, 2, 3))
        if b_in.requires_grad:
            b_in._accumulate(db.transpose(1, 0, 2, 3))
        if cbar.requires_grad:
            cbar._accumulate(dc.transpose(1, 0, 2))

    return T._make(y, (abar, b_in, cbar), backward, "recurrent_scan")


def _scan_eval_chunked(abar, b_in, cbar, chunk=8192):
    """Buffer-only scan for long sequences: parallel per chunk, carried state."""
    L = abar.shape[1]
    bs, _, d, n = abar.shape
    y = np.empty((bs, L, d), dtype=abar.dtype)
    h0 = np.zeros((bs, d, n), dtype=abar.dtype)
    for lo in range(0, L, chunk):
        hi = min(L, lo + chunk)
        a_t = np.ascontiguousarray(abar[:, lo:hi].transpose(1, 0, 2, 3))
        b_t = np.ascontiguousarray(b_in[:, lo:hi].transpose(1, 0, 2, 3))
        inc_a, inc_b = _blelloch(a_t, b_t)
        h = inc_a * h0 + inc_b
        c_t = cbar[:, lo:hi].transpose(1, 0, 2)
        y[:, lo:hi] = (h * c_t[:, :, None, :]).sum(axis=-1).transpose(1, 0, 2)
        h0 = h[-1]
    return y


# -- causal depthwise conv over the sequence axis ----------------------------------


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution on (B, L, C); never reads future positions."""
    k = weight.shape[1]
    xp = T.pad(x, ((0, 0), (k - 1, 0), (0, 0)))
    L = x.shape[1]
    out = None
    for i in range(k):
        tap = T.getitem(xp, (slice(None), slice(i, i + L), slice(None)))
        term = tap * T.reshape(T.getitem(weight, (slice(None), i)), (1, 1, -1))
        out = term if out is None else out + term
    return out + T.reshape(bias, (1, 1, -1))


# -- the gated selective block ------------------------------------------------------


@dataclass
class SSMConfig:
    d_state: int = 16
    expand: int = 2
    conv_kernel: int = 4
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    selective: bool = True       # False = learned time-invariant delta/B/C
    zoh_mode: str = "simplified"  # "full" for exact diagonal ZOH
    eval_chunk: int = 8192        # time chunk for buffer-only long scans


class MambaBlock(Module):
    """Gated selective-scan block mapping (B, L, d_model) -> same shape.

    Out-projection is zero-initialized so a fresh block is the zero map and
    residual wiring starts as identity.
    """

    def __init__(self, d_model, rng: np.random.Generator, config: SSMConfig | None = None, dtype=None):
        super().__init__()
        from .tensor import default_dtype

        dtype = dtype or default_dtype()
        cfg = config or SSMConfig()
        self.config = cfg
        self.d_model = d_model
        self.d_inner = cfg.expand * d_model
        self.d_state = cfg.d_state
        self.dt_rank = max(1, math.ceil(d_model / 16))

        self.in_proj = Linear(d_model, 2 * self.d_inner, rng, bias=False, dtype=dtype)
        k = cfg.conv_kernel
        self.conv_weight = Tensor(
            rng.uniform(-1, 1, size=(self.d_inner, k)).astype(dtype) / math.sqrt(k), requires_grad=True
        )
        self.conv_bias = Tensor(np.zeros(self.d_inner, dtype=dtype), requires_grad=True)

        if cfg.selective:
            self.x_proj = Linear(self.d_inner, self.dt_rank + 2 * cfg.d_state, rng, bias=False, dtype=dtype)
            self.dt_proj = Linear(self.dt_rank, self.d_inner, rng, dtype=dtype)
            self.dt_proj.weight = Tensor(
                (rng.standard_normal((self.dt_rank, self.d_inner)) * self.dt_rank**-0.5).astype(dtype),
                requires_grad=True,
            )
        else:
            self.delta_raw = Tensor(np.zeros(self.d_inner, dtype=dtype), requires_grad=True)
            self.b_const = Tensor((rng.standard_normal((cfg.d_state,)) * 0.5).astype(dtype), requires_grad=True)
            self.c_const = Tensor((rng.standard_normal((cfg.d_state,)) * 0.5).astype(dtype), requires_grad=True)

        # softplus(bias) lands in [dt_min, dt_max] (log-uniform per channel)
        dt = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=self.d_inner))
        dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
        if cfg.selective:
            self.dt_proj.bias = Tensor(dt_bias.astype(dtype), requires_grad=True)
        else:
            self.delta_raw = Tensor(dt_bias.astype(dtype), requires_grad=True)

        # A = -exp(A_log) < 0 always; classic real-diagonal ladder init
        a_init = np.tile(np.arange(1, cfg.d_state + 1, dtype=np.float64), (self.d_inner, 1))
        self.a_log = Tensor(np.log(a_init).astype(dtype), requires_grad=True)
        self.d_skip = Tensor(np.ones(self.d_inner, dtype=dtype), requires_grad=True)
        self.out_proj = Linear(self.d_inner, d_model, rng, bias=False, init="zeros", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.d_model:
            raise ValueError(f"expected (B, L, {self.d_model}), got {x.shape}")
        bs, L, _ = x.shape
        cfg = self.config

        uz = self.in_proj(x)
        u = T.getitem(uz, (slice(None), slice(None), slice(0, self.d_inner)))
        z = T.getitem(uz, (slice(None), slice(None), slice(self.d_inner, 2 * self.d_inner)))
        u = T.silu(causal_conv1d(u, self.conv_weight, self.conv_bias))

        if cfg.selective:
            dbc = self.x_proj(u)
            dt_low = T.getitem(dbc, (slice(None), slice(None), slice(0, self.dt_rank)))
            b_seq = T.getitem(dbc, (slice(None), slice(None), slice(self.dt_rank, self.dt_rank + self.d_state)))
            c_seq = T.getitem(dbc, (slice(None), slice(None), slice(self.dt_rank + self.d_state, None)))
            delta = T.softplus(self.dt_proj(dt_low))  # (B, L, d_inner)
        else:
            delta = T.softplus(T.reshape(self.delta_raw, (1, 1, self.d_inner)))
            delta = delta + T.Tensor(np.zeros((bs, L, 1), dtype=x.dtype))
            b_seq = T.reshape(self.b_const, (1, 1, self.d_state)) + T.Tensor(np.zeros((bs, L, 1), dtype=x.dtype))
            c_seq = T.reshape(self.c_const, (1, 1, self.d_state)) + T.Tensor(np.zeros((bs, L, 1), dtype=x.dtype))

        a = T.neg(T.exp(self.a_log))  # (d_inner, N), strictly negative
        delta4 = T.reshape(delta, (bs, L, self.d_inner, 1))
        abar = T.exp(delta4 * T.reshape(a, (1, 1, self.d_inner, self.d_state)))
        if cfg.zoh_mode == "full":
            bbar = (abar - 1.0) / T.reshape(a, (1, 1, self.d_inner, self.d_state)) * T.reshape(
                b_seq, (bs, L, 1, self.d_state)
            )
        else:
            bbar = delta4 * T.reshape(b_seq, (bs, L, 1, self.d_state))
        b_in = bbar * T.reshape(u, (bs, L, self.d_inner, 1))

        if T.grad_enabled():
            y = recurrent_scan(abar, b_in, c_seq)
        else:
            y = Tensor(_scan_eval_chunked(abar.data, b_in.data, c_seq.data, chunk=cfg.eval_chunk))
        y = y + u * T.reshape(self.d_skip, (1, 1, self.d_inner))
        y = y * T.silu(z)
        return self.out_proj(y)
