"""Finite-difference gradient verification and the registered check suite.

The checker is the independent oracle for every differentiable op and block:
central differences on sampled coordinates against the analytic backward pass.
Relative error metric: |analytic - numeric| / max(1, |numeric|).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    per_leaf: dict = field(default_factory=dict)
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def finite_difference_check(build, leaves, h=1e-3, samples=6, rng=None, name="check", tol=1e-4):
    """Compare analytic gradients of a scalar `build()` against central differences.

    `build` must recompute the scalar loss from the current `.data` of each
    leaf tensor on every call (deterministically). Coordinates are sampled per
    leaf; large leaves are spot-checked rather than swept.

    Coordinates whose one-sided slopes disagree are skipped: a kink (ReLU,
    PReLU, |x|) inside [x-h, x+h] makes the central difference meaningless
    there. A wrong analytic gradient still fails, since its one-sided slopes
    agree with each other while disagreeing with the backward pass.
    """
    rng = rng or np.random.default_rng(0)
    loss = build()
    if loss.size != 1:
        raise ValueError("gradcheck target must be scalar")
    for leaf in leaves:
        leaf.zero_grad()
    loss.backward()
    analytic = [np.array(leaf.grad, copy=True) for leaf in leaves]
    f_zero = loss.item()

    worst = 0.0
    per_leaf = {}
    skipped = 0
    for li, leaf in enumerate(leaves):
        n = leaf.size
        coords = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        flat = leaf.data.reshape(-1)
        errs = []
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            f_plus = build().item()
            flat[c] = keep - h
            f_minus = build().item()
            flat[c] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[li].reshape(-1)[c]
            denom = max(1.0, abs(numeric))
            rel = abs(a - numeric) / denom
            slope_r = (f_plus - f_zero) / h
            slope_l = (f_zero - f_minus) / h
            disagree = abs(slope_r - slope_l) / denom
            # a kink inside [x-h, x+h] makes disagree the same order as rel
            # (exactly 2*rel for piecewise-linear paths); a wrong gradient
            # through smooth code leaves disagree ~ h*|f''|, orders smaller
            if rel >= tol and disagree >= 0.3 * rel:
                skipped += 1
                continue
            errs.append(rel)
        leaf_err = max(errs) if errs else 0.0
        per_leaf[f"leaf{li}"] = leaf_err
        worst = max(worst, leaf_err)
    return CheckResult(name=name, max_rel_err=worst, tol=tol, per_leaf=per_leaf, skipped_kinks=skipped)


# -- registered suite ---------------------------------------------------------
#
# Each entry: (name, group, factory). factory(rng) -> (build, leaves, h, tol).
# Groups let the CLI run a subset (--module).

_REGISTRY: list = []


def register(name, group, factory):
    _REGISTRY.append((name, group, factory))


def registered(group=None):
    if group in (None, "all"):
        return list(_REGISTRY)
    return [e for e in _REGISTRY if e[1] == group]


def run_registered(group=None, trials=1, seed=0):
    """Run registered checks; returns list of CheckResult (trials per entry)."""
    results = []
    for t in range(trials):
        rng = np.random.default_rng(seed + 1000 * t)
        for name, _grp, factory in registered(group):
            build, leaves, h, tol = factory(rng)
            results.append(finite_difference_check(build, leaves, h=h, samples=5, rng=rng, name=name, tol=tol))
    return results


def _leaf(rng, shape, scale=1.0, offset=0.0):
    return Tensor(offset + scale * rng.standard_normal(shape), requires_grad=True)


def _elementwise_factory(op, offset=0.0):
    def factory(rng):
        x = _leaf(rng, (3, 4), offset=offset)
        return (lambda: op(x).sum()), [x], 1e-4, 1e-6

    return factory


def _register_core():
    register("add", "tensor", lambda rng: _binary(rng, T.add))
    register("mul", "tensor", lambda rng: _binary(rng, T.mul))
    register("div", "tensor", lambda rng: _binary(rng, T.div, denom_offset=3.0))
    register("exp", "tensor", _elementwise_factory(T.exp))
    register("log", "tensor", _elementwise_factory(T.log, offset=4.0))
    register("sqrt", "tensor", _elementwise_factory(T.sqrt, offset=4.0))
    register("sigmoid", "tensor", _elementwise_factory(T.sigmoid))
    register("gelu", "tensor", _elementwise_factory(T.gelu))
    register("silu", "tensor", _elementwise_factory(T.silu))
    register("softplus", "tensor", _elementwise_factory(T.softplus))
    register("relu", "tensor", _elementwise_factory(T.relu, offset=0.7))
    register("abs", "tensor", _elementwise_factory(T.tabs, offset=0.7))
    register("matmul", "tensor", _matmul_factory)
    register("prelu", "tensor", _prelu_factory)
    register("instance_norm", "tensor", _norm_factory("instance"))
    register("group_norm", "tensor", _norm_factory("group"))
    register("layer_norm", "tensor", _norm_factory("layer"))
    register("conv3d", "tensor", _conv_factory)
    register("conv_transpose3d", "tensor", _tconv_factory)


def _binary(rng, op, denom_offset=0.0):
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (3, 4), offset=denom_offset)
    return (lambda: op(a, b).sum()), [a, b], 1e-4, 1e-6


def _matmul_factory(rng):
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (4, 2))
    return (lambda: T.matmul(a, b).sum()), [a, b], 1e-4, 1e-6


def _prelu_factory(rng):
    x = _leaf(rng, (2, 3, 2, 2, 2))
    alpha = Tensor(np.full(3, 0.25), requires_grad=True)
    return (lambda: T.prelu(x, alpha).sum()), [x, alpha], 1e-4, 1e-6


def _norm_factory(kind):
    def factory(rng):
        x = _leaf(rng, (2, 4, 2, 3, 2))
        gamma = _leaf(rng, (4,), scale=0.2, offset=1.0)
        beta = _leaf(rng, (4,), scale=0.2)

        if kind == "instance":
            build = lambda: (T.instance_norm(x, gamma, beta) * T.Tensor(_probe(x.shape))).sum()
        elif kind == "group":
            build = lambda: (T.group_norm(x, gamma, beta, groups=2) * T.Tensor(_probe(x.shape))).sum()
        else:
            build = lambda: (T.layer_norm(x, gamma, beta, axis=1) * T.Tensor(_probe(x.shape))).sum()
        return build, [x, gamma, beta], 1e-4, 1e-6

    return factory


_PROBES: dict = {}


def _probe(shape):
    # fixed pseudorandom weights make sum-type losses sensitive to every output
    hit = _PROBES.get(shape)
    if hit is None:
        hit = np.random.default_rng(12345).standard_normal(shape)
        _PROBES[shape] = hit
    return hit


def _conv_factory(rng):
    x = _leaf(rng, (2, 2, 2, 2, 2))
    w = _leaf(rng, (2, 2, 3, 3, 3), scale=0.5)
    b = _leaf(rng, (2,), scale=0.5)
    return (lambda: (T.conv3d(x, w, b, stride=1, padding=1) * T.Tensor(_probe((2, 2, 2, 2, 2)))).sum()), [x, w, b], 1e-4, 1e-6


def _tconv_factory(rng):
    x = _leaf(rng, (1, 3, 2, 2, 2))
    w = _leaf(rng, (3, 2, 2, 2, 2), scale=0.5)
    b = _leaf(rng, (2,), scale=0.5)
    return (lambda: (T.conv_transpose3d(x, w, b) * T.Tensor(_probe((1, 2, 4, 4, 4)))).sum()), [x, w, b], 1e-4, 1e-6


def _egsc_factory(rng):
    from .blocks import GatedSpatialConv

    blk = GatedSpatialConv(2, rng)
    x = _leaf(rng, (1, 2, 3, 3, 3))
    probe = Tensor(rng.standard_normal((1, 2, 3, 3, 3)))
    return (lambda: (blk(x) * probe).sum()), [x] + blk.parameters(), 1e-3, 1e-4


def _mamba_factory(rng):
    from .ssm import MambaBlock

    blk = MambaBlock(4, rng)
    blk.out_proj.weight.data[:] = rng.standard_normal(blk.out_proj.weight.shape) * 0.3
    x = _leaf(rng, (1, 5, 4))
    probe = Tensor(rng.standard_normal((1, 5, 4)))
    return (lambda: (blk(x) * probe).sum()), [x] + blk.parameters(), 1e-3, 1e-4


def _scan_factory(rng):
    from .ssm import recurrent_scan

    a = Tensor(rng.uniform(0.2, 0.95, (1, 6, 2, 3)), requires_grad=True)
    b = _leaf(rng, (1, 6, 2, 3))
    c = _leaf(rng, (1, 6, 3))
    probe = Tensor(rng.standard_normal((1, 6, 2)))
    return (lambda: (recurrent_scan(a, b, c) * probe).sum()), [a, b, c], 1e-4, 1e-6


def _tom_factory(rng):
    from .blocks import TriMamba

    blk = TriMamba(2, rng)
    for m in (blk.fwd, blk.rev, blk.inter):
        m.out_proj.weight.data[:] = rng.standard_normal(m.out_proj.weight.shape) * 0.3
    x = _leaf(rng, (1, 2, 2, 2, 2))
    probe = Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
    return (lambda: (blk(x) * probe).sum()), [x] + blk.parameters(), 1e-3, 1e-4


def _kan_factory(rng):
    from .blocks import KanLayer

    blk = KanLayer(4, rng)
    blk.project.weight.data[:] = rng.standard_normal(blk.project.weight.shape) * 0.3
    x = _leaf(rng, (1, 4, 2, 2, 2))
    probe = Tensor(rng.standard_normal((1, 4, 2, 2, 2)))
    return (lambda: (blk(x) * probe).sum()), [x] + blk.parameters(), 1e-3, 1e-4


def _stem_factory(rng):
    from .network import Stem

    blk = Stem(1, 4, 7, 2, rng)
    x = _leaf(rng, (1, 1, 8, 8, 8))
    probe = Tensor(rng.standard_normal((1, 4, 4, 4, 4)))
    return (lambda: (blk(x) * probe).sum()), [x] + blk.parameters(), 1e-3, 1e-4


def _stage_factory(rng):
    from .network import EncoderStage, NetworkConfig

    cfg = NetworkConfig(dims=(2, 4, 8, 16), input_size=(16, 16, 16), visual_hidden=8, head_hidden=8)
    blk = EncoderStage(2, rng, cfg)
    blk.fusion.fwd.out_proj.weight.data[:] = rng.standard_normal(blk.fusion.fwd.out_proj.weight.shape) * 0.2
    blk.ffn.project.weight.data[:] = rng.standard_normal(blk.ffn.project.weight.shape) * 0.2
    x = _leaf(rng, (1, 2, 2, 2, 2))
    probe = Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
    leaves = [x] + blk.parameters()[::4]
    return (lambda: (blk(x) * probe).sum()), leaves, 1e-3, 1e-4


def _visual_factory(rng):
    from .network import VisualEmbed

    blk = VisualEmbed(4, 8, 6, 2, rng)
    x = _leaf(rng, (1, 4, 2, 2, 2))
    probe = Tensor(rng.standard_normal((1, 6)))
    return (lambda: (blk(x) * probe).sum()), [x] + blk.parameters(), 1e-3, 1e-4


def _head_factory(rng):
    from .network import SegHead

    blk = SegHead(3, 8, 8, 4, rng)
    dec = _leaf(rng, (1, 3, 2, 2, 2))
    embeds = rng.standard_normal((2, 8))
    probe = Tensor(rng.standard_normal((1, 2, 2, 2, 2)))
    return (lambda: (blk(dec, embeds) * probe).sum()), [dec] + blk.parameters(), 1e-3, 1e-4


def _decoder_factory(rng):
    from .network import Decoder

    blk = Decoder((2, 3, 4, 5), rng)
    skips = [
        _leaf(rng, (1, 2, 8, 8, 8)),
        _leaf(rng, (1, 3, 4, 4, 4)),
        _leaf(rng, (1, 4, 2, 2, 2)),
        _leaf(rng, (1, 5, 1, 1, 1)),
    ]
    probe = Tensor(rng.standard_normal((1, 2, 16, 16, 16)))
    leaves = skips + blk.parameters()[::5]
    return (lambda: (blk(skips) * probe).sum()), leaves, 1e-3, 1e-4


def _bce_factory(rng):
    from .metrics import bce_loss

    s = _leaf(rng, (2, 3))
    y = (rng.random((2, 3)) > 0.5) * 1.0
    return (lambda: bce_loss(s, y)), [s], 1e-4, 1e-6


def _dice_factory(rng):
    from .metrics import dice_loss

    s = _leaf(rng, (1, 2, 3, 3, 3))
    y = (rng.random((1, 2, 3, 3, 3)) > 0.5) * 1.0
    return (lambda: dice_loss(s, y)), [s], 1e-4, 1e-6


def _contrastive_factory(rng):
    from .textbridge import contrastive_loss

    s = _leaf(rng, (2, 4))
    y = (rng.random((2, 4)) > 0.5) * 1.0
    return (lambda: contrastive_loss(s, y)), [s], 1e-4, 1e-6


def _similarity_factory(rng):
    from .textbridge import similarity_matrix

    fv = _leaf(rng, (2, 6))
    ft = _leaf(rng, (3, 6))
    probe = Tensor(rng.standard_normal((2, 3)))
    return (lambda: (similarity_matrix(fv, ft) * probe).sum()), [fv, ft], 1e-4, 1e-5


def _total_loss_factory(rng):
    from .metrics import total_loss

    seg = _leaf(rng, (1, 2, 3, 3, 3))
    tgt = (rng.random((1, 2, 3, 3, 3)) > 0.5) * 1.0
    s = _leaf(rng, (1, 2), scale=0.5)
    y = np.array([[1.0, 0.0]])
    return (lambda: total_loss(seg, tgt, s, y)[0]), [seg, s], 1e-4, 1e-5


def _full_model_factory(rng):
    from .network import NetworkConfig, SegNetwork

    cfg = NetworkConfig(dims=(4, 8, 16, 32), input_size=(16, 16, 16), num_classes=2, visual_hidden=32, head_hidden=32)
    net = SegNetwork(cfg, seed=int(rng.integers(1 << 30)))
    x = Tensor(rng.random((1, 1, 16, 16, 16)), requires_grad=True)
    e1 = rng.standard_normal((2, 512))
    e2 = rng.standard_normal((2, 512))
    pp = Tensor(rng.standard_normal((1, 2, 16, 16, 16)))
    qq = Tensor(rng.standard_normal((1, 2)))

    def build():
        out = net(x, e1, e2)
        return (out.logits * pp).sum() + (out.presence_similarity * qq).sum()

    params = net.parameters()
    leaves = [x] + params[:: max(1, len(params) // 14)]
    # tight h: at 16^3 some activation always sits within a coarse step of its
    # kink, and those crossings would swamp the comparison
    return build, leaves, 1e-5, 1e-3


def _register_composites():
    register("recurrent_scan", "ssm", _scan_factory)
    register("mamba_block", "ssm", _mamba_factory)
    register("gated_spatial_conv", "blocks", _egsc_factory)
    register("tri_mamba", "blocks", _tom_factory)
    register("kan_layer", "blocks", _kan_factory)
    register("stem", "network", _stem_factory)
    register("encoder_stage", "network", _stage_factory)
    register("decoder", "network", _decoder_factory)
    register("visual_embed", "network", _visual_factory)
    register("seg_head", "network", _head_factory)
    register("full_model_tiny", "network", _full_model_factory)
    register("bce_loss", "metrics", _bce_factory)
    register("dice_loss", "metrics", _dice_factory)
    register("contrastive_loss", "metrics", _contrastive_factory)
    register("similarity_matrix", "metrics", _similarity_factory)
    register("total_loss", "metrics", _total_loss_factory)


def negative_control(rng=None):
    """A deliberately wrong backward pass; the checker must flag it."""
    rng = rng or np.random.default_rng(7)
    x = _leaf(rng, (3,))

    def bad_square(a):
        out_data = a.data * a.data

        def backward(g):
            a._accumulate(g * 3.0 * a.data)  # wrong factor on purpose

        return T._make(out_data, (a,), backward, "bad_square")

    return finite_difference_check(lambda: bad_square(x).sum(), [x], h=1e-4, name="negative_control", tol=1e-6)


_register_core()
_register_composites()
