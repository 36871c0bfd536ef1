"""Full segmentation network: stem, four encoder stages (gated spatial conv,
tri-directional sequence fusion, rational feed-forward), strided downsampling,
a U-shaped decoder, the pooled visual embedding path, and a text-conditioned
segmentation head.

Head design note: class identity enters only through text vectors. For each
class, a small MLP maps [class vector, pooled image context] to the weights of
a per-class two-layer 1x1x1 conv head applied to the decoder features. This
makes class channels exactly equivariant to row permutations of the embedding
matrix and lets one trained model address any class set with vectors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .blocks import ConvBlock, GatedSpatialConv, KanLayer, TriMamba
from .module import Linear, Module, he_normal
from .ssm import SSMConfig
from .tensor import Tensor


@dataclass
class NetworkConfig:
    dims: tuple = (48, 96, 192, 384)
    input_size: tuple = (96, 96, 96)
    in_channels: int = 1
    num_classes: int = 2
    stem_kernel: int = 7
    stem_stride: int = 2
    embed_dim: int = 512
    visual_hidden: int = 768
    visual_groups: int = 8
    head_hidden: int = 256
    head_mid: int = 8
    kan_expansion: int = 4
    kan_groups: int = 8
    dropout: float = 0.0
    ssm: SSMConfig = field(default_factory=SSMConfig)

    def __post_init__(self):
        if len(self.dims) != 4:
            raise ValueError("exactly four encoder stages are supported")
        if isinstance(self.ssm, dict):
            self.ssm = SSMConfig(**self.ssm)
        self.dims = tuple(self.dims)
        self.input_size = tuple(self.input_size)


def paper_config(num_classes=2, **overrides) -> NetworkConfig:
    return NetworkConfig(num_classes=num_classes, **overrides)


def desk_config(num_classes=3, **overrides) -> NetworkConfig:
    defaults = dict(dims=(4, 8, 16, 32), input_size=(32, 32, 32), visual_hidden=64, head_hidden=64)
    defaults.update(overrides)
    return NetworkConfig(num_classes=num_classes, **defaults)


def _conv_out(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def shape_plan(config: NetworkConfig):
    """Spatial extents and channels after the stem and each encoder stage.

    Returns {"stem": (C, (D,H,W)), "stages": [(C, (D,H,W)) x4]}. Extents are
    derived from the actual conv arithmetic, then checked against the halving
    contract extent_l == input / 2^(l+1).
    """
    size = config.input_size
    stem_out = tuple(_conv_out(s, config.stem_kernel, config.stem_stride, config.stem_kernel // 2) for s in size)
    plan = {"stem": (config.dims[0], stem_out), "stages": []}
    cur = stem_out
    for i, c in enumerate(config.dims):
        plan["stages"].append((c, cur))
        expected = tuple(s // 2 ** (i + 1) for s in size)
        if cur != expected:
            raise ValueError(
                f"stage {i} extent {cur} breaks the halving contract {expected} for input {size}"
            )
        if i < 3:
            cur = tuple(_conv_out(s, 3, 2, 1) for s in cur)
    return plan


@dataclass
class SegmentationOutput:
    logits: Tensor               # (B, K, D, H, W)
    masks: np.ndarray            # sigmoid(logits) > 0.5
    presence_similarity: Tensor  # (B, K) cosine row against description vectors

    def __post_init__(self):
        if not np.all(np.isfinite(self.logits.data)):
            raise FloatingPointError("non-finite segmentation logits")


class Stem(Module):
    def __init__(self, in_channels, out_channels, kernel, stride, rng, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        fan_in = in_channels * kernel**3
        self.weight = Tensor(
            he_normal(rng, fan_in, (out_channels, in_channels, kernel, kernel, kernel), dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.gamma = Tensor(np.ones(out_channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.alpha = Tensor(np.full(out_channels, 0.25, dtype=dtype), requires_grad=True)
        self.kernel, self.stride = kernel, stride

    def __call__(self, x):
        h = T.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.kernel // 2)
        h = T.instance_norm(h, self.gamma, self.beta)
        return T.prelu(h, self.alpha)


class Downsample(Module):
    """Strided conv halving spatial extent while changing channel width."""

    def __init__(self, c_in, c_out, rng, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.weight = Tensor(he_normal(rng, c_in * 27, (c_out, c_in, 3, 3, 3), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.conv3d(x, self.weight, self.bias, stride=2, padding=1)


class ChannelNorm(Module):
    """Layer norm over the channel axis of (B, C, D, H, W)."""

    def __init__(self, channels, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, axis=1)


class EncoderStage(Module):
    """One refinement stage: spatial block, then normalized sequence fusion
    with residual, then the normalized rational feed-forward with residual.

    Fresh stages reduce to the spatial block alone: both the fusion and the
    feed-forward start as zero maps.
    """

    def __init__(self, channels, rng, config: NetworkConfig, dtype=None):
        super().__init__()
        self.spatial = GatedSpatialConv(channels, rng, dtype)
        self.norm_seq = ChannelNorm(channels, dtype)
        self.fusion = TriMamba(channels, rng, config.ssm, dtype)
        self.norm_ffn = ChannelNorm(channels, dtype)
        self.ffn = KanLayer(channels, rng, config.kan_expansion, config.kan_groups, config.dropout, dtype)

    def __call__(self, z):
        hat = self.spatial(z)
        mid = self.fusion(self.norm_seq(hat)) + hat
        return self.ffn(self.norm_ffn(mid)) + mid


class DecoderUnit(Module):
    """conv3 -> instance norm -> PReLU, possibly changing channel width."""

    def __init__(self, c_in, c_out, rng, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.weight = Tensor(he_normal(rng, c_in * 27, (c_out, c_in, 3, 3, 3), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.gamma = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.alpha = Tensor(np.full(c_out, 0.25, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        h = T.conv3d(x, self.weight, self.bias, stride=1, padding=1)
        h = T.instance_norm(h, self.gamma, self.beta)
        return T.prelu(h, self.alpha)


class Upsample(Module):
    """Transpose conv doubling the spatial extent."""

    def __init__(self, c_in, c_out, rng, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.weight = Tensor(he_normal(rng, c_in * 8, (c_in, c_out, 2, 2, 2), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.conv_transpose3d(x, self.weight, self.bias)


class Decoder(Module):
    """U-shaped decoder over the four stage outputs (deepest acts as bottom).

    Three levels upsample and fuse a skip; the final level upsamples to full
    resolution without one (no full-resolution encoder feature exists).
    """

    def __init__(self, dims, rng, dtype=None):
        super().__init__()
        d0, d1, d2, d3 = dims
        self.up3 = Upsample(d3, d2, rng, dtype)
        self.fuse3 = [DecoderUnit(2 * d2, d2, rng, dtype), DecoderUnit(d2, d2, rng, dtype)]
        self.up2 = Upsample(d2, d1, rng, dtype)
        self.fuse2 = [DecoderUnit(2 * d1, d1, rng, dtype), DecoderUnit(d1, d1, rng, dtype)]
        self.up1 = Upsample(d1, d0, rng, dtype)
        self.fuse1 = [DecoderUnit(2 * d0, d0, rng, dtype), DecoderUnit(d0, d0, rng, dtype)]
        self.up0 = Upsample(d0, d0, rng, dtype)
        self.fuse0 = [DecoderUnit(d0, d0, rng, dtype), DecoderUnit(d0, d0, rng, dtype)]

    def __call__(self, skips):
        s0, s1, s2, bottom = skips
        x = self.up3(bottom)
        if x.shape != s2.shape:
            raise ValueError(f"skip shape mismatch: {x.shape} vs {s2.shape}")
        x = self.fuse3[1](self.fuse3[0](T.concat([x, s2], axis=1)))
        x = self.up2(x)
        x = self.fuse2[1](self.fuse2[0](T.concat([x, s1], axis=1)))
        x = self.up1(x)
        x = self.fuse1[1](self.fuse1[0](T.concat([x, s0], axis=1)))
        x = self.up0(x)
        return self.fuse0[1](self.fuse0[0](x))


class VisualEmbed(Module):
    """Bottom features -> pooled visual vector matching the text width."""

    def __init__(self, c_in, hidden, out_dim, groups, rng, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.hidden_w = Tensor(he_normal(rng, c_in, (hidden, c_in, 1, 1, 1), dtype), requires_grad=True)
        self.hidden_b = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.gamma = Tensor(np.ones(hidden, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.out_w = Tensor(he_normal(rng, hidden, (out_dim, hidden, 1, 1, 1), dtype), requires_grad=True)
        self.out_b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
        self.groups = groups

    def __call__(self, bottom):
        h = T.conv3d(bottom, self.hidden_w, self.hidden_b)
        h = T.relu(T.group_norm(h, self.gamma, self.beta, self.groups))
        h = T.adaptive_avg_pool3d_to_1(h)
        h = T.conv3d(h, self.out_w, self.out_b)
        return T.reshape(h, (h.shape[0], h.shape[1]))


class SegHead(Module):
    """Generates per-class 1x1x1 conv heads from text vectors.

    The MLP output vector packs, in order: w1 (c_dec*mid), b1 (mid), w2 (mid),
    b2 (1); the generated head computes w2 . relu(w1 . feat + b1) + b2 per
    voxel. Classes are processed independently by the same MLP, so permuting
    embedding rows permutes logit channels bit-exactly.
    """

    def __init__(self, c_dec, embed_dim, hidden, mid, rng, dtype=None):
        super().__init__()
        self.c_dec, self.mid = c_dec, mid
        self.n_generated = c_dec * mid + mid + mid + 1
        self.fc1 = Linear(embed_dim + c_dec, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, self.n_generated, rng, dtype=dtype)
        self.fc2.weight.data *= 0.1  # keep generated heads small at init

    def __call__(self, dec, embeds: np.ndarray):
        b, c = dec.shape[0], dec.shape[1]
        if c != self.c_dec:
            raise ValueError(f"decoder width {c} != head width {self.c_dec}")
        dhw = dec.shape[2:]
        context = T.reshape(T.adaptive_avg_pool3d_to_1(dec), (b, c))
        voxels = T.permute(T.reshape(dec, (b, c, -1)), (0, 2, 1))  # (B, V, C)
        mid = self.mid
        logits = []
        for k in range(embeds.shape[0]):
            e_k = Tensor(np.broadcast_to(embeds[k].astype(dec.dtype.type), (b, embeds.shape[1])).copy())
            theta = self.fc2(T.relu(self.fc1(T.concat([e_k, context], axis=1))))
            w1 = T.reshape(T.getitem(theta, (slice(None), slice(0, c * mid))), (b, c, mid))
            b1 = T.reshape(T.getitem(theta, (slice(None), slice(c * mid, c * mid + mid))), (b, 1, mid))
            w2 = T.reshape(T.getitem(theta, (slice(None), slice(c * mid + mid, c * mid + 2 * mid))), (b, mid, 1))
            b2 = T.reshape(T.getitem(theta, (slice(None), slice(c * mid + 2 * mid, None))), (b, 1, 1))
            h = T.relu(T.matmul(voxels, w1) + b1)
            logits.append(T.reshape(T.matmul(h, w2) + b2, (b, 1) + dhw))
        return T.concat(logits, axis=1)


class SegNetwork(Module):
    """End-to-end text-driven volumetric segmentation model."""

    def __init__(self, config: NetworkConfig, seed=0, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.config = config
        self.plan = shape_plan(config)  # construction-time shape contract
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
        d = config.dims
        self.stem = Stem(config.in_channels, d[0], config.stem_kernel, config.stem_stride, rng, dtype)
        self.stages = [EncoderStage(c, rng, config, dtype) for c in d]
        self.downs = [Downsample(d[i], d[i + 1], rng, dtype) for i in range(3)]
        self.decoder = Decoder(d, rng, dtype)
        self.visual = VisualEmbed(d[3], config.visual_hidden, config.embed_dim, config.visual_groups, rng, dtype)
        self.head = SegHead(d[0], config.embed_dim, config.head_hidden, config.head_mid, rng, dtype)

    def encoder_features(self, x):
        """The four stage outputs; the last is the bottom feature map."""
        z = self.stem(x)
        skips = []
        for i, stage in enumerate(self.stages):
            z = stage(z)
            skips.append(z)
            if i < 3:
                z = self.downs[i](z)
        return skips

    def forward(self, x, label_embeds: np.ndarray, desc_embeds: np.ndarray) -> SegmentationOutput:
        from .textbridge import similarity_matrix

        k = self.config.num_classes
        if label_embeds.shape != (k, self.config.embed_dim) or desc_embeds.shape != (k, self.config.embed_dim):
            raise ValueError(
                f"need ({k}, {self.config.embed_dim}) label and description embeddings, "
                f"got {label_embeds.shape} and {desc_embeds.shape}"
            )
        skips = self.encoder_features(x)
        dec = self.decoder(skips)
        logits = self.head(dec, label_embeds)
        f_v = self.visual(skips[-1])
        sim = similarity_matrix(f_v, Tensor(desc_embeds.astype(x.dtype.type)))
        masks = (logits.data > 0.0).astype(np.float64)  # sigmoid(x) > 0.5 iff x > 0
        return SegmentationOutput(logits=logits, masks=masks, presence_similarity=sim)

    __call__ = forward


# -- checkpoint container -----------------------------------------------------------
#
# Single file: one JSON header line {"format", "config", "extra", "tensors":
# [{"name", "shape", "dtype", "offset", "nbytes"}]}, then raw little-endian
# buffers at the stated offsets (relative to the end of the header line).

CHECKPOINT_FORMAT = "triseg-checkpoint-v1"
_CKPT_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, model: SegNetwork, extra: dict | None = None, extra_tensors: dict | None = None):
    tensors = {name: p.data for name, p in model.named_parameters()}
    if extra_tensors:
        tensors.update({name: np.asarray(v) for name, v in extra_tensors.items()})
    manifest = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        dtype = str(arr.dtype)
        if dtype not in _CKPT_DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {dtype} for {name}")
        blob = np.ascontiguousarray(arr).astype(_CKPT_DTYPES[dtype]).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    cfg = asdict(model.config)
    header = {"format": CHECKPOINT_FORMAT, "config": cfg, "extra": extra or {}, "tensors": manifest}
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path):
    """Returns (config dict, {name: array}, extra dict)."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        body = f.read()
    tensors = {}
    for item in header["tensors"]:
        raw = body[item["offset"] : item["offset"] + item["nbytes"]]
        arr = np.frombuffer(raw, dtype=_CKPT_DTYPES[item["dtype"]]).reshape(item["shape"])
        tensors[item["name"]] = arr.astype(item["dtype"])
    return header["config"], tensors, header.get("extra", {})


def load_checkpoint(path) -> tuple:
    """Rebuild the model from a checkpoint; returns (model, extra dict, leftovers).

    Leftovers are non-model tensors (e.g. optimizer state) keyed by name.
    """
    cfg_dict, tensors, extra = read_checkpoint(path)
    cfg_dict = dict(cfg_dict)
    cfg = NetworkConfig(**cfg_dict)
    dtype = None
    for name, arr in tensors.items():
        if not name.startswith("optim."):
            dtype = arr.dtype
            break
    model = SegNetwork(cfg, seed=0, dtype=dtype)
    leftovers = {}
    model_names = dict(model.named_parameters())
    for name, arr in tensors.items():
        if name in model_names:
            if tuple(model_names[name].shape) != tuple(arr.shape):
                raise ValueError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {model_names[name].shape}")
            model_names[name].data = arr.copy()
        else:
            leftovers[name] = arr
    missing = set(model_names) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]} ...")
    return model, extra, leftovers
