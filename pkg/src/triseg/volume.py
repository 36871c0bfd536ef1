"""Volumetric data model, preprocessing pipeline, and synthetic dataset generator.

Volumes are spatially calibrated: a [1,D,H,W] intensity tensor plus voxel
spacing in mm and a signed-axis orientation code. On disk they live in a raw
container: one JSON header line (keys "shape", "spacing_mm", "orientation",
"dtype"), then little-endian scalars. Real scan-format ingestion (DICOM/NIfTI)
is out of scope; convert externally into this container.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

# orientation codes: one letter per spatial axis (D, H, W), each from an
# anatomical pair; the letter names the direction of increasing index
_AXIS_PAIRS = (("R", "L"), ("A", "P"), ("S", "I"))
_PAIR_OF = {"R": 0, "L": 0, "A": 1, "P": 1, "S": 2, "I": 2}


@dataclass
class Volume:
    data: Tensor  # [1, D, H, W]
    spacing_mm: tuple
    orientation: str = "RAS"

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 1:
            raise ValueError(f"Volume data must be [1,D,H,W], got {self.data.shape}")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")
        validate_orientation(self.orientation)

    @property
    def extents(self):
        return self.data.shape[1:]


@dataclass
class LabelVolume:
    data: Tensor  # [K, D, H, W] binary
    class_names: list

    def __post_init__(self):
        vals = np.unique(self.data.data)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError("label volume must be binary")
        if self.data.shape[0] != len(self.class_names):
            raise ValueError("class count mismatch between data and names")

    @property
    def num_classes(self):
        return self.data.shape[0]


@dataclass
class PreprocessConfig:
    target_spacing_mm: tuple = (1.5, 1.5, 1.5)
    intensity_window: tuple = (-175.0, 250.0)
    crop_size: tuple = (96, 96, 96)
    augment: bool = False
    zoom_range: tuple = (0.9, 1.1)
    rotate90: bool = True
    intensity_shift: tuple = (-0.1, 0.1)

    def __post_init__(self):
        lo, hi = self.intensity_window
        if lo >= hi:
            raise ValueError("intensity window min must be < max")
        if any(c <= 0 for c in self.crop_size):
            raise ValueError("crop dims must be positive")


def validate_orientation(code: str) -> None:
    if len(code) != 3 or any(ch not in _PAIR_OF for ch in code):
        raise ValueError(f"invalid orientation code {code!r}")
    if sorted(_PAIR_OF[ch] for ch in code) != [0, 1, 2]:
        raise ValueError(f"orientation {code!r} must name each anatomical axis once")


def orientation_map(src: str, dst: str):
    """(axis permutation, flip flags) taking src-ordered axes to dst order."""
    validate_orientation(src)
    validate_orientation(dst)
    perm, flips = [], []
    for ch in dst:
        pair = _PAIR_OF[ch]
        src_axis = next(i for i, sc in enumerate(src) if _PAIR_OF[sc] == pair)
        perm.append(src_axis)
        flips.append(src[src_axis] != ch)
    return tuple(perm), tuple(flips)


def _apply_orientation(arr: np.ndarray, perm, flips):
    """Permute/flip the trailing three axes of a [C,D,H,W] array."""
    lead = arr.ndim - 3
    full_perm = tuple(range(lead)) + tuple(p + lead for p in perm)
    out = arr.transpose(full_perm)
    axes = tuple(i + lead for i, f in enumerate(flips) if f)
    if axes:
        out = np.flip(out, axes)
    return np.ascontiguousarray(out)


def reorient(v: Volume, target: str) -> Volume:
    """Axis permutation + flips only; voxel values are preserved as a multiset."""
    perm, flips = orientation_map(v.orientation, target)
    data = _apply_orientation(v.data.data, perm, flips)
    spacing = tuple(v.spacing_mm[p] for p in perm)
    return Volume(Tensor(data), spacing, target)


def reorient_label(l: LabelVolume, src: str, target: str) -> LabelVolume:
    perm, flips = orientation_map(src, target)
    return LabelVolume(Tensor(_apply_orientation(l.data.data, perm, flips)), list(l.class_names))


def _resample_array(arr: np.ndarray, old_spacing, new_spacing, mode):
    """Resample the trailing three axes; trilinear or nearest."""
    old = arr.shape[-3:]
    new = tuple(max(1, round(o * s / t)) for o, s, t in zip(old, old_spacing, new_spacing))
    if new == tuple(old) and tuple(old_spacing) == tuple(new_spacing):
        return arr.copy(), new
    # output voxel i sits at physical i*new_spacing; source coordinate i*new/old
    coords = [np.clip(np.arange(n) * t / s, 0, o - 1) for n, t, s, o in zip(new, new_spacing, old_spacing, old)]
    if mode == "nearest":
        idx = [np.rint(c).astype(np.int64) for c in coords]
        out = arr[..., idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]
        return np.ascontiguousarray(out), new
    if mode != "trilinear":
        raise ValueError(f"unknown resample mode {mode!r}")
    lo = [np.floor(c).astype(np.int64) for c in coords]
    hi = [np.minimum(l + 1, o - 1) for l, o in zip(lo, old)]
    w = [c - l for c, l in zip(coords, lo)]
    out = np.zeros(arr.shape[:-3] + new, dtype=np.float64)
    for bd, wd in ((lo[0], 1 - w[0]), (hi[0], w[0])):
        for bh, wh in ((lo[1], 1 - w[1]), (hi[1], w[1])):
            for bw, ww in ((lo[2], 1 - w[2]), (hi[2], w[2])):
                weight = wd[:, None, None] * wh[None, :, None] * ww[None, None, :]
                out += weight * arr[..., bd[:, None, None], bh[None, :, None], bw[None, None, :]]
    return out.astype(arr.dtype), new


def resample(v: Volume, spacing, mode="trilinear") -> Volume:
    if any(s <= 0 for s in spacing):
        raise ValueError(f"target spacing must be positive, got {spacing}")
    data, _ = _resample_array(v.data.data, v.spacing_mm, spacing, mode)
    return Volume(Tensor(data), tuple(spacing), v.orientation)


def resample_label(l: LabelVolume, old_spacing, new_spacing) -> LabelVolume:
    data, _ = _resample_array(l.data.data, old_spacing, new_spacing, "nearest")
    return LabelVolume(Tensor(data), list(l.class_names))


def window_normalize(v: Volume, window=(-175.0, 250.0)) -> Volume:
    lo, hi = window
    if lo >= hi:
        raise ValueError("window min must be < max")
    out = np.clip((v.data.data - lo) / (hi - lo), 0.0, 1.0)
    return Volume(Tensor(out), v.spacing_mm, v.orientation)


def _crop_pad_array(arr: np.ndarray, size, offsets=None):
    """Center (offsets=None) or explicit crop/pad of trailing three axes to `size`."""
    old = arr.shape[-3:]
    out = arr
    pads = [(0, 0)] * (arr.ndim - 3)
    for ax, (o, s) in enumerate(zip(old, size)):
        if o < s:
            before = (s - o) // 2
            pads.append((before, s - o - before))
        else:
            pads.append((0, 0))
    out = np.pad(out, pads)
    starts = []
    for ax, s in enumerate(size):
        o = out.shape[arr.ndim - 3 + ax]
        start = (o - s) // 2 if offsets is None else offsets[ax]
        start = int(np.clip(start, 0, o - s))
        starts.append(start)
    sl = tuple([slice(None)] * (arr.ndim - 3) + [slice(st, st + s) for st, s in zip(starts, size)])
    return np.ascontiguousarray(out[sl]), tuple(starts)


def crop_or_pad(v: Volume, l: LabelVolume | None, size=(96, 96, 96), mode="center", rng=None):
    """Crop or zero-pad to exact `size`; paired image/label share offsets."""
    if mode == "random":
        if rng is None:
            raise ValueError("random crop needs an rng")
        padded = [max(o, s) for o, s in zip(v.extents, size)]
        offsets = [int(rng.integers(0, p - s + 1)) for p, s in zip(padded, size)]
    else:
        offsets = None
    img, used = _crop_pad_array(v.data.data, size, offsets)
    out_v = Volume(Tensor(img), v.spacing_mm, v.orientation)
    out_l = None
    if l is not None:
        lbl, _ = _crop_pad_array(l.data.data, size, used)
        out_l = LabelVolume(Tensor(lbl), list(l.class_names))
    return out_v, out_l


_ROT_AXES = ((-3, -2), (-3, -1), (-2, -1))


def augment(v: Volume, l: LabelVolume, config: PreprocessConfig, rng: np.random.Generator):
    """Random zoom, axis-aligned 90-degree rotations, and intensity shift.

    Geometric transforms hit image and label identically (nearest for labels,
    so masks stay binary); the intensity shift touches the image only and the
    result is re-clamped to [0, 1].
    """
    img = v.data.data
    lbl = l.data.data
    if not config.augment:
        return v, l
    z_lo, z_hi = config.zoom_range
    zoom = float(rng.uniform(z_lo, z_hi))
    if abs(zoom - 1.0) > 1e-6:
        # zooming = resampling to a scaled grid, then restoring the extents
        fake_new = tuple(s / zoom for s in v.spacing_mm)
        img, _ = _resample_array(img, v.spacing_mm, fake_new, "trilinear")
        lbl, _ = _resample_array(lbl, v.spacing_mm, fake_new, "nearest")
        img, _ = _crop_pad_array(img, v.extents)
        lbl, _ = _crop_pad_array(lbl, v.extents)
    if config.rotate90:
        plane = _ROT_AXES[int(rng.integers(0, 3))]
        k = int(rng.integers(0, 4))
        if k:
            img = np.ascontiguousarray(np.rot90(img, k, plane))
            lbl = np.ascontiguousarray(np.rot90(lbl, k, plane))
    s_lo, s_hi = config.intensity_shift
    shift = float(rng.uniform(s_lo, s_hi))
    img = np.clip(img + shift, 0.0, 1.0)
    return Volume(Tensor(img), v.spacing_mm, v.orientation), LabelVolume(Tensor(lbl), list(l.class_names))


def preprocess(v: Volume, l: LabelVolume | None, config: PreprocessConfig, rng=None, crop_mode="center"):
    """Reorient to RAS, resample to target spacing, window to [0,1], crop."""
    src_orientation = v.orientation
    v = reorient(v, "RAS")
    if l is not None:
        l = reorient_label(l, src_orientation, "RAS")
    old_spacing = v.spacing_mm
    v = resample(v, config.target_spacing_mm, "trilinear")
    if l is not None:
        l = resample_label(l, old_spacing, config.target_spacing_mm)
    v = window_normalize(v, config.intensity_window)
    v, l = crop_or_pad(v, l, config.crop_size, crop_mode, rng)
    if config.augment and l is not None:
        if rng is None:
            raise ValueError("augmentation needs an rng")
        v, l = augment(v, l, config, rng)
    return v, l


def presence_row(label: LabelVolume) -> np.ndarray:
    """Binary class-presence vector: 1 exactly where the class mask is nonempty."""
    return (label.data.data.reshape(label.num_classes, -1).sum(axis=1) > 0).astype(np.float64)


# -- raw container IO ------------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "|u1"}


def write_container(path, array: np.ndarray, spacing_mm, orientation, dtype=None):
    dtype = dtype or str(array.dtype)
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported container dtype {dtype!r}")
    header = {
        "shape": list(array.shape),
        "spacing_mm": [float(s) for s in spacing_mm],
        "orientation": orientation,
        "dtype": dtype,
    }
    body = np.ascontiguousarray(array).astype(_DTYPES[dtype]).tobytes()
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(body)


def read_container(path):
    """Returns (array, spacing_mm, orientation). Raises on malformed files."""
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}: malformed container header: {e}") from e
        for key in ("shape", "spacing_mm", "orientation", "dtype"):
            if key not in header:
                raise ValueError(f"{path}: container header missing key {key!r}")
        if header["dtype"] not in _DTYPES:
            raise ValueError(f"{path}: unsupported dtype {header['dtype']!r}")
        shape = tuple(int(s) for s in header["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(f.read(), dtype=_DTYPES[header["dtype"]])
        if arr.size != count:
            raise ValueError(f"{path}: body truncated: expected {count} scalars, got {arr.size}")
        return arr.reshape(shape).astype(np.float64), tuple(header["spacing_mm"]), header["orientation"]


# -- synthetic dataset ---------------------------------------------------------------
#
# Desk-scale stand-in for real multi-organ CT: per case, one large "organ"
# ellipsoid, a smaller "tumor" strictly inside it, and independent extra blobs
# for any further classes. Intensities live in a CT-like range so the whole
# windowing pipeline is exercised; each class carries a distinct intensity
# signature so a small model can learn the task.

DEFAULT_CLASS_NAMES = ["organ", "tumor", "nodule", "cyst", "lesion", "mass"]


@dataclass
class SynthCase:
    case_id: str
    volume: Volume
    label: LabelVolume
    presence: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.presence is None:
            self.presence = presence_row(self.label)


def _ellipsoid_mask(size, center, radii):
    grids = np.ogrid[tuple(slice(0, s) for s in size)]
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return acc <= 1.0


def synth_generate(seed, n_volumes, num_classes, size=(32, 32, 32), spacing_mm=(1.5, 1.5, 1.5)):
    """Deterministic synthetic dataset; class 1 ('tumor') nests inside class 0."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes (organ + tumor)")
    if min(size) < 12:
        raise ValueError(f"size {size} too small to place shapes")
    if num_classes > len(DEFAULT_CLASS_NAMES):
        raise ValueError(f"at most {len(DEFAULT_CLASS_NAMES)} classes supported")
    rng = np.random.default_rng(seed)
    names = DEFAULT_CLASS_NAMES[:num_classes]
    cases = []
    for i in range(n_volumes):
        img = rng.normal(-60.0, 18.0, size=size)  # soft-tissue-ish background
        labels = np.zeros((num_classes,) + tuple(size), dtype=np.float64)

        organ_r = [rng.uniform(0.22, 0.3) * s for s in size]
        organ_c = [rng.uniform(0.38, 0.62) * s for s in size]
        organ = _ellipsoid_mask(size, organ_c, organ_r)
        labels[0][organ] = 1.0
        img[organ] = rng.normal(80.0, 8.0, size=int(organ.sum()))

        if num_classes >= 2:
            tumor_r = [max(2.0, 0.4 * r) for r in organ_r]
            tumor_c = [c + rng.uniform(-0.25, 0.25) * r for c, r in zip(organ_c, organ_r)]
            tumor = _ellipsoid_mask(size, tumor_c, tumor_r) & organ  # containment by construction
            labels[1][tumor] = 1.0
            img[tumor] = rng.normal(190.0, 8.0, size=int(tumor.sum()))

        for k in range(2, num_classes):
            blob_r = [rng.uniform(0.1, 0.16) * s for s in size]
            blob_c = [rng.uniform(0.2, 0.8) * s for s in size]
            blob = _ellipsoid_mask(size, blob_c, blob_r) & ~organ
            labels[k][blob] = 1.0
            intensity = -170.0 + 120.0 * (k - 2)
            img[blob] = rng.normal(intensity, 6.0, size=int(blob.sum()))

        vol = Volume(Tensor(img[None]), spacing_mm, "RAS")
        lbl = LabelVolume(Tensor(labels), names)
        cases.append(SynthCase(case_id=f"case_{i:03d}", volume=vol, label=lbl))
    return cases, names


def save_dataset(cases, class_names, out_dir, seed=None):
    """Write container pairs plus a manifest JSON; returns the manifest dict."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for case in cases:
        img_name = f"{case.case_id}_img.vol"
        lbl_name = f"{case.case_id}_lbl.vol"
        write_container(
            os.path.join(out_dir, img_name),
            case.volume.data.data.astype(np.float32),
            case.volume.spacing_mm,
            case.volume.orientation,
            dtype="float32",
        )
        write_container(
            os.path.join(out_dir, lbl_name),
            case.label.data.data.astype(np.uint8),
            case.volume.spacing_mm,
            case.volume.orientation,
            dtype="uint8",
        )
        entries.append({"id": case.case_id, "image": img_name, "label": lbl_name})
    manifest = {"classes": list(class_names), "cases": entries}
    if seed is not None:
        manifest["seed"] = seed
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_dataset(data_dir):
    """Read a manifest directory back into SynthCase records."""
    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    names = manifest["classes"]
    cases = []
    for entry in manifest["cases"]:
        img, spacing, orient = read_container(os.path.join(data_dir, entry["image"]))
        lbl, _, _ = read_container(os.path.join(data_dir, entry["label"]))
        vol = Volume(Tensor(img), spacing, orient)
        label = LabelVolume(Tensor(lbl), list(names))
        cases.append(SynthCase(case_id=entry["id"], volume=vol, label=label))
    return cases, names
