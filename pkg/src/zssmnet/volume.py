"""Volumes, zonal masks, cases and the raw container format.

Axis order is always ``(Z, Y, X)`` with Z the slice axis; multi-channel
data is ``(C, Z, Y, X)`` float32 with X varying fastest.
"""
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = "ZVOL1"
BG, CG, PZ = 0, 1, 2
FULL_SPACING = (3.0, 0.5, 0.5)


class VolumeFormatError(ValueError):
    """Base class for container parse failures."""


class MalformedHeaderError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    """Payload ends inside a 32-bit value."""


class PayloadSizeError(VolumeFormatError):
    """Payload value count disagrees with the header dimensions."""


class EmptyMaskError(ValueError):
    pass


def _spacing(spacing):
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(s > 0 and math.isfinite(s) for s in sp):
        raise ValueError(f"spacing must be three positive finite values, got {spacing}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = FULL_SPACING

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (C, Z, Y, X), got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _spacing(self.spacing))

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1:]

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.spacing == other.spacing
                and self.data.shape == other.data.shape and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class ZonalMask:
    labels: np.ndarray
    spacing: tuple = FULL_SPACING

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValueError(f"zonal mask must be (Z, Y, X), got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > 2 or not np.all(lab == np.round(lab))):
            raise ValueError("zonal labels must be in {0, 1, 2}")
        lab = np.ascontiguousarray(lab, dtype=np.uint8)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "spacing", _spacing(self.spacing))

    @property
    def dims(self):
        return self.labels.shape

    def __eq__(self, other):
        return (isinstance(other, ZonalMask) and self.spacing == other.spacing
                and np.array_equal(self.labels, other.labels))

    def to_volume(self):
        return Volume(self.labels[None].astype(np.float32), self.spacing)

    @classmethod
    def from_volume(cls, v):
        if v.channels != 1:
            raise ValueError("a zonal mask volume has exactly one channel")
        return cls(v.data[0], v.spacing)


@dataclass(frozen=True, eq=False)
class CaseRecord:
    case_id: str
    image: Volume  # channels T2W, DWI, ADC
    zones: ZonalMask
    lesions: np.ndarray = None  # (Z, Y, X) bool, optional
    label: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.dims != self.zones.dims:
            raise ValueError(f"{self.case_id}: image {self.image.dims} vs zones {self.zones.dims}")
        if self.lesions is not None:
            les = np.ascontiguousarray(self.lesions, dtype=bool)
            if les.shape != self.image.dims:
                raise ValueError(f"{self.case_id}: lesion mask shape {les.shape}")
            object.__setattr__(self, "lesions", les)
        object.__setattr__(self, "label", bool(self.label))

    @property
    def dims(self):
        return self.image.dims

    @property
    def spacing(self):
        return self.image.spacing


# ------------------------------------------------------------ container

def _format_header(v):
    c, z, y, x = v.data.shape
    sp = " ".join(repr(float(s)) for s in v.spacing)
    return f"{MAGIC} {c} {z} {y} {x} {sp}\n".encode("ascii")


def dumps_volume(v):
    return _format_header(v) + v.data.astype("<f4").tobytes()


def loads_volume(buf):
    nl = buf.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError("missing header terminator")
    try:
        fields = buf[:nl].decode("ascii").split(" ")
    except UnicodeDecodeError:
        raise MalformedHeaderError("header is not ASCII") from None
    if len(fields) != 8 or fields[0] != MAGIC:
        raise MalformedHeaderError(f"bad header {buf[:nl][:80]!r}")
    try:
        dims = tuple(int(f) for f in fields[1:5])
        spacing = tuple(float(f) for f in fields[5:8])
    except ValueError:
        raise MalformedHeaderError(f"unparseable header fields {fields[1:]}") from None
    if min(dims) < 1 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise MalformedHeaderError(f"non-positive header values {fields[1:]}")
    payload = buf[nl + 1:]
    if len(payload) % 4:
        raise TruncatedPayloadError(f"payload of {len(payload)} bytes ends mid-value")
    need = int(np.prod(dims))
    have = len(payload) // 4
    if have != need:
        raise PayloadSizeError(f"header needs {need} values, payload has {have}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume(data.astype(np.float32), spacing)


def save_volume(v, path):
    Path(path).write_bytes(dumps_volume(v))


def load_volume(path):
    return loads_volume(Path(path).read_bytes())


# ------------------------------------------------------------ manifest

def write_manifest(path, entries):
    """One JSON object per line: case_id, image, zones, lesions, label.

    Paths are stored relative to the manifest's directory.
    """
    path = Path(path)
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_manifest(path):
    path = Path(path)
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                e = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            missing = {"case_id", "image", "zones", "label"} - set(e)
            if missing:
                raise ValueError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            entries.append(e)
    return entries


def save_case(case, directory):
    """Write a case's volumes into ``directory``; returns its manifest entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {"image": f"{case.case_id}_image.zvol", "zones": f"{case.case_id}_zones.zvol"}
    save_volume(case.image, directory / names["image"])
    save_volume(case.zones.to_volume(), directory / names["zones"])
    entry = {"case_id": case.case_id, "image": names["image"], "zones": names["zones"],
             "lesions": None, "label": case.label}
    if case.lesions is not None:
        entry["lesions"] = f"{case.case_id}_lesions.zvol"
        save_volume(Volume(case.lesions[None].astype(np.float32), case.spacing),
                    directory / entry["lesions"])
    return entry


def load_case(entry, root="."):
    root = Path(root)
    image = load_volume(root / entry["image"])
    zones = ZonalMask.from_volume(load_volume(root / entry["zones"]))
    lesions = None
    if entry.get("lesions"):
        lesions = load_volume(root / entry["lesions"]).data[0] > 0.5
    return CaseRecord(entry["case_id"], image, zones, lesions, bool(entry["label"]))


def load_cases(manifest):
    root = os.path.dirname(os.path.abspath(manifest))
    return [load_case(e, root) for e in read_manifest(manifest)]


# ------------------------------------------------------------ resampling

def _axis_coords(n_in, s_in, s_out):
    n_out = max(1, int(math.floor(n_in * s_in / s_out + 0.5)))
    # first voxel centres coincide; samples past the last centre clamp to it
    c = np.arange(n_out) * (s_out / s_in)
    return np.clip(c, 0, n_in - 1)


def _linear_axis(a, axis, coords):
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, a.shape[axis] - 1)
    t = (coords - i0).reshape([-1 if k == axis else 1 for k in range(a.ndim)])
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    return lo + (hi - lo) * t


def resample_array(a, spacing, target_spacing, mode="trilinear"):
    """Resample the trailing three axes of ``a``."""
    spacing, target_spacing = _spacing(spacing), _spacing(target_spacing)
    if spacing == target_spacing:
        return a
    off = a.ndim - 3
    out = a.astype(np.float64) if mode == "trilinear" else a
    for k in range(3):
        if spacing[k] == target_spacing[k]:
            continue
        coords = _axis_coords(a.shape[off + k], spacing[k], target_spacing[k])
        if mode == "trilinear":
            out = _linear_axis(out, off + k, coords)
        elif mode == "nearest":
            out = np.take(out, np.floor(coords + 0.5).astype(np.intp), axis=off + k)
        else:
            raise ValueError(f"unknown resampling mode {mode!r}")
    if mode == "trilinear":
        lo, hi = a.min(), a.max()
        out = np.clip(out, lo, hi).astype(a.dtype)
    return out


def resample(v, target_spacing, mode="trilinear"):
    if isinstance(v, ZonalMask):
        if mode != "nearest":
            raise ValueError("label volumes must be resampled with mode='nearest'")
        return ZonalMask(resample_array(v.labels, v.spacing, target_spacing, "nearest"),
                         target_spacing)
    target_spacing = _spacing(target_spacing)
    if v.spacing == target_spacing:
        return v
    return Volume(resample_array(v.data, v.spacing, target_spacing, mode), target_spacing)


# ------------------------------------------------------------ intensity

def normalize(v, mode="zscore", clip_percentiles=(0.5, 99.5)):
    lo_p, hi_p = clip_percentiles
    if mode == "unit_range" and not 0 <= lo_p < hi_p <= 100:
        raise ValueError(f"bad clip percentiles {clip_percentiles}")
    out = np.empty(v.data.shape, dtype=np.float32)
    for c, ch in enumerate(v.data.astype(np.float64)):
        if mode == "unit_range":
            lo, hi = np.percentile(ch, [lo_p, hi_p])
            if hi > lo:
                out[c] = (np.clip(ch, lo, hi) - lo) / (hi - lo)
            else:
                out[c] = 0
        elif mode == "zscore":
            sd = ch.std()
            out[c] = (ch - ch.mean()) / sd if sd > 0 else 0
        else:
            raise ValueError(f"unknown normalization {mode!r}")
    return Volume(out, v.spacing)


def one_hot(m):
    lab = m.labels
    out = np.stack([(lab == k) for k in (BG, CG, PZ)]).astype(np.float32)
    return Volume(out, m.spacing)


# ------------------------------------------------------------ geometry

def crop_box(zones, margin_mm=25.0):
    """Bounding box of non-BG voxels dilated by ``margin_mm`` and clamped."""
    if margin_mm < 0:
        raise ValueError("margin must be non-negative")
    nz = np.argwhere(zones.labels != BG)
    if nz.size == 0:
        raise EmptyMaskError("zonal mask has no prostate voxels")
    lo, hi = nz.min(axis=0), nz.max(axis=0) + 1
    pad = [int(math.floor(margin_mm / s + 0.5)) for s in zones.spacing]
    box = []
    for k in range(3):
        box.append((max(0, int(lo[k]) - pad[k]), min(zones.dims[k], int(hi[k]) + pad[k])))
    return tuple(box)


def roi_crop(case, margin_mm=25.0):
    box = crop_box(case.zones, margin_mm)
    sl = tuple(slice(a, b) for a, b in box)
    image = Volume(case.image.data[(slice(None),) + sl], case.spacing)
    zones = ZonalMask(case.zones.labels[sl], case.spacing)
    lesions = None if case.lesions is None else case.lesions[sl]
    meta = dict(case.meta, crop_box=box)
    return replace(case, image=image, zones=zones, lesions=lesions, meta=meta)


def crop_or_pad_array(a, target_dims, pad_value=0):
    """Centre the trailing three axes of ``a`` in ``target_dims``."""
    target_dims = tuple(int(t) for t in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValueError(f"target dims must be three positive ints, got {target_dims}")
    off = a.ndim - 3
    src, dst = [slice(None)] * a.ndim, [slice(None)] * a.ndim
    for k, t in enumerate(target_dims):
        n = a.shape[off + k]
        if t >= n:
            lo = (t - n) // 2
            dst[off + k] = slice(lo, lo + n)
        else:
            lo = (n - t) // 2
            src[off + k] = slice(lo, lo + t)
    out = np.full(a.shape[:off] + target_dims, pad_value, dtype=a.dtype)
    out[tuple(dst)] = a[tuple(src)]
    return out


def center_crop_or_pad(v, target_dims, pad_value=0.0):
    if isinstance(v, ZonalMask):
        return ZonalMask(crop_or_pad_array(v.labels, target_dims, int(pad_value)), v.spacing)
    return Volume(crop_or_pad_array(v.data, target_dims, pad_value), v.spacing)


# ------------------------------------------------------------ pipeline

def preprocess_case(case, spacing=FULL_SPACING, margin_mm=25.0, target_dims=None):
    """Resample, ROI-crop and optionally centre-crop/pad a case.

    Intensities are left untouched; see :func:`network_input`.
    """
    image = resample(case.image, spacing, "trilinear")
    zones = resample(case.zones, spacing, "nearest")
    lesions = case.lesions
    if lesions is not None:
        lesions = resample_array(lesions.astype(np.uint8), case.spacing, spacing, "nearest") > 0
    out = replace(case, image=image, zones=zones, lesions=lesions)
    if margin_mm is not None:
        out = roi_crop(out, margin_mm)
    if target_dims is not None:
        img = center_crop_or_pad(out.image, target_dims, 0.0)
        zon = center_crop_or_pad(out.zones, target_dims, BG)
        les = None
        if out.lesions is not None:
            les = crop_or_pad_array(out.lesions, target_dims, False)
        out = replace(out, image=img, zones=zon, lesions=les)
    return out


def network_input(case, mode="zscore", clip_percentiles=(0.5, 99.5)):
    """Six-channel ``(C, Z, Y, X)`` float32 array: normalized images then one-hot zones."""
    img = normalize(case.image, mode, clip_percentiles)
    return np.concatenate([img.data, one_hot(case.zones).data], axis=0)
