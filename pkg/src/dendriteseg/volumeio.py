"""Grayscale/label volume containers, raw+JSON file I/O, and overlays.

A volume is a stack of z-slices: voxel (x, y, z) lives at flat offset
z*(H*W) + y*W + x, i.e. the in-memory array is (depth, height, width) in
C order. On disk a volume is a little-endian flat buffer next to a JSON
sidecar with the dimensions and dtype. Volumes are immutable after
construction and safe to share across threads.

Overlays follow the usual error-coloring convention: true positives white,
true negatives black, false positives green, false negatives pink, written
as binary PPM (P6).
"""

import json
import os

import numpy as np

from .errors import BadMeta, IndexOutOfRange, IoFailure, ShapeMismatch, SizeMismatch

_DTYPES = {"u8": "<u1", "u16": "<u2", "f32": "<f4"}

OVERLAY_TP = (255, 255, 255)
OVERLAY_TN = (0, 0, 0)
OVERLAY_FP = (0, 255, 0)
OVERLAY_FN = (255, 105, 180)


def _dtype_name(arr) -> str:
    for name, code in _DTYPES.items():
        if arr.dtype == np.dtype(code).newbyteorder("="):
            return name
    raise BadMeta(f"unsupported volume dtype {arr.dtype}")


class GrayVolume:
    """3D grayscale intensity volume, array shape (depth, height, width)."""

    def __init__(self, data):
        arr = np.ascontiguousarray(data)
        if arr.ndim != 3:
            raise ShapeMismatch(f"volume array must be 3-d, got {arr.ndim}-d")
        if any(s < 1 for s in arr.shape):
            raise ShapeMismatch(f"volume dims must be >= 1, got {arr.shape}")
        self.dtype_name = _dtype_name(arr)
        if self.dtype_name == "f32" and not np.isfinite(arr).all():
            raise BadMeta("f32 volume contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr

    @property
    def depth(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def dims(self):
        """(width, height, depth)"""
        return (self.width, self.height, self.depth)

    def voxel(self, x, y, z):
        return self.data[z, y, x]

    def normalized(self) -> np.ndarray:
        """Intensities as float32 in [0, 1] (u8 / 255, u16 / 65535)."""
        if self.dtype_name == "u8":
            return self.data.astype(np.float32) / np.float32(255)
        if self.dtype_name == "u16":
            return self.data.astype(np.float32) / np.float32(65535)
        return self.data.astype(np.float32)


class LabelVolume:
    """Binary dendrite(1)/background(0) volume, shape (depth, height, width)."""

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.uint8)
        if arr.ndim != 3:
            raise ShapeMismatch(f"label array must be 3-d, got {arr.ndim}-d")
        if any(s < 1 for s in arr.shape):
            raise ShapeMismatch(f"label dims must be >= 1, got {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise BadMeta("label volume must contain only 0 and 1")
        arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr

    depth = GrayVolume.depth
    height = GrayVolume.height
    width = GrayVolume.width
    dims = GrayVolume.dims
    voxel = GrayVolume.voxel

    def foreground_fraction(self) -> float:
        return float(self.data.mean())


def _read_meta(meta_path):
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except OSError as e:
        raise IoFailure(f"cannot read {meta_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise BadMeta(f"{meta_path} is not valid JSON: {e}") from e
    for key in ("width", "height", "depth", "dtype"):
        if key not in meta:
            raise BadMeta(f"{meta_path} missing field {key!r}")
    w, h, d = meta["width"], meta["height"], meta["depth"]
    if not all(isinstance(v, int) and v >= 1 for v in (w, h, d)):
        raise BadMeta(f"invalid dimensions {w}x{h}x{d}")
    if meta["dtype"] not in _DTYPES:
        raise BadMeta(f"unknown dtype {meta['dtype']!r}")
    return w, h, d, meta["dtype"]


def load_volume(raw_path, meta_path=None) -> GrayVolume:
    """Load a raw little-endian volume described by its JSON sidecar."""
    raw_path = str(raw_path)
    if meta_path is None:
        meta_path = meta_path_for(raw_path)
    w, h, d, dtype_name = _read_meta(meta_path)
    np_dtype = np.dtype(_DTYPES[dtype_name])
    expected = w * h * d * np_dtype.itemsize
    try:
        size = os.path.getsize(raw_path)
        if size != expected:
            raise SizeMismatch(
                f"{raw_path}: {size} bytes, expected {expected} for {w}x{h}x{d} {dtype_name}"
            )
        buf = np.fromfile(raw_path, dtype=np_dtype)
    except OSError as e:
        raise IoFailure(f"cannot read {raw_path}: {e}") from e
    arr = buf.astype(np_dtype.newbyteorder("=")).reshape(d, h, w)
    return GrayVolume(arr)


def load_label(raw_path, meta_path=None) -> LabelVolume:
    vol = load_volume(raw_path, meta_path)
    if vol.dtype_name != "u8":
        raise BadMeta(f"label volumes must be u8, got {vol.dtype_name}")
    return LabelVolume(vol.data)


def save_volume(volume, raw_path, meta_path=None) -> None:
    """Inverse of load_volume: little-endian raw buffer plus JSON sidecar."""
    raw_path = str(raw_path)
    if meta_path is None:
        meta_path = meta_path_for(raw_path)
    if isinstance(volume, LabelVolume):
        dtype_name = "u8"
    else:
        dtype_name = volume.dtype_name
    try:
        volume.data.astype(_DTYPES[dtype_name]).tofile(raw_path)
        with open(meta_path, "w") as f:
            json.dump(
                {
                    "width": volume.width,
                    "height": volume.height,
                    "depth": volume.depth,
                    "dtype": dtype_name,
                },
                f,
            )
    except OSError as e:
        raise IoFailure(f"cannot write {raw_path}: {e}") from e


def meta_path_for(raw_path: str) -> str:
    base, ext = os.path.splitext(str(raw_path))
    return base + ".json" if ext == ".raw" else str(raw_path) + ".json"


def extract_plane(volume, axis: str, index: int) -> np.ndarray:
    """xy plane = the z-slice at z=index; xz plane = (depth, width) at y=index."""
    if axis == "xy":
        if not 0 <= index < volume.depth:
            raise IndexOutOfRange(f"z={index} outside depth {volume.depth}")
        return volume.data[index].copy()
    if axis == "xz":
        if not 0 <= index < volume.height:
            raise IndexOutOfRange(f"y={index} outside height {volume.height}")
        return volume.data[:, index, :].copy()
    raise IndexOutOfRange(f"axis must be 'xy' or 'xz', got {axis!r}")


def render_overlay(pred: LabelVolume, truth: LabelVolume, axis: str, index: int) -> np.ndarray:
    """RGB error overlay of one plane: TP white, TN black, FP green, FN pink."""
    if pred.data.shape != truth.data.shape:
        raise ShapeMismatch(f"pred {pred.data.shape} vs truth {truth.data.shape}")
    p = extract_plane(pred, axis, index).astype(bool)
    t = extract_plane(truth, axis, index).astype(bool)
    img = np.zeros(p.shape + (3,), dtype=np.uint8)
    img[p & t] = OVERLAY_TP
    img[~p & ~t] = OVERLAY_TN
    img[p & ~t] = OVERLAY_FP
    img[~p & t] = OVERLAY_FN
    return img


def write_ppm(img: np.ndarray, path) -> None:
    """Binary PPM (P6), maxval 255."""
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ShapeMismatch(f"expected (h, w, 3) uint8 image, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(img.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_ppm(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise BadMeta(f"{path} is not a maxval-255 binary PPM")
    w, h = (int(v) for v in parts[1].split())
    body = parts[3]
    if len(body) != w * h * 3:
        raise SizeMismatch(f"{path}: {len(body)} payload bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
