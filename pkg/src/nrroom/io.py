"""Binary and image file formats.

SDFG  grid field:   "SDFG" u32 version=1, 3*u32 dims, 6*f32 bbox, u32 flags
                    (bit0 = albedo), f32 sdf (x fastest), [f32 albedo * 3]
ENVM  environment:  "ENVM" u32 version=1, u32 W, u32 H, u32 C, f32 data
IMGF  float image:  "IMGF" u32 W, u32 H, u32 C, f32 data

All little-endian, data row-major (row, column, channel).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .fields import Aabb, GridField

SDFG_VERSION = 1
ENVM_VERSION = 1
GAMMA = 2.2


def write_grid(path, grid: GridField):
    nx, ny, nz = grid.dims
    flags = 1 if grid.has_albedo else 0
    with open(path, "wb") as fh:
        fh.write(b"SDFG")
        fh.write(struct.pack("<I3I6fI", SDFG_VERSION, nx, ny, nz,
                             *grid.bbox.min, *grid.bbox.max, flags))
        fh.write(grid.sdf.astype("<f4").tobytes())
        if grid.has_albedo:
            fh.write(grid.albedo.astype("<f4").tobytes())


def read_grid(path) -> GridField:
    data = Path(path).read_bytes()
    if data[:4] != b"SDFG":
        raise FormatError(f"{path}: not an SDFG file")
    head = struct.calcsize("<I3I6fI")
    if len(data) < 4 + head:
        raise FormatError(f"{path}: truncated header")
    version, nx, ny, nz, *rest = struct.unpack_from("<I3I6fI", data, 4)
    if version != SDFG_VERSION:
        raise FormatError(f"{path}: unsupported SDFG version {version}")
    bbox = Aabb(rest[0:3], rest[3:6])
    flags = rest[6]
    n = nx * ny * nz
    off = 4 + head
    need = n * 4 * (4 if flags & 1 else 1)
    if len(data) - off != need:
        raise FormatError(f"{path}: expected {need} payload bytes, found {len(data) - off}")
    sdf = np.frombuffer(data, "<f4", n, off).astype(np.float64)
    albedo = None
    if flags & 1:
        albedo = np.frombuffer(data, "<f4", 3 * n, off + 4 * n).astype(np.float64)
        albedo = np.clip(albedo, 0.0, 1.0).reshape(nz, ny, nx, 3)
    return GridField((nx, ny, nz), bbox, sdf.reshape(nz, ny, nx), albedo)


def _as_hwc(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ValueError("image must be (H, W) or (H, W, C)")
    return img


def write_envmap(path, env):
    env = _as_hwc(env)
    h, w, c = env.shape
    with open(path, "wb") as fh:
        fh.write(b"ENVM")
        fh.write(struct.pack("<4I", ENVM_VERSION, w, h, c))
        fh.write(env.astype("<f4").tobytes())


def read_envmap(path):
    """Load an equirectangular map as linear float ``(H, W, 3)``."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return read_png(path)
    data = path.read_bytes()
    if data[:4] != b"ENVM":
        raise FormatError(f"{path}: not an ENVM file")
    version, w, h, c = struct.unpack_from("<4I", data, 4)
    if version != ENVM_VERSION:
        raise FormatError(f"{path}: unsupported ENVM version {version}")
    if len(data) - 20 != 4 * w * h * c:
        raise FormatError(f"{path}: payload size mismatch")
    return np.frombuffer(data, "<f4", w * h * c, 20).astype(np.float64).reshape(h, w, c)


def write_imgf(path, image):
    img = _as_hwc(image)
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(b"IMGF")
        fh.write(struct.pack("<3I", w, h, c))
        fh.write(img.astype("<f4").tobytes())


def read_imgf(path):
    data = Path(path).read_bytes()
    if data[:4] != b"IMGF":
        raise FormatError(f"{path}: not an IMGF file")
    w, h, c = struct.unpack_from("<3I", data, 4)
    if len(data) - 16 != 4 * w * h * c:
        raise FormatError(f"{path}: payload size mismatch")
    return np.frombuffer(data, "<f4", w * h * c, 16).astype(np.float64).reshape(h, w, c)


def write_png(path, image):
    """Write linear RGB in [0, 1] as 8-bit with gamma 2.2 applied."""
    img = np.clip(_as_hwc(image), 0.0, 1.0) ** (1.0 / GAMMA)
    img = np.round(img * 255.0).astype(np.uint8)
    if img.shape[2] == 1:
        img = img[..., 0]
    Image.fromarray(img).save(path)


def read_png(path):
    """Read an 8-bit PNG and linearize with gamma 2.2, ``(H, W, 3)``."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img ** GAMMA


def write_label_png(path, labels):
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)


def read_label_png(path):
    return np.asarray(Image.open(path), dtype=np.int64)


def read_image(path):
    """Dispatch on extension: ``.png`` (sRGB-ish 8 bit) or float ``IMGF``."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return read_png(path)
    return read_imgf(path)


def write_image(path, image):
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png(path, image)
    else:
        write_imgf(path, image)
