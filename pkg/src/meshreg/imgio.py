"""PNG and PFM image I/O.

Color images travel as 8-bit sRGB PNGs and are linearized on load; float
buffers (depth, normals, gradients) use PFM, 32-bit little-endian with
bottom-up rows as the format prescribes.  Texture helpers flip the row
axis so texel grids keep row 0 at v=0.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .mesh import TextureImage

__all__ = [
    "srgb_encode", "srgb_decode",
    "save_png", "load_png",
    "save_pfm", "load_pfm",
    "save_texture_png", "load_texture_png",
]


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x,
                    1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    s = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(s <= 0.04045, s / 12.92,
                    np.power((s + 0.055) / 1.055, 2.4))


def save_png(path, image: np.ndarray) -> None:
    """Write a linear float image, (h,w) or (h,w,3), as 8-bit sRGB."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] != 3):
        raise ValueError("image must be (h,w) or (h,w,3)")
    data = np.rint(srgb_encode(image) * 255.0).astype(np.uint8)
    mode = "L" if image.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Read a PNG back into linear floats, (h,w) for grayscale else (h,w,3)."""
    with Image.open(path) as img:
        if img.mode == "L":
            data = np.asarray(img, dtype=np.float64)
        else:
            data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return srgb_decode(data / 255.0)


def save_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
        raise ValueError("PFM holds (h,w) or (h,w,3) data")
    header = b"PF\n" if data.ndim == 3 else b"Pf\n"
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: header {kind!r}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(fh.read(4 * w * h * channels), dtype=dtype)
    data = raw.reshape((h, w, 3) if channels == 3 else (h, w))
    return np.flipud(data).astype(np.float64)


def save_texture_png(path, texture: TextureImage) -> None:
    save_png(path, np.flipud(texture.texels))


def load_texture_png(path) -> TextureImage:
    data = load_png(path)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    return TextureImage(np.flipud(data))
