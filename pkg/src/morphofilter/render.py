"""Raster output: binary PPM always, PNG when Pillow is importable."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .analysis import temperature_color

try:  # optional
    from PIL import Image
except ImportError:  # pragma: no cover - depends on environment
    Image = None


def site_grid(values, nelx: int, nely: int) -> np.ndarray:
    """Reshape a per-site vector to a ``(nely, nelx)`` image, row 0 at the top."""
    v = np.asarray(values)
    if v.shape[0] != nelx * nely:
        raise ValueError(f"expected {nelx * nely} sites, got {v.shape[0]}")
    return np.ascontiguousarray(v.reshape((nelx, nely) + v.shape[1:]).swapaxes(0, 1))


def grayscale(values, nelx: int, nely: int) -> np.ndarray:
    """Density image: 1 renders black, 0 white."""
    g = np.rint(255 * (1 - np.clip(site_grid(values, nelx, nely), 0, 1))).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def colormap(values, nelx: int, nely: int) -> np.ndarray:
    """Blue-to-red image of a per-site quantity already scaled to [0, 1]."""
    rgb = temperature_color(np.nan_to_num(np.asarray(values, dtype=float)))
    return np.rint(255 * site_grid(rgb, nelx, nely)).astype(np.uint8)


def upscale(rgb: np.ndarray, factor: int) -> np.ndarray:
    if factor <= 1:
        return rgb
    return np.repeat(np.repeat(rgb, factor, axis=0), factor, axis=1)


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (h, w, 3) array")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    # exactly one whitespace byte separates the header from the pixels
    return np.frombuffer(data[pos + 1: pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def write_raster(stem, rgb: np.ndarray, scale: int = 8) -> list[Path]:
    """Write ``stem.ppm`` and, if possible, ``stem.png``; return the paths written."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    big = upscale(rgb, scale)
    out = [stem.with_suffix(".ppm")]
    out[0].write_bytes(ppm_bytes(big))
    if Image is not None:
        png = stem.with_suffix(".png")
        Image.fromarray(big, "RGB").save(png, optimize=False)
        out.append(png)
    return out
