"""Image decoding, resizing to the backbone input, and training-time augmentation."""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, UnsupportedFormat

TARGET_SIZE = 224
PREPROCESSING_ID = "image/v1:rgb224-bilinear-halfpixel/rescale-1_255"

_PPM_HEADER = re.compile(rb"\AP6(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


@dataclass(eq=False)
class RasterImage:
    """8-bit RGB image, row-major ``(height, width, 3)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be (H, W, 3), got {px.shape}")
        self.pixels = px.astype(np.uint8, copy=False)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, RasterImage) and np.array_equal(self.pixels, other.pixels)


@dataclass
class AugmentConfig:
    enabled: bool = True
    hflip_prob: float = 0.5
    rotation_max_deg: float = 15.0
    zoom_range: tuple = (0.8, 1.25)
    seed: int = 0
    # distinct augmented copies per training image; epoch e trains on copy e mod variants
    variants: int = 1

    def __post_init__(self):
        self.zoom_range = tuple(float(z) for z in self.zoom_range)
        lo, hi = self.zoom_range
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        if not 0.0 <= self.rotation_max_deg <= 180.0:
            raise ValueError("rotation_max_deg must be in [0, 180]")
        if not (0.0 < lo <= 1.0 <= hi):
            raise ValueError("zoom_range must satisfy 0 < lo <= 1 <= hi")
        if int(self.variants) < 1:
            raise ValueError("variants must be >= 1")
        self.variants = int(self.variants)


# -- decoding -----------------------------------------------------------------


def sniff_format(data: bytes):
    if data[:2] == b"P6":
        return "ppm"
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return "png"
    if data[:3] == b"\xff\xd8\xff":
        return "jpeg"
    return None


def _decode_ppm(data):
    m = _PPM_HEADER.match(data)
    if not m:
        raise DecodeError("malformed P6 header")
    w, h, maxval = (int(v) for v in m.groups())
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise DecodeError(f"unsupported P6 geometry {w}x{h} maxval {maxval}")
    body = data[m.end() :]
    if len(body) < w * h * 3:
        raise DecodeError(f"truncated P6 payload: {len(body)} of {w * h * 3} bytes")
    px = np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    if maxval != 255:
        px = np.round(px.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return RasterImage(px.copy())


def _decode_pillow(data):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from None


def decode_image(data: bytes, format: str | None = None) -> RasterImage:
    """Decode P6 PPM, PNG, or (optionally) JPEG bytes to RGB."""
    fmt = format or sniff_format(data)
    if fmt == "ppm":
        return _decode_ppm(data)
    if fmt in ("png", "jpeg"):
        return _decode_pillow(data)
    raise UnsupportedFormat(f"unsupported image format {fmt!r}")


def encode_ppm(img: RasterImage) -> bytes:
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def encode_png(img: RasterImage) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(img.pixels, "RGB").save(buf, format="PNG")
    return buf.getvalue()


# -- resize / preprocess ------------------------------------------------------


def _bilinear_axis(n_in, n_out):
    """Source indices and weights for half-pixel-centre bilinear sampling."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array; returns float64."""
    src = np.asarray(pixels, dtype=np.float64)
    h, w = src.shape[:2]
    if (h, w) == (out_h, out_w):
        return src.copy()
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    # convex combinations of equal values must return that value exactly
    return np.clip(out, src.min(), src.max())


def preprocess(img: RasterImage, size: int = TARGET_SIZE) -> np.ndarray:
    """(1, size, size, 3) float32 in [0, 1]."""
    out = resize_bilinear(img.pixels, size, size) * (1.0 / 255.0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)[None]


# -- augmentation -------------------------------------------------------------


def _sample_affine(pixels, matrix):
    """Inverse-map every output pixel through ``matrix`` (2x3, about the centre) with edge clamping."""
    h, w = pixels.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    sy = matrix[0, 0] * yy + matrix[0, 1] * xx + cy
    sx = matrix[1, 0] * yy + matrix[1, 1] * xx + cx
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    src = pixels.astype(np.float64)
    out = (src[y0, x0] * (1 - fx) + src[y0, x1] * fx) * (1 - fy) + (src[y1, x0] * (1 - fx) + src[y1, x1] * fx) * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def rotate(pixels, degrees):
    if degrees == 0:
        return pixels
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return _sample_affine(pixels, np.array([[c, -s], [s, c]]))


def zoom(pixels, factor):
    if factor == 1:
        return pixels
    return _sample_affine(pixels, np.eye(2) / factor)


def augment_rng(seed: int, index: int, epoch: int = 0):
    """Per-image generator, so parallel workers reproduce the serial stream."""
    return np.random.default_rng([int(seed), int(index), int(epoch)])


def augment(img: RasterImage, cfg: AugmentConfig, rng) -> RasterImage:
    """Random hflip, then rotation, then zoom; all three draws are always consumed."""
    if not cfg.enabled:
        return img
    flip = rng.random() < cfg.hflip_prob
    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    lo, hi = cfg.zoom_range
    factor = rng.uniform(lo, hi) if hi > lo else lo
    px = img.pixels
    if flip:
        px = px[:, ::-1]
    px = rotate(px, angle)
    px = zoom(px, factor)
    return RasterImage(np.ascontiguousarray(px))
