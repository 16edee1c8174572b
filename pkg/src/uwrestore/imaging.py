"""Image containers, PNG/PPM I/O, and color space conversions.

Pixel data is float64 in [0, 1], shape (H, W, 3) for color and (H, W) for
grayscale; constructors clamp out-of-range values.  Files are read at 8- or
16-bit depth and written as 8-bit PNG with round-half-up quantization
(0.5 -> 128, 1.0 -> 255).  Paths ending in ``.mttb`` go through the tensor
container instead, preserving exact float values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import container
from .errors import ImageIOError, ShapeError


def _prepare(arr, ndim, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeError(f"{what} needs {ndim} dimensions, got shape {arr.shape}")
    if ndim == 3 and arr.shape[2] != 3:
        raise ShapeError(f"{what} needs 3 channels, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{what} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{what} contains non-finite values")
    return np.clip(arr, 0.0, 1.0)


@dataclass
class ImageRGB:
    """Color image, pixels (H, W, 3) float64 in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = _prepare(self.pixels, 3, "ImageRGB")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class ImageGray:
    """Single-channel image, values (H, W) float64 in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _prepare(self.values, 2, "ImageGray")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def load_image(path):
    """Read an 8/16-bit PNG or PPM as ImageRGB; grayscale is replicated."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode in ("P", "RGBA", "LA", "1"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            else:
                raise ImageIOError(f"{path}: unsupported image mode '{mode}'")
    except UnidentifiedImageError as exc:
        raise ImageIOError(f"{path}: not a recognized image file") from exc
    except FileNotFoundError as exc:
        raise ImageIOError(f"{path}: no such file") from exc
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    arr = np.clip(arr, 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return ImageRGB(arr)


def quantize_u8(arr):
    """[0,1] float to uint8 with ties rounded up."""
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img, path):
    """Write ImageRGB or ImageGray as 8-bit PNG."""
    if isinstance(img, ImageRGB):
        data = quantize_u8(img.pixels)
        pil = Image.fromarray(data, mode="RGB")
    elif isinstance(img, ImageGray):
        data = quantize_u8(img.values)
        pil = Image.fromarray(data, mode="L")
    else:
        raise ShapeError(f"save_image expects ImageRGB or ImageGray, got {type(img).__name__}")
    try:
        pil.save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def load_image_any(path):
    """Like load_image, but ``.mttb`` paths restore exact float pixels."""
    if str(path).endswith(".mttb"):
        entries = container.read_tensors(path)
        if not entries:
            raise ImageIOError(f"{path}: container holds no tensors")
        arr = next(iter(entries.values()))
        if arr.ndim == 2:
            arr = np.repeat(np.asarray(arr, dtype=np.float64)[:, :, None], 3, axis=2)
        return ImageRGB(arr)
    return load_image(path)


def save_image_any(img, path):
    """Like save_image, but ``.mttb`` paths keep exact float pixels."""
    if str(path).endswith(".mttb"):
        arr = img.pixels if isinstance(img, ImageRGB) else img.values
        container.write_tensors(path, {"image": arr})
        return
    save_image(img, path)


def resize_rgb(img, height, width):
    """Bilinear resize used by dataset preparation."""
    pil = Image.fromarray(quantize_u8(img.pixels), mode="RGB")
    out = pil.resize((width, height), Image.BILINEAR)
    return ImageRGB(np.asarray(out, dtype=np.float64) / 255.0)


# ---------------------------------------------------------------------------
# color spaces
# ---------------------------------------------------------------------------

# sRGB linear -> XYZ, D65 white.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def _srgb_linearize(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def rgb_to_lab(img):
    """CIE Lab (D65).  Returns (H, W, 3) with L in [0, 100]."""
    rgb = img.pixels if isinstance(img, ImageRGB) else np.asarray(img, dtype=np.float64)
    lin = _srgb_linearize(rgb)
    xyz = lin @ _RGB_TO_XYZ.T
    t = xyz / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def rgb_to_hsv(img):
    """Hexcone HSV; H in [0, 1), S and V in [0, 1]."""
    rgb = img.pixels if isinstance(img, ImageRGB) else np.asarray(img, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    rng = v - mn
    s = np.where(v > 0, rng / np.where(v > 0, v, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rng_safe = np.where(rng > 0, rng, 1.0)
        hr = ((g - b) / rng_safe) % 6.0
        hg = (b - r) / rng_safe + 2.0
        hb = (r - g) / rng_safe + 4.0
    h = np.where(v == r, hr, np.where(v == g, hg, hb))
    h = np.where(rng > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)
