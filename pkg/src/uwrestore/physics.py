"""Physical degradation model for underwater scenes.

A degraded observation mixes the scene with ambient backscatter light,

    degraded = clean * t + airlight * (1 - t),

where the medium transmission t in [0, 1] falls off exponentially with
distance, t = exp(-beta * depth).  The transmission of a real image is
estimated through its dark channel: within a local patch some channel of the
true scene is close to zero, so the patch minimum of min_c I_c / A_c
approximates 1 - t.  Restoration inverts the mixing with a floor on t.

Synthetic depth and transmission fields (constant, linear ramp, gradient
noise) support dataset generation and the unit oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .imaging import ImageGray, ImageRGB

AIRLIGHT_FLOOR = 0.05


@dataclass
class Airlight:
    """Ambient light color, one value per channel in (0, 1]."""

    r: float
    g: float
    b: float

    def __post_init__(self):
        for name, v in (("r", self.r), ("g", self.g), ("b", self.b)):
            if not (0.0 < v <= 1.0):
                raise ConfigError(f"airlight channel {name}={v} outside (0, 1]")

    def as_array(self):
        return np.array([self.r, self.g, self.b], dtype=np.float64)


@dataclass
class TransmissionMap:
    """Per-pixel transmission in [0, 1] with a role tag.

    Roles: "true" for synthetic ground truth, "estimated" for dark-channel
    estimates, "predicted" for network output.
    """

    values: np.ndarray
    role: str = "estimated"

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"TransmissionMap needs shape (H, W), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError("TransmissionMap contains non-finite values")
        if self.role not in ("true", "estimated", "predicted"):
            raise ConfigError(f"unknown transmission role '{self.role}'")
        self.values = np.clip(arr, 0.0, 1.0)


@dataclass
class PhysicsParams:
    """Knobs for estimation and inversion."""

    patch_radius: int = 7
    airlight_quantile: float = 0.001
    t_floor: float = 0.1

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ConfigError(f"patch_radius must be >= 1, got {self.patch_radius}")
        if not (0.0 < self.airlight_quantile <= 0.05):
            raise ConfigError(
                f"airlight_quantile must lie in (0, 0.05], got {self.airlight_quantile}"
            )
        if not (0.0 < self.t_floor < 1.0):
            raise ConfigError(f"t_floor must lie in (0, 1), got {self.t_floor}")


def _min_filter(arr, radius):
    """Sliding minimum over (2r+1)^2 patches with edge replication."""
    r = radius
    padded = np.pad(arr, r, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, 2 * r + 1, axis=0)
    rows = win.min(axis=-1)
    win = np.lib.stride_tricks.sliding_window_view(rows, 2 * r + 1, axis=1)
    return win.min(axis=-1)


def dark_channel(img, airlight, patch_radius=7):
    """Patch minimum of the channel-wise minimum of pixels / airlight.

    Values are clamped to [0, 1]; pixels brighter than the airlight would
    otherwise push the ratio above one.
    """
    if patch_radius < 1:
        raise ConfigError(f"patch_radius must be >= 1, got {patch_radius}")
    ratio = img.pixels / airlight.as_array()
    per_pixel = np.clip(ratio.min(axis=2), 0.0, 1.0)
    return ImageGray(_min_filter(per_pixel, patch_radius))


def estimate_airlight(img, params=None):
    """Mean color of the haziest pixels.

    The dark channel with unit airlight ranks pixels by haze density; the
    top ``airlight_quantile`` fraction (at least one pixel) is averaged per
    channel and clamped to [0.05, 1].  An all-black image therefore yields
    (0.05, 0.05, 0.05).
    """
    params = params or PhysicsParams()
    unit = Airlight(1.0, 1.0, 1.0)
    dark = dark_channel(img, unit, params.patch_radius).values
    n = dark.size
    k = max(1, int(np.ceil(params.airlight_quantile * n)))
    flat = dark.reshape(-1)
    idx = np.argpartition(flat, n - k)[n - k :]
    picked = img.pixels.reshape(-1, 3)[idx]
    mean = picked.mean(axis=0)
    mean = np.clip(mean, AIRLIGHT_FLOOR, 1.0)
    return Airlight(*mean)


def estimate_mt(img, airlight, patch_radius=7):
    """Transmission estimate: one minus the dark channel."""
    dark = dark_channel(img, airlight, patch_radius)
    return TransmissionMap(1.0 - dark.values, role="estimated")


def estimate_mt_auto(img, params=None):
    """Transmission estimate with the airlight estimated from the image."""
    params = params or PhysicsParams()
    a = estimate_airlight(img, params)
    return estimate_mt(img, a, params.patch_radius)


def _t_array(t):
    """Accept TransmissionMap or a raw (H, W) / (H, W, 3) array in [0, 1]."""
    if isinstance(t, TransmissionMap):
        return t.values[:, :, None]
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 2:
        return arr[:, :, None]
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr
    raise ShapeError(f"transmission must be (H, W) or (H, W, 3), got {arr.shape}")


def degrade(clean, t, airlight):
    """Mix a clean scene with airlight according to the transmission."""
    ta = _t_array(t)
    if ta.shape[:2] != clean.pixels.shape[:2]:
        raise ShapeError(
            f"transmission {ta.shape[:2]} does not match image {clean.pixels.shape[:2]}"
        )
    a = airlight.as_array()
    out = clean.pixels * ta + a * (1.0 - ta)
    return ImageRGB(out)


def invert_restore(degraded, t, airlight, t_floor=0.1):
    """Algebraic inverse of ``degrade`` with the transmission floored."""
    if not (0.0 < t_floor < 1.0):
        raise ConfigError(f"t_floor must lie in (0, 1), got {t_floor}")
    ta = np.maximum(_t_array(t), t_floor)
    a = airlight.as_array()
    out = (degraded.pixels - a * (1.0 - ta)) / ta
    return ImageRGB(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# synthetic fields
# ---------------------------------------------------------------------------


def perlin_noise(height, width, rng, cells=4, octaves=2):
    """Gradient noise in [0, 1]; deterministic for a given generator state."""
    total = np.zeros((height, width))
    amp = 1.0
    norm = 0.0
    for octave in range(octaves):
        n = cells * (2**octave)
        total += amp * _perlin_octave(height, width, n, rng)
        norm += amp
        amp *= 0.5
    total /= norm
    return np.clip(0.5 + 0.5 * total, 0.0, 1.0)


def _perlin_octave(height, width, cells, rng):
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(cells + 1, cells + 1))
    grad = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    ys = (np.arange(height) + 0.5) / height * cells
    xs = (np.arange(width) + 0.5) / width * cells
    yi = np.minimum(ys.astype(int), cells - 1)
    xi = np.minimum(xs.astype(int), cells - 1)
    yf = ys - yi
    xf = xs - xi

    def dot(dy, dx):
        g = grad[yi[:, None] + dy, xi[None, :] + dx]
        return g[..., 0] * (yf[:, None] - dy) + g[..., 1] * (xf[None, :] - dx)

    def fade(u):
        return u * u * u * (u * (u * 6 - 15) + 10)

    wy = fade(yf)[:, None]
    wx = fade(xf)[None, :]
    top = dot(0, 0) * (1 - wx) + dot(0, 1) * wx
    bot = dot(1, 0) * (1 - wx) + dot(1, 1) * wx
    return top * (1 - wy) + bot * wy


def synth_depth(height, width, seed, style="perlin", depth_max=1.0):
    """Depth field in [0, depth_max] for one of the supported styles.

    The perlin style is stretched to span the full range, so every field
    has both a near region (depth 0) and a far region (depth_max), the way
    a water column recedes behind a scene.
    """
    rng = np.random.default_rng(seed)
    if style == "constant":
        d = np.full((height, width), 1.0)
    elif style == "linear_ramp":
        d = np.repeat(np.linspace(0.0, 1.0, height)[:, None], width, axis=1)
    elif style == "perlin":
        d = perlin_noise(height, width, rng)
        span = d.max() - d.min()
        if span > 0:
            d = (d - d.min()) / span
    else:
        raise ConfigError(f"unknown depth style '{style}'")
    return d * depth_max


def synth_transmission(height, width, seed, beta=1.0, style="perlin", depth_max=1.0):
    """Single-channel transmission exp(-beta * depth)."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    d = synth_depth(height, width, seed, style, depth_max)
    return TransmissionMap(np.exp(-beta * d), role="true")


def synth_transmission_rgb(height, width, seed, betas, style="perlin", depth_max=1.0):
    """Per-channel transmission (H, W, 3) from one shared depth field."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape != (3,) or np.any(betas < 0):
        raise ConfigError(f"betas must be three non-negative values, got {betas}")
    d = synth_depth(height, width, seed, style, depth_max)
    return np.exp(-betas[None, None, :] * d[:, :, None])
