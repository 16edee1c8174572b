"""Image quality metrics, throughput benchmarking, and evaluation reports.

Full-reference: PSNR (capped at 100 dB) and single-scale SSIM on the luma
channel.  No-reference: UIQM (colorfulness + sharpness + contrast) and
UCIQE (chroma spread + luma contrast + saturation).  All metrics take
float images in [0, 1] and are deterministic.

Every fixed coefficient lives in the tables below so sensitivity checks can
override them per call; values follow the published metric definitions.
Conventions chosen here and frozen by the oracle tests: luma uses the
601 weights; UIQM sub-scores use 8x8 blocks truncated to full blocks, with
zero-denominator blocks contributing zero; UCIQE works on Lab scaled by
1/100.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .imaging import rgb_to_hsv, rgb_to_lab
from .network import forward

PSNR_CAP_DB = 100.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)
UCIQE_CONTRAST_TAIL = 0.01

UIQM_COEFFS = (0.0282, 0.2953, 3.5753)
UICM_COEFFS = (-0.0268, 0.1586)
UIQM_TRIM_ALPHA = 0.1
UIQM_BLOCK = 8
UISM_LAMBDAS = (0.299, 0.587, 0.114)


def _pixels(img):
    arr = img.pixels if hasattr(img, "pixels") else np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"metric input must be (H, W, 3), got {arr.shape}")
    return arr


def _luma(arr):
    w = np.asarray(LUMA_WEIGHTS)
    return arr @ w


def psnr(a, b):
    """Peak signal-to-noise ratio in dB on the [0, 1] scale, capped at 100."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ShapeError(f"psnr shape mismatch: {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def _gaussian_kernel(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _window_means(arr, kernel):
    """Weighted mean over every valid window position (no padding)."""
    size = kernel.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(arr, (size, size))
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2):
    """Mean single-scale SSIM of the luma channel over valid windows."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ShapeError(f"ssim shape mismatch: {pa.shape} vs {pb.shape}")
    if min(pa.shape[0], pa.shape[1]) < window:
        raise ShapeError(
            f"image {pa.shape[0]}x{pa.shape[1]} smaller than the {window}x{window} window"
        )
    x, y = _luma(pa), _luma(pb)
    kernel = _gaussian_kernel(window, sigma)
    mu_x = _window_means(x, kernel)
    mu_y = _window_means(y, kernel)
    xx = _window_means(x * x, kernel) - mu_x**2
    yy = _window_means(y * y, kernel) - mu_y**2
    xy = _window_means(x * y, kernel) - mu_x * mu_y
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# UCIQE
# ---------------------------------------------------------------------------


def uciqe_components(img):
    """(sigma_chroma, luma_contrast, mean_saturation) on 1/100-scaled Lab."""
    arr = _pixels(img)
    lab = rgb_to_lab(arr) / 100.0
    chroma = np.sqrt(lab[..., 1] ** 2 + lab[..., 2] ** 2)
    sigma_c = float(chroma.std())
    lum = lab[..., 0].reshape(-1)
    k = max(1, int(np.floor(UCIQE_CONTRAST_TAIL * lum.size)))
    s = np.sort(lum)
    contrast = float(s[-k:].mean() - s[:k].mean())
    sat = rgb_to_hsv(arr)[..., 1]
    return sigma_c, contrast, float(sat.mean())


def uciqe(img, coeffs=UCIQE_COEFFS):
    c1, c2, c3 = coeffs
    sigma_c, contrast, mean_sat = uciqe_components(img)
    return c1 * sigma_c + c2 * contrast + c3 * mean_sat


# ---------------------------------------------------------------------------
# UIQM
# ---------------------------------------------------------------------------


class UIQMScores(NamedTuple):
    uiqm: float
    uicm: float
    uism: float
    uiconm: float


def _trimmed_stats(values, alpha):
    """Mean over the trimmed interior plus second moment about that mean."""
    flat = np.sort(values.reshape(-1))
    t = int(np.floor(alpha * flat.size))
    interior = flat[t : flat.size - t]
    mu = float(interior.mean())
    var = float(np.mean((flat - mu) ** 2))
    return mu, var


def _uicm(arr, coeffs=UICM_COEFFS, alpha=UIQM_TRIM_ALPHA):
    rg = arr[..., 0] - arr[..., 1]
    yb = 0.5 * (arr[..., 0] + arr[..., 1]) - arr[..., 2]
    mu_rg, var_rg = _trimmed_stats(rg, alpha)
    mu_yb, var_yb = _trimmed_stats(yb, alpha)
    return coeffs[0] * np.sqrt(mu_rg**2 + mu_yb**2) + coeffs[1] * np.sqrt(var_rg + var_yb)


def _sobel_magnitude(chan):
    """3x3 Sobel gradient magnitude with edge replication."""
    p = np.pad(chan, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return np.sqrt(gx**2 + gy**2)


def _blocks(arr, block):
    """View of full block x block tiles; partial edges are dropped."""
    nh = arr.shape[0] // block
    nw = arr.shape[1] // block
    if nh < 1 or nw < 1:
        raise ShapeError(f"image {arr.shape} smaller than one {block}x{block} block")
    trimmed = arr[: nh * block, : nw * block]
    return trimmed.reshape(nh, block, nw, block).transpose(0, 2, 1, 3)


def _eme(arr, block=UIQM_BLOCK):
    """Mean log block contrast; zero-valued extremes contribute zero."""
    tiles = _blocks(arr, block)
    mx = tiles.max(axis=(2, 3))
    mn = tiles.min(axis=(2, 3))
    ok = (mn > 0) & (mx > 0)
    vals = np.zeros_like(mx)
    vals[ok] = np.log(mx[ok] / mn[ok])
    return 2.0 * float(vals.mean())


def _uism(arr, lambdas=UISM_LAMBDAS, block=UIQM_BLOCK):
    total = 0.0
    for c, lam in enumerate(lambdas):
        edge = _sobel_magnitude(arr[..., c]) * arr[..., c]
        total += lam * _eme(edge, block)
    return total


def _uiconm(arr, block=UIQM_BLOCK):
    gray = arr.mean(axis=2)
    tiles = _blocks(gray, block)
    mx = tiles.max(axis=(2, 3))
    mn = tiles.min(axis=(2, 3))
    num = mx - mn
    den = mx + mn
    ok = (den > 0) & (num > 0)
    w = np.zeros_like(mx)
    w[ok] = num[ok] / den[ok]
    vals = np.zeros_like(mx)
    vals[ok] = w[ok] * np.log(w[ok])
    return -float(vals.mean())


def uiqm(img, coeffs=UIQM_COEFFS):
    """Weighted sum of colorfulness, sharpness, and contrast sub-scores."""
    arr = _pixels(img)
    uicm = float(_uicm(arr))
    uism = float(_uism(arr))
    uiconm = float(_uiconm(arr))
    c = coeffs
    return UIQMScores(c[0] * uicm + c[1] * uism + c[2] * uiconm, uicm, uism, uiconm)


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------


def fps_benchmark(model, image_size=64, n_warmup=2, n_runs=10, jobs=4, seed=0):
    """Forward-pass throughput at a given square size.

    Reports single-threaded latencies and a thread-pool throughput mode.
    FPS is n_runs / sum(latencies); percentiles come from the same samples,
    so the bookkeeping is internally consistent by construction.
    """
    if n_runs < 3:
        raise ConfigError(f"n_runs must be >= 3, got {n_runs}")
    rng = np.random.default_rng(seed)
    imgs = [
        rng.random((1, 3, image_size, image_size)).astype(model.np_dtype)
        for _ in range(max(n_warmup, n_runs, jobs))
    ]

    def one(arr):
        with ad.no_grad():
            forward(model, ad.Tensor(arr), pad_to_multiple=True)

    for i in range(n_warmup):
        one(imgs[i])

    latencies = []
    for i in range(n_runs):
        t0 = time.perf_counter()
        one(imgs[i])
        latencies.append(time.perf_counter() - t0)
    lat = np.array(latencies)
    single = {
        "fps": float(n_runs / lat.sum()),
        "latency_mean_s": float(lat.mean()),
        "latency_p50_s": float(np.percentile(lat, 50)),
        "latency_p95_s": float(np.percentile(lat, 95)),
        "latencies_s": [float(v) for v in lat],
    }

    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        list(pool.map(one, imgs[:n_runs]))
    wall = time.perf_counter() - t0
    threaded = {"fps": float(n_runs / wall), "wall_s": float(wall), "jobs": jobs}

    return {
        "image_size": image_size,
        "n_runs": n_runs,
        "n_warmup": n_warmup,
        "single": single,
        "threaded": threaded,
    }


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------

EVAL_SCHEMA = {
    "type": "object",
    "required": ["config_hash", "per_image", "aggregate"],
    "properties": {
        "config_hash": {"type": "string"},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "uiqm", "uciqe"],
                "properties": {
                    "image_id": {"type": "string"},
                    "psnr": {"type": ["number", "null"]},
                    "ssim": {"type": ["number", "null"]},
                    "uiqm": {"type": "number"},
                    "uciqe": {"type": "number"},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["mean", "std"],
                "properties": {"mean": {"type": "number"}, "std": {"type": "number"}},
            },
        },
    },
}


@dataclass
class EvalReport:
    config_hash: str
    per_image: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "per_image": self.per_image,
            "aggregate": self.aggregate,
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    def save_csv(self, path, name="images"):
        cols = ["psnr", "ssim", "uiqm", "uciqe"]
        lines = ["name," + ",".join(f"{c}_mean,{c}_std" for c in cols)]
        cells = [name]
        for c in cols:
            agg = self.aggregate.get(c)
            if agg is None:
                cells += ["", ""]
            else:
                cells += [f"{agg['mean']:.6f}", f"{agg['std']:.6f}"]
        lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def evaluate_images(entries, settings=None, jobs=1):
    """Score (image_id, image, reference-or-None) triples into an EvalReport.

    PSNR/SSIM appear only for entries with a reference; UIQM/UCIQE always.
    """
    settings = dict(settings or {})
    settings.setdefault("ssim_window", SSIM_WINDOW)
    settings.setdefault("uiqm_coeffs", list(UIQM_COEFFS))
    settings.setdefault("uciqe_coeffs", list(UCIQE_COEFFS))
    config_hash = hashlib.sha256(
        json.dumps(settings, sort_keys=True).encode()
    ).hexdigest()[:16]

    def score(entry):
        image_id, img, ref = entry
        row = {"image_id": str(image_id)}
        row["psnr"] = psnr(img, ref) if ref is not None else None
        row["ssim"] = ssim(img, ref) if ref is not None else None
        row["uiqm"] = uiqm(img).uiqm
        row["uciqe"] = uciqe(img)
        return row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(score, entries))
    else:
        rows = [score(e) for e in entries]

    aggregate = {}
    for key in ("psnr", "ssim", "uiqm", "uciqe"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            aggregate[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return EvalReport(config_hash=config_hash, per_image=rows, aggregate=aggregate)
