"""Synthetic dataset generation, the training loop, and inference.

Clean scenes are procedural (gradient-noise backgrounds with random shapes)
or loaded from a directory.  Each sample degrades a clean scene with a drawn
transmission field and airlight; the transmission target defaults to the
dark-channel estimate of the degraded image itself, with the drawn ground
truth available as an alternative supervision mode.

The loss is mean absolute error on the enhanced image plus a weighted mean
squared error on the transmission prediction.  Training shuffles with a
seeded generator, drops the final partial batch, checkpoints periodically,
and aborts on non-finite loss after dumping the last good parameters.
"""

from __future__ import annotations

import json
import time
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from .errors import ConfigError, ImageIOError, NumericsError, ShapeError
from .imaging import ImageGray, ImageRGB, load_image, load_image_any, resize_rgb, save_image
from .network import forward, save_checkpoint
from .optim import AdamState, adam_step
from .physics import (
    Airlight,
    PhysicsParams,
    TransmissionMap,
    degrade,
    estimate_mt_auto,
    perlin_noise,
)


@dataclass
class Sample:
    degraded: ImageRGB
    reference: ImageRGB
    mt_target: TransmissionMap

    def __post_init__(self):
        d = self.degraded.pixels.shape[:2]
        r = self.reference.pixels.shape[:2]
        m = self.mt_target.values.shape
        if not (d == r == m):
            raise ShapeError(f"sample sizes disagree: degraded {d}, reference {r}, map {m}")


@dataclass
class DatasetParams:
    """Distribution the synthetic degradations are drawn from.

    The airlight is biased blue/green, the usual underwater cast.  By default
    one scalar attenuation field degrades all channels; ``per_channel``
    instead shares the depth field but draws per-channel coefficients
    (strongest in red), which makes the corpus harder since the saved
    single-channel transmission is then only the channel mean.
    """

    image_size: int = 64
    depth_style: str = "perlin"
    depth_scale: tuple = (1.8, 2.6)
    per_channel: bool = False
    beta_r: tuple = (0.6, 2.0)
    beta_g: tuple = (0.1, 0.6)
    beta_b: tuple = (0.05, 0.4)
    beta_scalar: tuple = (0.6, 1.1)
    airlight_r: tuple = (0.05, 0.3)
    airlight_g: tuple = (0.4, 0.9)
    airlight_b: tuple = (0.4, 0.9)
    mt_mode: str = "paper"
    # desk-scale window: at 64 px a radius-7 (15x15) min filter spans a
    # quarter of the image side; radius 3 keeps the window/image ratio of
    # the full-scale default
    physics: PhysicsParams = field(default_factory=lambda: PhysicsParams(patch_radius=3))

    def __post_init__(self):
        if self.mt_mode not in ("paper", "true"):
            raise ConfigError(f"mt_mode must be 'paper' or 'true', got '{self.mt_mode}'")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        for name in ("depth_scale", "beta_r", "beta_g", "beta_b", "beta_scalar",
                     "airlight_r", "airlight_g", "airlight_b"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ConfigError(f"{name} range ({lo}, {hi}) is invalid")


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    lambda_mt: float = 1.0
    iterations: int = 2000
    seed: int = 0
    image_size: int = 64
    checkpoint_every: int = 200
    out_dir: str | None = None
    # right-angle rotations and flips; the transmission targets are exactly
    # equivariant under these, so augmented triples stay physically consistent
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lambda_mt < 0:
            raise ConfigError(f"lambda_mt must be >= 0, got {self.lambda_mt}")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    loss_terms: list = field(default_factory=list)
    val_records: list = field(default_factory=list)
    iter_seconds: list = field(default_factory=list)
    final_checkpoint: str | None = None
    config: dict = field(default_factory=dict)
    dataset_size: int = 0

    def to_dict(self):
        return {
            "losses": self.losses,
            "loss_terms": self.loss_terms,
            "val_records": self.val_records,
            "iter_seconds": self.iter_seconds,
            "final_checkpoint": self.final_checkpoint,
            "config": self.config,
            "dataset_size": self.dataset_size,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# scenes and datasets
# ---------------------------------------------------------------------------


def _saturate(color, rng, channel=None):
    # one channel forced near zero, like strongly colored reef material
    c = color.copy()
    ch = int(rng.integers(0, 3)) if channel is None else channel
    c[ch] *= rng.uniform(0.0, 0.02)
    return c


def procedural_scene(size, rng):
    """A clean test scene: smooth colored background plus soft-edged shapes.

    Every color is saturated (one channel near zero) so each local window
    keeps a usable dark-channel anchor after degradation; the background
    zeroes green or blue, whose airlight is never small, rather than red.
    One near-black blob is always present.  Soft edges keep most of the
    energy in low frequencies.
    """
    h = w = size
    base = perlin_noise(h, w, rng, cells=int(rng.integers(2, 5)), octaves=2)
    c0 = _saturate(rng.uniform(0.1, 0.6, 3), rng, channel=int(rng.integers(1, 3)))
    c1 = _saturate(rng.uniform(0.4, 0.95, 3), rng)
    img = c0 + base[:, :, None] * (c1 - c0)
    yy, xx = np.mgrid[0:h, 0:w]
    n_shapes = int(rng.integers(4, 8))
    colors = [_saturate(rng.uniform(0.0, 1.0, 3), rng) for _ in range(n_shapes)]
    colors[-1] = rng.uniform(0.0, 0.05, 3)
    feather = max(1.2, 0.02 * size)
    for color in colors:
        if rng.uniform() < 0.5:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(0.08, 0.2) * size
            dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            wgt = 1.0 / (1.0 + np.exp((dist - rad) / feather))
        else:
            y0, x0 = rng.uniform(0, h * 0.8), rng.uniform(0, w * 0.8)
            y1 = y0 + rng.uniform(0.15, 0.4) * h
            x1 = x0 + rng.uniform(0.15, 0.4) * w
            sig = lambda z: 1.0 / (1.0 + np.exp(-z / feather))
            wgt = (sig(yy - y0) * sig(y1 - yy) * sig(xx - x0) * sig(x1 - xx))
        img = img * (1.0 - wgt[:, :, None]) + color * wgt[:, :, None]
    img += rng.normal(0.0, 0.005, img.shape)
    return ImageRGB(np.clip(img, 0.0, 1.0))


def _depth_field(size, style, rng):
    if style == "constant":
        return np.full((size, size), 1.0)
    if style == "linear_ramp":
        return np.repeat(np.linspace(0.0, 1.0, size)[:, None], size, axis=1)
    if style == "perlin":
        d = perlin_noise(size, size, rng, cells=int(rng.integers(3, 6)), octaves=2)
        span = d.max() - d.min()
        # full span: every scene has a near region and a far water column
        return (d - d.min()) / span if span > 0 else d
    raise ConfigError(f"unknown depth style '{style}'")


def _load_clean_dir(path, size):
    try:
        entries = list(Path(path).iterdir())
    except (FileNotFoundError, NotADirectoryError) as exc:
        raise ImageIOError(f"{path}: not a readable directory") from exc
    files = sorted(p for p in entries if p.suffix.lower() in (".png", ".ppm", ".mttb"))
    if not files:
        raise ConfigError(f"{path}: no usable images (.png/.ppm/.mttb)")
    out = []
    for f in files:
        img = load_image_any(str(f))
        if (img.height, img.width) != (size, size):
            img = resize_rgb(img, size, size)
        out.append(img)
    return out


def make_synthetic_dataset(source, n, params=None, seed=0, jobs=1):
    """Draw ``n`` degraded/reference/transmission-target triples.

    ``source`` is None for procedural scenes, a directory of clean images
    (cycled if fewer than ``n``), or a list of ImageRGB.  Fully determined
    by ``seed``: each sample gets its own child seed stream, so the result
    is identical for any ``jobs`` count.
    """
    params = params or DatasetParams()
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    size = params.image_size
    cleans = None
    if source is not None:
        cleans = source if isinstance(source, list) else _load_clean_dir(source, size)

    children = np.random.SeedSequence(seed).spawn(n)

    def one(i):
        rng = np.random.default_rng(children[i])
        if cleans is None:
            clean = procedural_scene(size, rng)
        else:
            clean = cleans[i % len(cleans)]
        depth = _depth_field(size, params.depth_style, rng) * rng.uniform(*params.depth_scale)
        if params.per_channel:
            betas = np.array(
                [
                    rng.uniform(*params.beta_r),
                    rng.uniform(*params.beta_g),
                    rng.uniform(*params.beta_b),
                ]
            )
            t = np.exp(-betas[None, None, :] * depth[:, :, None])
            t_single = t.mean(axis=2)
        else:
            beta = rng.uniform(*params.beta_scalar)
            t = np.exp(-beta * depth)
            t_single = t
        airlight = Airlight(
            rng.uniform(*params.airlight_r),
            rng.uniform(*params.airlight_g),
            rng.uniform(*params.airlight_b),
        )
        degraded = degrade(clean, t, airlight)
        if params.mt_mode == "paper":
            mt = estimate_mt_auto(degraded, params.physics)
        else:
            mt = TransmissionMap(t_single, role="true")
        return Sample(degraded=degraded, reference=clean, mt_target=mt)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]


def dataset_hash(samples):
    """Stable content hash over all sample arrays."""
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.degraded.pixels).tobytes())
        h.update(np.ascontiguousarray(s.reference.pixels).tobytes())
        h.update(np.ascontiguousarray(s.mt_target.values).tobytes())
    return h.hexdigest()


def save_dataset(samples, out_dir):
    """Write PNG pairs, exact transmission targets, and a manifest."""
    out = Path(out_dir)
    for sub in ("degraded", "reference", "mt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, s in enumerate(samples):
        deg = f"degraded/{i:05d}.png"
        ref = f"reference/{i:05d}.png"
        mt = f"mt/{i:05d}.mttb"
        save_image(s.degraded, out / deg)
        save_image(s.reference, out / ref)
        container.write_tensors(out / mt, {"mt": s.mt_target.values})
        save_image(ImageGray(s.mt_target.values), out / f"mt/{i:05d}.png")
        manifest.append(
            {
                "degraded_path": deg,
                "reference_path": ref,
                "mt_path": mt,
                "mt_role": s.mt_target.role,
            }
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return out / "manifest.json"


def load_dataset(path):
    """Read a dataset written by ``save_dataset``."""
    root = Path(path)
    manifest_path = root / "manifest.json" if root.is_dir() else root
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise ImageIOError(f"{manifest_path}: no such manifest") from exc
    except json.JSONDecodeError as exc:
        raise ImageIOError(f"{manifest_path}: invalid JSON ({exc})") from exc
    samples = []
    for entry in manifest:
        degraded = load_image(root / entry["degraded_path"])
        reference = load_image(root / entry["reference_path"])
        tensors = container.read_tensors(root / entry["mt_path"])
        mt = TransmissionMap(tensors["mt"], role=entry.get("mt_role", "estimated"))
        samples.append(Sample(degraded=degraded, reference=reference, mt_target=mt))
    return samples


# ---------------------------------------------------------------------------
# loss and loop
# ---------------------------------------------------------------------------


def compute_loss(enh, ref, mt_pred, mt_target, lambda_mt=1.0):
    """Mean |enhanced - reference| + lambda * mean (mt - target)^2.

    Returns the scalar loss tensor and a float dict of the two terms.
    """
    l1 = ad.mean_all(ad.abs_val(ad.sub(enh, ref)))
    l2 = ad.mean_all(ad.square(ad.sub(mt_pred, mt_target)))
    total = ad.add(l1, ad.scale_shift(l2, lambda_mt))
    return total, {"image_l1": float(l1.data), "mt_mse": float(l2.data)}


def _stack(samples, np_dtype):
    deg = np.stack([s.degraded.pixels.transpose(2, 0, 1) for s in samples]).astype(np_dtype)
    ref = np.stack([s.reference.pixels.transpose(2, 0, 1) for s in samples]).astype(np_dtype)
    mt = np.stack([s.mt_target.values[None, :, :] for s in samples]).astype(np_dtype)
    return deg, ref, mt


def _augment_batch(arrays, rng):
    """Apply one random right-angle rotation + optional mirror per sample.

    The same transform hits every array of the triple, keeping image,
    reference, and map aligned.  Square images only.
    """
    n = arrays[0].shape[0]
    quarter_turns = rng.integers(0, 4, size=n)
    mirror = rng.integers(0, 2, size=n)
    out = [a.copy() for a in arrays]
    for i in range(n):
        for a in out:
            view = np.rot90(a[i], int(quarter_turns[i]), axes=(1, 2))
            if mirror[i]:
                view = view[:, :, ::-1]
            a[i] = view.copy()
    return out


def train(model, samples, cfg, val_samples=None):
    """Optimize ``model`` in place; returns a TrainReport.

    Deterministic for fixed model seed, dataset, and config.  On a
    non-finite loss the last good parameters and the offending batch
    indices are dumped to ``out_dir`` before raising.
    """
    if len(samples) < cfg.batch_size:
        raise ConfigError(
            f"dataset has {len(samples)} samples, need at least batch_size={cfg.batch_size}"
        )
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    np_dtype = model.np_dtype
    deg, ref, mt = _stack(samples, np_dtype)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    report = TrainReport(config={"train": vars(cfg).copy(), "model": model.config.to_dict()},
                         dataset_size=len(samples))

    def checkpoint(tag):
        if not out_dir:
            return None
        p = out_dir / f"{tag}.mttb"
        save_checkpoint(model, p)
        return str(p)

    def run_val(step):
        if not val_samples:
            return
        from .metrics import psnr, ssim

        scores_p, scores_s = [], []
        for s in val_samples[:16]:
            restored, _ = infer(model, s.degraded)
            scores_p.append(psnr(restored, s.reference))
            scores_s.append(ssim(restored, s.reference))
        report.val_records.append(
            {"iteration": step, "psnr": float(np.mean(scores_p)), "ssim": float(np.mean(scores_s))}
        )

    step = 0
    order = np.arange(len(samples))
    pos = len(samples)
    while step < cfg.iterations:
        if pos + cfg.batch_size > len(samples):
            order = rng.permutation(len(samples))
            pos = 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size

        t0 = time.perf_counter()
        for p in model.params.values():
            p.grad = None
        batch = (deg[idx], ref[idx], mt[idx])
        if cfg.augment:
            batch = _augment_batch(batch, rng)
        x = ad.Tensor(batch[0])
        enh, mt_pred = forward(model, x)
        loss, terms = compute_loss(
            enh, ad.Tensor(batch[1]), mt_pred, ad.Tensor(batch[2]), cfg.lambda_mt
        )
        if not np.isfinite(loss.data):
            ck = checkpoint("abort_last_good")
            if out_dir:
                (out_dir / "abort.json").write_text(
                    json.dumps({"iteration": step, "batch_indices": [int(i) for i in idx],
                                "checkpoint": ck}) + "\n"
                )
            raise NumericsError(
                f"non-finite loss at iteration {step}; batch indices {list(map(int, idx))}"
            )
        ad.backward(loss)
        adam_step(model.params, state)
        step += 1
        report.losses.append(float(loss.data))
        report.loss_terms.append(terms)
        report.iter_seconds.append(time.perf_counter() - t0)

        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.iterations:
            checkpoint(f"ckpt_{step:06d}")
            run_val(step)

    report.final_checkpoint = checkpoint("final")
    run_val(step)
    if out_dir:
        report.save(out_dir / "train_report.json")
    return report


def infer(model, img):
    """Restore one image.  Returns (enhanced ImageRGB, predicted map)."""
    x = ad.Tensor(img.pixels.transpose(2, 0, 1)[None, :, :, :].astype(model.np_dtype))
    with ad.no_grad():
        enh, mt_pred = forward(model, x, pad_to_multiple=True)
    out = np.clip(enh.data[0].transpose(1, 2, 0), 0.0, 1.0).astype(np.float64)
    mt = np.clip(mt_pred.data[0, 0], 0.0, 1.0).astype(np.float64)
    return ImageRGB(out), ImageGray(mt)
