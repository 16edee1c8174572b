"""Command-line front end.

One executable, subcommands ``mt``, ``degrade``, ``restore``, ``synth-data``,
``train``, ``eval``, ``bench``.  Every run logs its resolved configuration
and seed to stderr; ``--dump-config`` prints the resolved configuration as
JSON and exits.  A ``--config FILE`` JSON provides defaults that explicit
flags override.  Exit codes: 0 success, 1 usage or configuration error,
2 file/format error, 3 numerical abort.  Errors go to stderr prefixed
``error[usage]:``, ``error[io]:``, or ``error[numeric]:``.

Image paths ending in ``.mttb`` are read/written as exact float tensors
instead of quantized PNG; transmission maps accept either form.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, metrics, network, physics, training
from .errors import ConfigError, ImageIOError, NumericsError, ShapeError, UsageError
from .imaging import ImageGray, ImageRGB, load_image_any, save_image, save_image_any

log = logging.getLogger("uwrestore")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_triplet(text, what):
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"{what} needs three comma-separated values, got '{text}'")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"{what} has a non-numeric component in '{text}'") from None


def _load_mt(path):
    """Transmission map from an exact tensor container or a gray image."""
    if str(path).endswith(".mttb"):
        entries = container.read_tensors(path)
        arr = entries.get("mt", next(iter(entries.values())))
        return physics.TransmissionMap(arr, role="true")
    img = load_image_any(path)
    return physics.TransmissionMap(img.pixels[:, :, 0], role="estimated")


def _save_mt(tm, path):
    if str(path).endswith(".mttb"):
        container.write_tensors(path, {"mt": tm.values})
    else:
        save_image(ImageGray(tm.values), path)


def _resolve(args, defaults):
    """Merge explicit flags over --config file entries over defaults."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ImageIOError(f"{args.config}: no such config file") from exc
        except json.JSONDecodeError as exc:
            raise ImageIOError(f"{args.config}: invalid JSON ({exc})") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"{args.config}: unknown config keys {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _announce(command, resolved):
    log.info("command: %s", command)
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))
    if getattr(_announce, "dump", False):
        print(json.dumps(resolved, sort_keys=True, indent=1, default=str))
        return True
    return False


def _build_or_load(checkpoint, preset, seed):
    if checkpoint:
        return network.load_checkpoint(checkpoint)
    cfg = network.MTURConfig.tiny() if preset == "tiny" else network.MTURConfig()
    return network.build(cfg, seed=seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_mt(args):
    defaults = {"radius": 7, "quantile": 0.001, "seed": 0}
    cfg = _resolve(args, defaults)
    if _announce("mt", cfg):
        return 0
    params = physics.PhysicsParams(
        patch_radius=int(cfg["radius"]), airlight_quantile=float(cfg["quantile"])
    )
    img = load_image_any(args.input)
    airlight = physics.estimate_airlight(img, params)
    tm = physics.estimate_mt(img, airlight, params.patch_radius)
    log.info("estimated airlight: %.4f %.4f %.4f", airlight.r, airlight.g, airlight.b)
    _save_mt(tm, args.output)
    if args.mttb:
        container.write_tensors(args.mttb, {"mt": tm.values})
    return 0


def cmd_degrade(args):
    defaults = {
        "airlight": None,
        "beta": "1.0",
        "depth_style": "perlin",
        "depth_scale": 1.0,
        "seed": 0,
    }
    cfg = _resolve(args, defaults)
    if _announce("degrade", cfg):
        return 0
    seed = int(cfg["seed"])
    rng = np.random.default_rng(seed)
    clean = load_image_any(args.input)
    if cfg["airlight"]:
        a = physics.Airlight(*_parse_triplet(cfg["airlight"], "--airlight"))
    else:
        a = physics.Airlight(rng.uniform(0.05, 0.3), rng.uniform(0.4, 0.9), rng.uniform(0.4, 0.9))
    beta_text = str(cfg["beta"])
    if "," in beta_text:
        betas = _parse_triplet(beta_text, "--beta")
        t = physics.synth_transmission_rgb(
            clean.height, clean.width, seed, betas, cfg["depth_style"], float(cfg["depth_scale"])
        )
        t_save = physics.TransmissionMap(t.mean(axis=2), role="true")
    else:
        try:
            beta = float(beta_text)
        except ValueError:
            raise UsageError(f"--beta must be a number or r,g,b triple, got '{beta_text}'") from None
        tm = physics.synth_transmission(
            clean.height, clean.width, seed, beta, cfg["depth_style"], float(cfg["depth_scale"])
        )
        t = tm
        t_save = tm
    degraded = physics.degrade(clean, t, a)
    save_image_any(degraded, args.output)
    log.info("airlight used: %.4f %.4f %.4f", a.r, a.g, a.b)
    if args.save_mt:
        _save_mt(t_save, args.save_mt)
    return 0


def cmd_restore(args):
    defaults = {"radius": 7, "quantile": 0.001, "t0": 0.1, "airlight": None, "seed": 0}
    cfg = _resolve(args, defaults)
    if _announce("restore", cfg):
        return 0
    img = load_image_any(args.input)
    if args.mode == "classical":
        params = physics.PhysicsParams(
            patch_radius=int(cfg["radius"]),
            airlight_quantile=float(cfg["quantile"]),
            t_floor=float(cfg["t0"]),
        )
        if cfg["airlight"]:
            a = physics.Airlight(*_parse_triplet(cfg["airlight"], "--airlight"))
        else:
            a = physics.estimate_airlight(img, params)
        if args.t_map:
            tm = _load_mt(args.t_map)
        else:
            tm = physics.estimate_mt(img, a, params.patch_radius)
        restored = physics.invert_restore(img, tm, a, params.t_floor)
        save_image_any(restored, args.output)
        if args.save_mt:
            _save_mt(tm, args.save_mt)
        return 0
    # neural
    if not args.checkpoint:
        raise UsageError("restore --mode neural requires --checkpoint")
    model = network.load_checkpoint(args.checkpoint)
    restored, mt_pred = training.infer(model, img)
    save_image_any(restored, args.output)
    if args.save_mt:
        _save_mt(physics.TransmissionMap(mt_pred.values, role="predicted"), args.save_mt)
    return 0


def cmd_synth_data(args):
    defaults = {
        "count": 100,
        "size": 64,
        "seed": 0,
        "mt_mode": "paper",
        "depth_style": "perlin",
        "clean_dir": None,
        "jobs": 1,
    }
    cfg = _resolve(args, defaults)
    if _announce("synth-data", cfg):
        return 0
    params = training.DatasetParams(
        image_size=int(cfg["size"]), mt_mode=cfg["mt_mode"], depth_style=cfg["depth_style"]
    )
    samples = training.make_synthetic_dataset(
        cfg["clean_dir"], int(cfg["count"]), params, seed=int(cfg["seed"]),
        jobs=int(cfg["jobs"]),
    )
    manifest = training.save_dataset(samples, args.output)
    log.info("dataset hash: %s", training.dataset_hash(samples))
    log.info("wrote %d samples, manifest %s", len(samples), manifest)
    return 0


def cmd_train(args):
    defaults = {
        "iterations": 2000,
        "batch_size": 8,
        "lr": 1e-3,
        "lambda_mt": 1.0,
        "seed": 0,
        "size": 64,
        "preset": "tiny",
        "checkpoint_every": 200,
        "val_count": 0,
        "procedural": 0,
        "augment": 1,
    }
    cfg = _resolve(args, defaults)
    if _announce("train", cfg):
        return 0
    if args.data:
        samples = training.load_dataset(args.data)
    elif int(cfg["procedural"]) > 0:
        params = training.DatasetParams(image_size=int(cfg["size"]))
        samples = training.make_synthetic_dataset(
            None, int(cfg["procedural"]), params, seed=int(cfg["seed"])
        )
    else:
        raise UsageError("train needs --data DIR or --procedural N")
    val_count = int(cfg["val_count"])
    val = samples[-val_count:] if val_count else None
    if val_count:
        samples = samples[:-val_count]
    model = _build_or_load(args.checkpoint, cfg["preset"], int(cfg["seed"]))
    tc = training.TrainConfig(
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        lambda_mt=float(cfg["lambda_mt"]),
        iterations=int(cfg["iterations"]),
        seed=int(cfg["seed"]),
        image_size=int(cfg["size"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
        out_dir=args.output,
        augment=bool(int(cfg["augment"])),
    )
    report = training.train(model, samples, tc, val_samples=val)
    log.info(
        "finished %d iterations; first loss %.5f, last loss %.5f; checkpoint %s",
        len(report.losses),
        report.losses[0],
        report.losses[-1],
        report.final_checkpoint,
    )
    return 0


def _collect_pairs(input_dir, reference_dir):
    ins = sorted(
        p for p in Path(input_dir).iterdir() if p.suffix.lower() in (".png", ".ppm", ".mttb")
    )
    if not ins:
        raise ImageIOError(f"{input_dir}: no images found")
    entries = []
    for p in ins:
        ref = None
        if reference_dir:
            for suffix in (p.suffix, ".png", ".ppm", ".mttb"):
                cand = Path(reference_dir) / (p.stem + suffix)
                if cand.exists():
                    ref = load_image_any(cand)
                    break
            if ref is None:
                raise ImageIOError(f"{reference_dir}: no reference found for {p.name}")
        entries.append((p.stem, load_image_any(p), ref))
    return entries


def cmd_eval(args):
    defaults = {"jobs": 1, "name": None, "seed": 0}
    cfg = _resolve(args, defaults)
    if _announce("eval", cfg):
        return 0
    entries = _collect_pairs(args.input, args.reference)
    report = metrics.evaluate_images(entries, jobs=int(cfg["jobs"]))
    report.save_json(args.output)
    if args.csv:
        report.save_csv(args.csv, name=cfg["name"] or Path(args.input).name)
    for key, agg in sorted(report.aggregate.items()):
        log.info("%s: mean %.4f std %.4f", key, agg["mean"], agg["std"])
    return 0


def cmd_bench(args):
    defaults = {
        "sizes": "64,256",
        "runs": 10,
        "warmup": 2,
        "jobs": 4,
        "seed": 0,
        "preset": "tiny",
    }
    cfg = _resolve(args, defaults)
    if _announce("bench", cfg):
        return 0
    model = _build_or_load(args.checkpoint, cfg["preset"], int(cfg["seed"]))
    results = []
    for token in str(cfg["sizes"]).split(","):
        try:
            size = int(token)
        except ValueError:
            raise UsageError(f"--sizes must be comma-separated integers, got '{token}'") from None
        res = metrics.fps_benchmark(
            model,
            image_size=size,
            n_warmup=int(cfg["warmup"]),
            n_runs=int(cfg["runs"]),
            jobs=int(cfg["jobs"]),
            seed=int(cfg["seed"]),
        )
        results.append(res)
        print(
            f"size {size:4d}: {res['single']['fps']:8.2f} fps single "
            f"(p50 {res['single']['latency_p50_s'] * 1e3:.1f} ms, "
            f"p95 {res['single']['latency_p95_s'] * 1e3:.1f} ms), "
            f"{res['threaded']['fps']:8.2f} fps threaded x{res['threaded']['jobs']}"
        )
    if args.output:
        Path(args.output).write_text(json.dumps(results, sort_keys=True, indent=1) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON file with default flag values")
    p.add_argument("--seed", type=int, default=None, help="RNG seed")
    p.add_argument("--dump-config", action="store_true", help="print resolved config and exit")


def build_parser():
    parser = _Parser(prog="uwrestore", description="Underwater image restoration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mt", parents=[], help="estimate a transmission map")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--mttb", help="also write the exact map as a tensor container")
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--quantile", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_mt)

    p = sub.add_parser("degrade", help="apply synthetic underwater degradation")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--airlight", default=None, help="r,g,b in (0,1]; random draw if omitted")
    p.add_argument("--beta", default=None, help="attenuation, scalar or r,g,b")
    p.add_argument("--depth-style", dest="depth_style", default=None,
                   choices=("constant", "linear_ramp", "perlin"))
    p.add_argument("--depth-scale", dest="depth_scale", type=float, default=None)
    p.add_argument("--save-mt", dest="save_mt", default=None,
                   help="write the transmission used (.png or .mttb)")
    _add_common(p)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("restore", help="invert the degradation")
    p.add_argument("--mode", choices=("classical", "neural"), required=True)
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--airlight", default=None, help="r,g,b; estimated if omitted (classical)")
    p.add_argument("--t-map", dest="t_map", default=None,
                   help="transmission map file; estimated if omitted (classical)")
    p.add_argument("--t0", type=float, default=None, help="transmission floor")
    p.add_argument("--radius", type=int, default=None)
    p.add_argument("--quantile", type=float, default=None)
    p.add_argument("--checkpoint", default=None, help="model checkpoint (neural)")
    p.add_argument("--save-mt", dest="save_mt", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--count", "-n", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--mt-mode", dest="mt_mode", default=None, choices=("paper", "true"))
    p.add_argument("--depth-style", dest="depth_style", default=None,
                   choices=("constant", "linear_ramp", "perlin"))
    p.add_argument("--clean-dir", dest="clean_dir", default=None)
    p.add_argument("--jobs", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the restoration network")
    p.add_argument("--data", default=None, help="dataset dir with manifest.json")
    p.add_argument("--procedural", type=int, default=None,
                   help="generate N procedural samples instead of --data")
    p.add_argument("--output", "-o", required=True, help="checkpoint/report directory")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda-mt", dest="lambda_mt", type=float, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--preset", choices=("tiny", "full"), default=None)
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--val-count", dest="val_count", type=int, default=None)
    p.add_argument("--augment", type=int, choices=(0, 1), default=None,
                   help="random right-angle rotation/mirror per batch (default on)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a directory of images")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--reference", default=None, help="matching reference directory")
    p.add_argument("--output", "-o", required=True, help="report JSON path")
    p.add_argument("--csv", default=None, help="also write an aggregate CSV")
    p.add_argument("--name", default=None, help="row label for the CSV")
    p.add_argument("--jobs", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure forward-pass throughput")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--preset", choices=("tiny", "full"), default=None)
    p.add_argument("--sizes", default=None, help="comma-separated square sizes")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--output", "-o", default=None, help="write results JSON")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _announce.dump = bool(getattr(args, "dump_config", False))
        seed = getattr(args, "seed", None)
        log.info("seed: %s", seed if seed is not None else "default (0)")
        return args.func(args)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 1
    except (ImageIOError, OSError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 3
    finally:
        _announce.dump = False


if __name__ == "__main__":
    sys.exit(main())
