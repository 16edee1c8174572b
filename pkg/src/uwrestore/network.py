"""Two-branch restoration network guided by a medium-transmission map (MTUR).

One stride-2 stem feeds both branches.  The transmission branch is a small
encoder/decoder (stride-2 conv + group norm + SELU blocks, additive skips, a
1x1 head resampled to input size, sigmoid).  The enhancement branch drops to
quarter resolution and runs a stack of dilated residual blocks (two 3x3
dilated convs with an inner ReLU and a residual add).  The branches interact
three ways, each individually switchable for ablations:

* lateral 1x1 projections of decoder features added into the residual stack
  (``use_skip_connection``),
* output-level guidance F = O + O * t on the stack output, with t the
  predicted map (``use_mt_guidance`` also gates the other two),
* concatenation of the predicted map before the final convs
  (``use_final_concat``; ``use_conv_after_concat`` picks two 3x3 convs versus
  a single 1x1).

The enhanced output is raw (no activation); clamping happens at export.
All 3x3 convolutions use reflect padding; weights draw from a fan-in-scaled
uniform distribution, biases start at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from .errors import ConfigError, ShapeError

DEFAULT_DILATIONS = (1, 1, 2, 2, 4, 8, 4, 2, 2, 1)


@dataclass
class MTURConfig:
    """Architecture hyperparameters.  ``tiny()`` is the desk-scale preset."""

    base_channels: int = 32
    drb_dilations: tuple = DEFAULT_DILATIONS
    mt_encoder_blocks: int = 4
    fusion_points: tuple = (4, 8)
    groups_gn: int = 8
    use_mt_guidance: bool = True
    use_skip_connection: bool = True
    use_final_concat: bool = True
    use_conv_after_concat: bool = True

    @classmethod
    def tiny(cls, **overrides):
        return replace(cls(base_channels=8), **overrides)

    def validate(self):
        problems = []
        if self.base_channels < 1:
            problems.append(f"base_channels must be >= 1, got {self.base_channels}")
        if self.mt_encoder_blocks < 2:
            problems.append(f"mt_encoder_blocks must be >= 2, got {self.mt_encoder_blocks}")
        if not self.drb_dilations:
            problems.append("drb_dilations must not be empty")
        if any(d < 1 for d in self.drb_dilations):
            problems.append(f"dilations must be >= 1, got {self.drb_dilations}")
        if self.groups_gn < 1:
            problems.append(f"groups_gn must be >= 1, got {self.groups_gn}")
        n = len(self.drb_dilations)
        for p in self.fusion_points:
            if not (1 <= p <= n):
                problems.append(f"fusion point {p} outside 1..{n}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def downsample_factor(self):
        """Input dims must divide this (stem plus encoder strides)."""
        return 2 ** (self.mt_encoder_blocks + 1)

    def gn_groups_for(self, channels):
        g = min(self.groups_gn, channels)
        if channels % g != 0:
            raise ConfigError(f"{channels} channels not divisible into {g} norm groups")
        return g

    def to_dict(self):
        return {
            "base_channels": self.base_channels,
            "drb_dilations": list(self.drb_dilations),
            "mt_encoder_blocks": self.mt_encoder_blocks,
            "fusion_points": list(self.fusion_points),
            "groups_gn": self.groups_gn,
            "use_mt_guidance": self.use_mt_guidance,
            "use_skip_connection": self.use_skip_connection,
            "use_final_concat": self.use_final_concat,
            "use_conv_after_concat": self.use_conv_after_concat,
        }

    @classmethod
    def from_dict(cls, d):
        cfg = cls(
            base_channels=int(d["base_channels"]),
            drb_dilations=tuple(d["drb_dilations"]),
            mt_encoder_blocks=int(d["mt_encoder_blocks"]),
            fusion_points=tuple(d["fusion_points"]),
            groups_gn=int(d["groups_gn"]),
            use_mt_guidance=bool(d["use_mt_guidance"]),
            use_skip_connection=bool(d["use_skip_connection"]),
            use_final_concat=bool(d["use_final_concat"]),
            use_conv_after_concat=bool(d["use_conv_after_concat"]),
        )
        cfg.validate()
        return cfg


@dataclass
class MTURModel:
    """Named parameters plus the config that shaped them."""

    config: MTURConfig
    params: dict = field(default_factory=dict)
    dtype: str = "f32"

    def param_count(self):
        return sum(int(p.data.size) for p in self.params.values())

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def _encoder_channels(cfg):
    """Channel widths after the stem and after each encoder block."""
    c = cfg.base_channels
    return [c] + [c * 2 ** (i + 1) for i in range(cfg.mt_encoder_blocks)]


def _stream_channels(cfg):
    """Width of the dilated residual stream (quarter resolution)."""
    return cfg.base_channels * 2


def _lateral_enabled(cfg):
    return cfg.use_mt_guidance and cfg.use_skip_connection and bool(cfg.fusion_points)


def _concat_enabled(cfg):
    return cfg.use_mt_guidance and cfg.use_final_concat


def build(config, seed, dtype="f32", drb_identity_init=False):
    """Construct a model with seed-deterministic initialization.

    Weights are drawn in float64 from U(-sqrt(6/fan_in), +sqrt(6/fan_in))
    in a fixed parameter order, then cast, so a seed fully determines the
    parameters.  ``drb_identity_init`` zeroes every second residual conv so
    each block starts as the identity (used by tests).
    """
    config.validate()
    if dtype not in ("f32", "f64"):
        raise ConfigError(f"dtype must be 'f32' or 'f64', got '{dtype}'")
    np_dtype = np.float32 if dtype == "f32" else np.float64
    rng = np.random.default_rng(seed)
    params = {}

    def conv(name, cin, cout, k, zero=False, gain=1.0):
        # Fan-in-scaled uniform; residual-closing convs use a reduced gain so
        # the un-normalized stack keeps roughly unit variance at init.
        fan_in = cin * k * k
        bound = gain * np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        if zero:
            w = np.zeros_like(w)
        params[name + ".weight"] = ad.Tensor(w.astype(np_dtype), requires_grad=True, name=name + ".weight")
        params[name + ".bias"] = ad.Tensor(
            np.zeros(cout, dtype=np_dtype), requires_grad=True, name=name + ".bias"
        )

    def gn(name, channels):
        config.gn_groups_for(channels)
        params[name + ".gamma"] = ad.Tensor(
            np.ones(channels, dtype=np_dtype), requires_grad=True, name=name + ".gamma"
        )
        params[name + ".beta"] = ad.Tensor(
            np.zeros(channels, dtype=np_dtype), requires_grad=True, name=name + ".beta"
        )

    enc = _encoder_channels(config)
    conv("stem.conv", 3, enc[0], 3)
    gn("stem.gn", enc[0])

    for i in range(config.mt_encoder_blocks):
        conv(f"mt_enc.{i}.conv", enc[i], enc[i + 1], 3)
        gn(f"mt_enc.{i}.gn", enc[i + 1])

    dec = list(reversed(enc))  # e.g. [16C, 8C, 4C, 2C, C]
    for i in range(config.mt_encoder_blocks):
        conv(f"mt_dec.{i}.conv", dec[i], dec[i + 1], 3)
        gn(f"mt_dec.{i}.gn", dec[i + 1])

    conv("mt_head.conv", enc[0], 1, 1)

    stream = _stream_channels(config)
    conv("enh_entry.conv", enc[0], stream, 3)
    res_gain = 1.0 / np.sqrt(2.0 * len(config.drb_dilations))
    for j in range(len(config.drb_dilations)):
        conv(f"drb.{j}.conv1", stream, stream, 3)
        conv(f"drb.{j}.conv2", stream, stream, 3, zero=drb_identity_init, gain=res_gain)

    if _lateral_enabled(config):
        for p in config.fusion_points:
            # injected features must not swamp the stream at init
            conv(f"lateral.{p}", stream, stream, 1, gain=res_gain)

    head_in = stream + 1 if _concat_enabled(config) else stream
    if config.use_conv_after_concat:
        conv("head.conv1", head_in, config.base_channels, 3)
        # small output scale at init: predictions start near zero, inside
        # the target range, instead of at the raw feature scale
        conv("head.conv2", config.base_channels, 3, 3, gain=0.1)
    else:
        conv("head.conv1x1", head_in, 3, 1, gain=0.1)

    return MTURModel(config=config, params=params, dtype=dtype)


def fuse(features, mt):
    """Guided fusion F = O + O * t; the map is resampled to match O."""
    if len(mt.shape) != 4 or mt.shape[1] != 1:
        raise ShapeError(f"guidance map must be N1HW, got {mt.shape}")
    if mt.shape[2:] != features.shape[2:]:
        mt = ad.resample(mt, features.shape[2], features.shape[3], mode="bilinear")
    return ad.add(features, ad.mul(features, mt))


def _conv_block(params, cfg, name, x, stride, act):
    """conv + group norm + activation, the encoder/decoder building block."""
    y = ad.conv2d(
        x, params[name + ".conv.weight"], params[name + ".conv.bias"], stride=stride
    )
    groups = cfg.gn_groups_for(y.shape[1])
    y = ad.group_norm(y, groups, params[name + ".gn.gamma"], params[name + ".gn.beta"])
    return ad.activation(y, act)


def _run_mt_branch(model, stem_out, out_h, out_w):
    """Returns (mt_pred N1HW at out size, decoder feature at stream size)."""
    cfg = model.config
    p = model.params
    feats = [stem_out]
    x = stem_out
    for i in range(cfg.mt_encoder_blocks):
        x = _conv_block(p, cfg, f"mt_enc.{i}", x, 2, "selu")
        feats.append(x)
    stream_feat = None
    for i in range(cfg.mt_encoder_blocks):
        skip = feats[cfg.mt_encoder_blocks - 1 - i]
        x = ad.resample(x, skip.shape[2], skip.shape[3], mode="nearest")
        x = _conv_block(p, cfg, f"mt_dec.{i}", x, 1, "selu")
        x = ad.add(x, skip)
        if i == cfg.mt_encoder_blocks - 2:
            stream_feat = x
    logits = ad.conv2d(x, p["mt_head.conv.weight"], p["mt_head.conv.bias"])
    logits = ad.resample(logits, out_h, out_w, mode="bilinear")
    return ad.sigmoid(logits), stream_feat


def _run_drbs(model, entry, stream_feat, collect=None):
    """Dilated residual stack with optional lateral injections."""
    cfg = model.config
    p = model.params
    laterals = _lateral_enabled(cfg)
    x = entry
    for j, dil in enumerate(cfg.drb_dilations):
        y = ad.conv2d(x, p[f"drb.{j}.conv1.weight"], p[f"drb.{j}.conv1.bias"], dilation=dil)
        y = ad.relu(y)
        y = ad.conv2d(y, p[f"drb.{j}.conv2.weight"], p[f"drb.{j}.conv2.bias"], dilation=dil)
        x = ad.add(x, y)
        if laterals and (j + 1) in cfg.fusion_points:
            lat = ad.conv2d(
                stream_feat, p[f"lateral.{j + 1}.weight"], p[f"lateral.{j + 1}.bias"]
            )
            x = ad.add(x, lat)
        if collect is not None:
            collect.append(x)
    return x


def forward(model, x, pad_to_multiple=False):
    """Run the network.  Returns (enhanced N3HW raw, mt_pred N1HW in (0,1)).

    Input spatial dims must divide ``config.downsample_factor``; with
    ``pad_to_multiple`` the input is reflect-padded up to the next multiple
    and both outputs are cropped back.
    """
    cfg = model.config
    p = model.params
    if len(x.shape) != 4 or x.shape[1] != 3:
        raise ShapeError(f"forward expects N3HW input, got {x.shape}")
    n, _, h, w = x.shape
    div = cfg.downsample_factor
    if h % div or w % div:
        if not pad_to_multiple:
            raise ShapeError(
                f"input {h}x{w} not divisible by {div}; pass pad_to_multiple=True "
                f"or pad the input"
            )
        ph = (div - h % div) % div
        pw = (div - w % div) % div
        x = ad.pad_reflect(x, (0, ph), (0, pw))
        enhanced, mt_pred = forward(model, x, pad_to_multiple=False)
        return ad.crop(enhanced, h, w), ad.crop(mt_pred, h, w)

    stem = _conv_block(p, cfg, "stem", x, 2, "selu")
    mt_pred, stream_feat = _run_mt_branch(model, stem, h, w)

    e = ad.conv2d(stem, p["enh_entry.conv.weight"], p["enh_entry.conv.bias"], stride=2)
    e = ad.relu(e)
    e = _run_drbs(model, e, stream_feat)

    if cfg.use_mt_guidance:
        e = fuse(e, mt_pred)

    e = ad.resample(e, h, w, mode="bilinear")
    if _concat_enabled(cfg):
        e = ad.concat_channels(e, mt_pred)
    if cfg.use_conv_after_concat:
        e = ad.conv2d(e, p["head.conv1.weight"], p["head.conv1.bias"])
        e = ad.relu(e)
        e = ad.conv2d(e, p["head.conv2.weight"], p["head.conv2.bias"])
    else:
        e = ad.conv2d(e, p["head.conv1x1.weight"], p["head.conv1x1.bias"])
    return e, mt_pred


def describe(model, input_hw=(64, 64)):
    """Layer table, receptive fields by composition, and parameter count."""
    cfg = model.config
    h, w = input_hw
    layers = []
    rf, jump = 1, 1

    def note(name, kind, k, s, d, out_ch, out_hw):
        nonlocal rf, jump
        if kind == "conv":
            rf = rf + (k - 1) * d * jump
            jump *= s
        layers.append(
            {
                "name": name,
                "kind": kind,
                "kernel": k,
                "stride": s,
                "dilation": d,
                "out_channels": out_ch,
                "out_hw": list(out_hw),
                "receptive_field": rf,
            }
        )

    enc = _encoder_channels(cfg)
    hh, ww = h // 2, w // 2
    note("stem", "conv", 3, 2, 1, enc[0], (hh, ww))
    eh, ew = hh, ww
    for i in range(cfg.mt_encoder_blocks):
        eh, ew = eh // 2, ew // 2
        note(f"mt_enc.{i}", "conv", 3, 2, 1, enc[i + 1], (eh, ew))

    # The enhancement stream branches off the stem; track its own rf chain.
    rf_stream = 1 + 2 * 1  # stem contribution at stride 2
    jump_stream = 2
    rf_stream += 2 * jump_stream  # entry conv
    jump_stream *= 2
    drb_rf = []
    for dil in cfg.drb_dilations:
        rf_stream += 2 * dil * jump_stream * 2  # two 3x3 convs per block
        drb_rf.append(rf_stream)

    sh, sw = h // 4, w // 4
    return {
        "input_hw": [h, w],
        "layers": layers,
        "stream_hw": [sh, sw],
        "stream_channels": _stream_channels(cfg),
        "drb_dilations": list(cfg.drb_dilations),
        "drb_receptive_field": drb_rf,
        "param_count": model.param_count(),
        "config": cfg.to_dict(),
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model, path):
    """Write parameters to ``path`` (tensor container) plus a JSON sidecar."""
    path = Path(path)
    container.write_tensors(path, {k: v.data for k, v in model.params.items()})
    sidecar = {"format": 1, "dtype": model.dtype, "config": model.config.to_dict()}
    path.with_name(path.name + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=1) + "\n"
    )


def load_checkpoint(path):
    """Rebuild a model from ``save_checkpoint`` output, validating shapes."""
    path = Path(path)
    sidecar_path = path.with_name(path.name + ".json")
    if not sidecar_path.exists():
        raise ConfigError(f"{sidecar_path}: checkpoint sidecar missing")
    sidecar = json.loads(sidecar_path.read_text())
    cfg = MTURConfig.from_dict(sidecar["config"])
    dtype = sidecar.get("dtype", "f32")
    expected = build(cfg, seed=0, dtype=dtype)
    tensors = container.read_tensors(path)
    problems = []
    for name, ref in expected.params.items():
        if name not in tensors:
            problems.append(f"missing parameter '{name}'")
        elif tensors[name].shape != ref.data.shape:
            problems.append(
                f"parameter '{name}' has shape {tensors[name].shape}, expected {ref.data.shape}"
            )
    for name in tensors:
        if name not in expected.params:
            problems.append(f"unexpected parameter '{name}'")
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    np_dtype = np.float32 if dtype == "f32" else np.float64
    params = {
        name: ad.Tensor(tensors[name].astype(np_dtype, copy=False), requires_grad=True, name=name)
        for name in expected.params
    }
    return MTURModel(config=cfg, params=params, dtype=dtype)
