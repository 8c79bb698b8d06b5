"""STIL block: spatial (SIM) and temporal (TIM) inconsistency paths plus ISM.

All forward functions operate on ``autodiff.Var`` values recorded on a tape
and take a parameter mapping ``name -> Var``.  Clip tensors use the
(T, C, H, W) layout with time folded into the batch axis for 2D ops.

TIM slice layouts, after channel compression to C' = C/2r:

* ``h``: (W, C', H, T), vertical slices; Conv1 and VTIE kernels are 3x1 (span H)
* ``w``: (H, C', T, W), horizontal slices; Conv1 and HTIE kernels are 1x3 (span W)
* ``s``: (T, C', H, W), unsliced, used only by ``diff_mode="spatial"`` (3x3)
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Mapping, MutableMapping

import numpy as np

from . import autodiff as ad
from .autodiff import Var

DIFF_MODES = ("spatial", "h_only", "w_only", "h_and_w")
ISM_MODES = ("none", "s_to_t", "t_to_s", "bidirectional")
FUSION_MODES = ("sigmoid_of_sum", "mean_of_sigmoids")
MODULES = ("sim_only", "tim_only", "sim_tim", "full")
CONV1_INITS = ("identity", "uniform", "zero")

# slice layout per orientation: (axes from (T,C,H,W), frame axis in the new layout)
_LAYOUTS = {"h": ((3, 1, 2, 0), 3), "w": ((2, 1, 0, 3), 2), "s": ((0, 1, 2, 3), 0)}
_KERNEL_SHAPES = {"h": (3, 1), "w": (1, 3), "s": (3, 3)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StilConfig:
    r: int = 16
    diff_mode: str = "h_and_w"
    ism_mode: str = "s_to_t"
    fusion_mode: str = "mean_of_sigmoids"
    modules: str = "full"
    conv1_bias: bool = True
    conv1_init: str = "identity"

    def __post_init__(self):
        if not isinstance(self.r, int) or self.r < 1:
            raise ConfigError(f"r must be a positive integer, got {self.r!r}")
        for name, allowed in (("diff_mode", DIFF_MODES), ("ism_mode", ISM_MODES),
                              ("fusion_mode", FUSION_MODES), ("modules", MODULES),
                              ("conv1_init", CONV1_INITS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @property
    def orientations(self) -> tuple[str, ...]:
        return {"spatial": ("s",), "h_only": ("h",), "w_only": ("w",), "h_and_w": ("h", "w")}[self.diff_mode]

    def replace(self, **changes) -> "StilConfig":
        return StilConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: Mapping) -> "StilConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown StilConfig keys: {sorted(unknown)}")
        return cls(**d)


def check_width(channels: int, config: StilConfig) -> None:
    if channels % 2:
        raise ConfigError(f"block width C={channels} must be even")
    if (channels // 2) % config.r:
        raise ConfigError(f"C/2={channels // 2} is not divisible by r={config.r}")


# ------------------------------------------------------------------ params

def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_conv(params: MutableMapping, rng, name: str, c_out: int, c_in: int, k: tuple[int, int],
              bias: bool = True, init: str = "uniform", gain: float = 1.0) -> None:
    kh, kw = k
    if init == "identity":
        if c_out != c_in:
            raise ConfigError(f"identity init needs square channels for {name}")
        w = np.zeros((c_out, c_in, kh, kw))
        for c in range(c_out):
            w[c, c, kh // 2, kw // 2] = 1.0
    elif init == "zero":
        w = np.zeros((c_out, c_in, kh, kw))
    else:
        w = _uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw, gain)
    params[name + ".w"] = w
    if bias:
        params[name + ".b"] = np.zeros(c_out)


def _sim_params(params, rng, prefix: str, c2: int, gain: float) -> None:
    for name, k in (("k1", (1, 3)), ("k2", (3, 1)), ("k3", (3, 3)), ("k4", (3, 3))):
        _add_conv(params, rng, prefix + name, c2, c2, k, gain=gain)


def _tim_params(params, rng, prefix: str, c2: int, config: StilConfig, gain: float) -> None:
    cc = c2 // config.r
    for o in config.orientations:
        k = _KERNEL_SHAPES[o]
        _add_conv(params, rng, f"{prefix}compress_{o}", cc, c2, (1, 1), gain=gain)
        _add_conv(params, rng, f"{prefix}conv1_{o}", cc, cc, k, bias=config.conv1_bias, init=config.conv1_init,
                  gain=gain)
        _add_conv(params, rng, f"{prefix}tie_{o}_a", cc, cc, k, gain=gain)
        _add_conv(params, rng, f"{prefix}tie_{o}_b", cc, cc, k, gain=gain)
        _add_conv(params, rng, f"{prefix}restore_{o}", c2, cc, (1, 1), gain=gain)


def _ism_params(params, rng, prefix: str, c2: int, tag: str, gain: float) -> None:
    params[f"{prefix}k5{tag}.w"] = _uniform(rng, (3,), 3, gain)
    params[f"{prefix}k5{tag}.b"] = np.zeros(1)
    _add_conv(params, rng, f"{prefix}k6{tag}", c2, c2, (3, 3), gain=gain)


def init_stil_params(channels: int, config: StilConfig, rng: np.random.Generator,
                     prefix: str = "", gain: float = 1.0) -> "OrderedDict[str, np.ndarray]":
    """Initialise every kernel of one block of width ``channels``, canonical order.

    Weights are uniform in +-gain*sqrt(1/fan_in), biases zero, Conv1 per
    ``config.conv1_init``.
    """
    check_width(channels, config)
    c2 = channels // 2
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    if config.modules == "sim_only":
        _sim_params(params, rng, prefix + "sim.", c2, gain)
        _sim_params(params, rng, prefix + "sim2.", c2, gain)
    elif config.modules == "tim_only":
        _tim_params(params, rng, prefix + "tim2.", c2, config, gain)
        _tim_params(params, rng, prefix + "tim.", c2, config, gain)
    else:
        _sim_params(params, rng, prefix + "sim.", c2, gain)
        _tim_params(params, rng, prefix + "tim.", c2, config, gain)
        if config.modules == "full":
            if config.ism_mode in ("s_to_t", "bidirectional"):
                _ism_params(params, rng, prefix + "ism.", c2, "", gain)
            if config.ism_mode in ("t_to_s", "bidirectional"):
                _ism_params(params, rng, prefix + "ism.", c2, "r", gain)
    _add_conv(params, rng, prefix + "fuse", channels, channels, (1, 1), gain=gain)
    return params


# ----------------------------------------------------------------- forward

def _conv(x: Var, p: Mapping[str, Var], name: str) -> Var:
    return ad.conv2d(x, p[name + ".w"], p.get(name + ".b"))


def _record(trace, key: str, v: Var) -> None:
    if trace is not None:
        trace[key] = v.value


def sim_forward(x1: Var, p: Mapping[str, Var], prefix: str = "sim.", trace: dict | None = None) -> Var:
    """Y1 = K4(sigmoid(S + X1) * K3(X1)), S = Up(K2(K1(AvgPool(X1))))."""
    h, w = x1.shape[2:]
    if h % 2 or w % 2:
        raise ConfigError(f"SIM needs even H, W, got {h}x{w}")
    s = ad.upsample_bilinear_2x(_conv(_conv(ad.avg_pool_2x2(x1), p, prefix + "k1"), p, prefix + "k2"))
    mask = ad.sigmoid(s + x1)
    _record(trace, prefix + "mask", mask)
    return _conv(mask * _conv(x1, p, prefix + "k3"), p, prefix + "k4")


def temporal_difference(xc: Var, p: Mapping[str, Var], name: str, axis: int) -> Var:
    """s_t = Conv1(x_{t+1}) - x_t along the frame ``axis``; s_T is a zero map."""
    if xc.shape[axis] < 1:
        raise ConfigError("need at least one frame")
    return ad.frame_difference(_conv(xc, p, name), xc, axis)


def tie_enhance(s: Var, p: Mapping[str, Var], prefix: str, orientation: str) -> Var:
    """Three-branch enhancement of a slice-difference map, restored to C/2 channels.

    Returns pre-sigmoid logits in the (T, C/2, H, W) layout.  An odd plane
    side (e.g. length-1 or odd T) is pooled in ceil mode and cropped back.
    """
    ph, pw = s.shape[2:]
    o = orientation
    b1 = _conv(s, p, f"{prefix}tie_{o}_a")
    pooled = ad.avg_pool_2x2(ad.pad_to_even(s))
    b2 = ad.crop_hw(ad.upsample_bilinear_2x(_conv(pooled, p, f"{prefix}tie_{o}_b")), ph, pw)
    logits = _conv(b1 + b2 + s, p, f"{prefix}restore_{o}")
    axes, _ = _LAYOUTS[o]
    return ad.permute(logits, axes) if o != "s" else logits


def slice_difference(x2: Var, p: Mapping[str, Var], prefix: str, orientation: str) -> Var:
    """Compress X2, reshape to the orientation's slice layout, take temporal differences."""
    axes, frame_axis = _LAYOUTS[orientation]
    xc = _conv(x2, p, f"{prefix}compress_{orientation}")
    if orientation != "s":
        xc = ad.permute(xc, axes)
    return temporal_difference(xc, p, f"{prefix}conv1_{orientation}", frame_axis)


def tim_forward(x2: Var, p: Mapping[str, Var], config: StilConfig, prefix: str = "tim.",
                trace: dict | None = None) -> Var:
    check_width(2 * x2.shape[1], config)
    logits = {}
    for o in config.orientations:
        s = slice_difference(x2, p, prefix, o)
        _record(trace, f"{prefix}S_{o}", s)
        logits[o] = tie_enhance(s, p, prefix, o)
    if len(logits) == 1:
        (lg,) = logits.values()
        gate = ad.sigmoid(lg)
        _record(trace, f"{prefix}F_{next(iter(logits))}", gate)
    elif config.fusion_mode == "mean_of_sigmoids":
        fh, fw = ad.sigmoid(logits["h"]), ad.sigmoid(logits["w"])
        _record(trace, prefix + "F_h", fh)
        _record(trace, prefix + "F_w", fw)
        gate = (fh + fw) * 0.5
    else:
        if trace is not None:
            trace[prefix + "F_h"] = ad.sigmoid(logits["h"]).value
            trace[prefix + "F_w"] = ad.sigmoid(logits["w"]).value
        gate = ad.sigmoid(logits["h"] + logits["w"])
    return gate * x2


def _channel_gate(y: Var, p: Mapping[str, Var], name: str) -> Var:
    weights = ad.sigmoid(ad.conv1d_channels(ad.gap_spatial(y), p[name + ".w"], p[name + ".b"]))
    return ad.scale_channels(y, weights)


def ism_forward(y1: Var, y2: Var, p: Mapping[str, Var], config: StilConfig,
                prefix: str = "ism.") -> tuple[Var, Var]:
    """Returns (Y1_out, Y3) for the configured information flow."""
    if y1.shape != y2.shape:
        raise ConfigError(f"ISM inputs differ in shape: {y1.shape} vs {y2.shape}")
    mode = config.ism_mode
    y1_out, y3 = y1, y2
    if mode in ("s_to_t", "bidirectional"):
        y3 = _conv(_channel_gate(y1, p, prefix + "k5") + y2, p, prefix + "k6")
    if mode in ("t_to_s", "bidirectional"):
        y1_out = _conv(_channel_gate(y2, p, prefix + "k5r") + y1, p, prefix + "k6r")
    return y1_out, y3


def stil_block_forward(x: Var, p: Mapping[str, Var], config: StilConfig, prefix: str = "",
                       trace: dict | None = None) -> Var:
    t, c, h, w = x.shape
    check_width(c, config)
    if h % 2 or w % 2:
        raise ConfigError(f"STIL block needs even H, W, got {h}x{w}")
    x1, x2 = ad.split_channels(x)
    if config.modules == "sim_only":
        a = sim_forward(x1, p, prefix + "sim.", trace)
        b = sim_forward(x2, p, prefix + "sim2.", trace)
    elif config.modules == "tim_only":
        a = tim_forward(x1, p, config, prefix + "tim2.", trace)
        b = tim_forward(x2, p, config, prefix + "tim.", trace)
    else:
        y1 = sim_forward(x1, p, prefix + "sim.", trace)
        y2 = tim_forward(x2, p, config, prefix + "tim.", trace)
        if config.modules == "full":
            a, b = ism_forward(y1, y2, p, config, prefix + "ism.")
        else:
            a, b = y1, y2
    return _conv(ad.concat_channels(a, b), p, prefix + "fuse")


def run_block(x: np.ndarray, params: Mapping[str, np.ndarray], config: StilConfig,
              trace: dict | None = None) -> np.ndarray:
    """Plain-array convenience wrapper around ``stil_block_forward``."""
    tape = ad.Tape()
    pv = {k: tape.constant(v, name=k) for k, v in params.items()}
    return stil_block_forward(tape.constant(x), pv, config, trace=trace).value
