"""Tiny residual video classifier with a STIL block in every bottleneck.

stem (3x3, stride 2) -> [1x1 reduce -> STIL -> 1x1 expand, + shortcut] x B
-> global mean over T, H, W -> linear head -> scalar logit.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import tensor as tn
from .autodiff import Tape, Var
from .stil import ConfigError, StilConfig, _add_conv, _conv, init_stil_params, stil_block_forward


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    stem_channels: int = 16
    # (bottleneck width, output width) per block
    blocks: tuple[tuple[int, int], ...] = ((8, 16), (16, 32))
    # per-block compression ratio override; None uses StilConfig.r everywhere
    block_r: tuple[int, ...] | None = (2, 2)
    head_init: str = "uniform"
    # weights ~ U(+-init_gain*sqrt(1/fan_in)); gain 1 is the plain fan-in rule,
    # sqrt(6) gives unit-variance weights*fan_in so the signal survives the gates
    init_gain: float = 6.0 ** 0.5
    # fixed input standardisation (x - input_mean) * input_scale ahead of the stem;
    # defaults map the synthetic pixel range to roughly zero mean, unit spread
    input_mean: float = 0.4
    input_scale: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        if self.block_r is not None:
            object.__setattr__(self, "block_r", tuple(int(r) for r in self.block_r))
            if len(self.block_r) != len(self.blocks):
                raise ConfigError("block_r must have one entry per block")
        if self.head_init not in ("uniform", "zero"):
            raise ConfigError(f"head_init must be 'uniform' or 'zero', got {self.head_init!r}")
        if any(len(b) != 2 for b in self.blocks):
            raise ConfigError("each block is a (width, out_channels) pair")

    def block_config(self, i: int, stil: StilConfig) -> StilConfig:
        return stil if self.block_r is None else stil.replace(r=self.block_r[i])

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["block_r"] = None if self.block_r is None else list(self.block_r)
        return d


def init_model_params(mcfg: ModelConfig, scfg: StilConfig, seed: int) -> "OrderedDict[str, np.ndarray]":
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    g = mcfg.init_gain
    _add_conv(params, rng, "stem", mcfg.stem_channels, mcfg.in_channels, (3, 3), gain=g)
    c_in = mcfg.stem_channels
    for i, (mid, out) in enumerate(mcfg.blocks):
        pre = f"b{i}."
        _add_conv(params, rng, pre + "reduce", mid, c_in, (1, 1), gain=g)
        params.update(init_stil_params(mid, mcfg.block_config(i, scfg), rng, prefix=pre + "stil.", gain=g))
        _add_conv(params, rng, pre + "expand", out, mid, (1, 1), gain=g)
        if out != c_in:
            _add_conv(params, rng, pre + "proj", out, c_in, (1, 1), gain=g)
        c_in = out
    if mcfg.head_init == "zero":
        params["head.w"] = np.zeros(c_in)
    else:
        params["head.w"] = rng.uniform(-np.sqrt(1.0 / c_in), np.sqrt(1.0 / c_in), size=c_in)
    params["head.b"] = np.zeros(1)
    return params


def model_forward(clip: Var, p: Mapping[str, Var], mcfg: ModelConfig, scfg: StilConfig,
                  trace: dict | None = None) -> Var:
    """(T, 3, H, W) clip -> (1,) logit."""
    if clip.value.ndim != 4 or clip.shape[1] != mcfg.in_channels:
        raise ConfigError(f"clip must be (T, {mcfg.in_channels}, H, W), got {clip.shape}")
    if clip.shape[0] < 1:
        raise ConfigError("clip needs at least one frame")
    if mcfg.input_mean != 0.0 or mcfg.input_scale != 1.0:
        clip = ad.scale(ad.add_scalar(clip, -mcfg.input_mean), mcfg.input_scale)
    h = ad.relu(ad.subsample_2x(_conv(clip, p, "stem")))
    for i, (mid, out) in enumerate(mcfg.blocks):
        pre = f"b{i}."
        z = ad.relu(_conv(h, p, pre + "reduce"))
        sub = None if trace is None else {}
        z = ad.relu(stil_block_forward(z, p, mcfg.block_config(i, scfg), prefix=pre + "stil.", trace=sub))
        if trace is not None:
            trace.update(sub)
        z = _conv(z, p, pre + "expand")
        shortcut = _conv(h, p, pre + "proj") if (pre + "proj.w") in p else h
        h = ad.relu(z + shortcut)
    pooled = ad.mean_rows(ad.gap_spatial(h))
    return ad.linear(pooled, p["head.w"], p["head.b"])


class TinyStilNet:
    """Parameters plus configs; forward and gradient helpers on plain arrays."""

    def __init__(self, mcfg: ModelConfig | None = None, scfg: StilConfig | None = None, seed: int = 0,
                 params: Mapping[str, np.ndarray] | None = None):
        self.mcfg = mcfg or ModelConfig()
        self.scfg = scfg or StilConfig()
        self.seed = seed
        self.params = OrderedDict(params) if params is not None else init_model_params(self.mcfg, self.scfg, seed)

    def _leaves(self, tape: Tape, requires_grad: bool) -> dict[str, Var]:
        return {k: tape.leaf(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def logit(self, clip: np.ndarray, trace: dict | None = None) -> float:
        tape = Tape()
        return model_forward(tape.constant(clip), self._leaves(tape, False), self.mcfg, self.scfg,
                             trace).value.item()

    def loss_and_grads(self, clip: np.ndarray, label: float) -> tuple[float, float, dict[str, np.ndarray]]:
        """Returns (loss, logit, grads) for one clip."""
        tape = Tape()
        leaves = self._leaves(tape, True)
        z = model_forward(tape.constant(clip), leaves, self.mcfg, self.scfg)
        loss = ad.bce_with_logit(z, label)
        grads = ad.backward(loss)
        return loss.value.item(), z.value.item(), {k: grads[v] for k, v in leaves.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # ------------------------------------------------------------ checkpoint

    def save(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = [f"seed={self.seed}"]
        lines += [f"stil.{k}={_fmt(v)}" for k, v in asdict(self.scfg).items()]
        lines += [f"model.{k}={_fmt(v)}" for k, v in self.mcfg.to_dict().items()]
        lines += [f"param={name}" for name in self.params]
        (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
        for name, value in self.params.items():
            tn.save(tn.Tensor(value), directory / f"{name}.sten")
        return directory

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "TinyStilNet":
        directory = Path(directory)
        manifest = directory / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
        seed = 0
        sd, md, names = {}, {}, []
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key == "seed":
                seed = int(raw)
            elif key == "param":
                names.append(raw)
            elif key.startswith("stil."):
                sd[key[5:]] = json.loads(raw)
            elif key.startswith("model."):
                md[key[6:]] = json.loads(raw)
            else:
                raise ValueError(f"unknown manifest key {key!r}")
        params = OrderedDict((n, np.array(tn.load(directory / f"{n}.sten").array)) for n in names)
        return cls(ModelConfig.from_dict(md), StilConfig.from_dict(sd), seed, params)


def _fmt(v) -> str:
    return json.dumps(v)
