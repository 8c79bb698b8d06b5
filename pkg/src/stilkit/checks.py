"""Runtime check suites behind the ``gradcheck`` and ``selftest`` commands."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import nnops as F
from .model import ModelConfig, TinyStilNet, model_forward
from .stil import StilConfig, init_stil_params, run_block, stil_block_forward, tim_forward
from .synthdata import sample_indices


def _weighted(tape, v, seed=7):
    w = np.random.default_rng(seed).normal(size=v.shape)
    return ad.sum_all(v * tape.constant(w))


def primitive_cases(seed: int = 99) -> list[tuple[str, Callable, dict]]:
    """(name, f(tape, leaves) -> scalar Var, point) for every differentiable op."""
    r = np.random.default_rng(seed)
    n = r.normal
    # relu inputs kept away from the kink
    pos = lambda *s: r.uniform(0.2, 1.0, size=s) * r.choice([-1, 1], size=s)  # noqa: E731
    return [
        ("add", lambda t, l: _weighted(t, l["a"] + l["b"]), {"a": n(size=(2, 3)), "b": n(size=(2, 3))}),
        ("sub", lambda t, l: _weighted(t, l["a"] - l["b"]), {"a": n(size=(2, 3)), "b": n(size=(2, 3))}),
        ("mul", lambda t, l: _weighted(t, l["a"] * l["b"]), {"a": n(size=(2, 3)), "b": n(size=(2, 3))}),
        ("scale", lambda t, l: _weighted(t, ad.add_scalar(ad.scale(l["a"], -1.7), 0.3)), {"a": n(size=4)}),
        ("sigmoid", lambda t, l: _weighted(t, ad.sigmoid(l["a"])), {"a": 2 * n(size=(3, 4))}),
        ("relu", lambda t, l: _weighted(t, ad.relu(l["a"])), {"a": pos(3, 4)}),
        ("conv2d", lambda t, l: _weighted(t, ad.conv2d(l["x"], l["w"], l["b"])),
         {"x": n(size=(2, 2, 4, 5)), "w": n(size=(3, 2, 3, 3)), "b": n(size=3)}),
        ("conv2d_1x3", lambda t, l: _weighted(t, ad.conv2d(l["x"], l["w"], l["b"])),
         {"x": n(size=(2, 2, 4, 4)), "w": n(size=(2, 2, 1, 3)), "b": n(size=2)}),
        ("avg_pool_2x2", lambda t, l: _weighted(t, ad.avg_pool_2x2(l["x"])), {"x": n(size=(2, 2, 4, 6))}),
        ("upsample_bilinear_2x", lambda t, l: _weighted(t, ad.upsample_bilinear_2x(l["x"])),
         {"x": n(size=(2, 2, 3, 2))}),
        ("pad_to_even", lambda t, l: _weighted(t, ad.pad_to_even(l["x"])), {"x": n(size=(1, 2, 3, 5))}),
        ("crop_hw", lambda t, l: _weighted(t, ad.crop_hw(l["x"], 2, 3)), {"x": n(size=(1, 2, 4, 4))}),
        ("subsample_2x", lambda t, l: _weighted(t, ad.subsample_2x(l["x"])), {"x": n(size=(1, 2, 5, 4))}),
        ("gap_spatial", lambda t, l: _weighted(t, ad.gap_spatial(l["x"])), {"x": n(size=(2, 3, 4, 4))}),
        ("mean_rows", lambda t, l: _weighted(t, ad.mean_rows(l["x"])), {"x": n(size=(3, 4))}),
        ("conv1d_channels", lambda t, l: _weighted(t, ad.conv1d_channels(l["v"], l["w"], l["b"])),
         {"v": n(size=(2, 5)), "w": n(size=3), "b": n(size=1)}),
        ("scale_channels", lambda t, l: _weighted(t, ad.scale_channels(l["x"], l["s"])),
         {"x": n(size=(2, 3, 2, 2)), "s": n(size=(2, 3))}),
        ("concat_channels", lambda t, l: _weighted(t, ad.concat_channels(l["a"], l["b"])),
         {"a": n(size=(2, 1, 2, 2)), "b": n(size=(2, 3, 2, 2))}),
        ("split_channels", lambda t, l: _weighted(t, ad.split_channels(l["x"])[1]), {"x": n(size=(2, 4, 2, 2))}),
        ("permute", lambda t, l: _weighted(t, ad.permute(l["x"], (2, 1, 0, 3))), {"x": n(size=(2, 3, 4, 5))}),
        ("frame_difference", lambda t, l: _weighted(t, ad.frame_difference(l["a"], l["b"], 3)),
         {"a": n(size=(2, 2, 3, 4)), "b": n(size=(2, 2, 3, 4))}),
        ("linear", lambda t, l: ad.linear(l["v"], l["w"], l["b"]),
         {"v": n(size=5), "w": n(size=5), "b": n(size=1)}),
        ("bce_with_logit", lambda t, l: ad.bce_with_logit(l["z"], 1.0), {"z": np.array([0.7])}),
    ]


def block_check(config: StilConfig, shape=(2, 8, 8, 8), step: float = 1e-5, tol: float = 1e-4,
                seed: int = 0, max_coords: int | None = None) -> ad.GradCheckReport:
    """Central-difference check of the STIL block over its input and every parameter group.

    Biases and the identity-initialised Conv1 are perturbed off their init so
    every branch carries gradient.
    """
    rng = np.random.default_rng(seed)
    params = init_stil_params(shape[1], config, rng)
    point = {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in params.items()}
    point["x"] = rng.normal(size=shape)
    w_out = rng.normal(size=shape)

    def f(tape, leaves):
        y = stil_block_forward(leaves["x"], leaves, config)
        return ad.sum_all(y * tape.constant(w_out))

    return ad.grad_check(f, point, step=step, tol=tol, max_coords=max_coords, seed=seed)


def model_check(mcfg: ModelConfig, scfg: StilConfig, clip_shape=(2, 3, 8, 8), step: float = 1e-5,
                tol: float = 1e-4, seed: int = 0, max_coords: int | None = None) -> ad.GradCheckReport:
    """BCE loss of the tiny model, checked over every parameter group."""
    rng = np.random.default_rng(seed)
    model = TinyStilNet(mcfg, scfg, seed=seed)
    clip = rng.uniform(size=clip_shape)

    def f(tape, leaves):
        return ad.bce_with_logit(model_forward(tape.constant(clip), leaves, mcfg, scfg), 1.0)

    return ad.grad_check(f, dict(model.params), step=step, tol=tol, max_coords=max_coords, seed=seed)


# ------------------------------------------------------------------ selftest

def _conv_loops(x, w, b):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, c_out, h, wd))
    for i in range(n):
        for o in range(c_out):
            for y in range(h):
                for z in range(wd):
                    acc = b[o]
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                yy, zz = y + u - ph, z + v - pw
                                if 0 <= yy < h and 0 <= zz < wd:
                                    acc += w[o, c, u, v] * x[i, c, yy, zz]
                    out[i, o, y, z] = acc
    return out


def selftest_checks() -> Iterator[tuple[str, bool, str]]:
    """Quick end-to-end sanity checks; yields (name, passed, detail)."""
    rng = np.random.default_rng(0)

    err = 0.0
    for k in ((3, 3), (1, 3), (3, 1)):
        x, w, b = rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(3, 2) + k), rng.normal(size=3)
        err = max(err, float(np.abs(F.conv2d(x, w, b) - _conv_loops(x, w, b)).max()))
    yield "conv2d matches loop oracle", err <= 1e-12, f"max abs err {err:.2e}"

    cfg = StilConfig(r=2)
    zero = {k: np.zeros_like(v) for k, v in init_stil_params(8, cfg, rng).items()}
    x = rng.normal(size=(4, 8, 8, 8))
    y = run_block(x, init_stil_params(8, cfg, np.random.default_rng(1)), cfg)
    yield "block preserves shape", y.shape == x.shape, str(y.shape)

    static = np.repeat(rng.normal(size=(1, 8, 8, 8)), 4, axis=0)
    trace = {}
    run_block(static, init_stil_params(8, cfg, np.random.default_rng(2)), cfg, trace=trace)
    nul = all(np.all(trace[k] == 0) for k in ("tim.S_h", "tim.S_w"))
    yield "static clip gives zero difference maps", nul, ""

    tape = ad.Tape()
    x2 = rng.normal(size=(2, 4, 4, 4))
    y2 = tim_forward(tape.constant(x2), {k: tape.constant(v) for k, v in zero.items()}, cfg).value
    yield "zero-init TIM halves its input", bool(np.array_equal(y2, 0.5 * x2)), ""

    p = init_stil_params(8, StilConfig(r=2, modules="sim_tim"), rng)
    a = run_block(x, p, StilConfig(r=2, ism_mode="none"))
    b = run_block(x, p, StilConfig(r=2, modules="sim_tim"))
    yield "ism none equals sim_tim", a.tobytes() == b.tobytes(), ""

    idx = sample_indices(64, 16).tolist()
    yield "segment sampling L=64 n=16", idx == list(range(2, 63, 4)), str(idx[:4])

    worst = max(ad.grad_check(fn, pt, step=1e-6, tol=1e-6).max_rel_err for _, fn, pt in primitive_cases())
    yield "primitive gradients", worst <= 1e-6, f"max rel err {worst:.2e}"
