"""Primary acceptance criteria, one test each, each reporting a single pass/fail line."""

import hashlib
import json
import time

import numpy as np

import conftest
from oracles import avg_pool_loops, conv2d_loops, temporal_difference_loops, upsample_loops
from stilkit import autodiff as ad
from stilkit import checks, cli
from stilkit import nnops as F
from stilkit import synthdata as sd
from stilkit.model import ModelConfig, TinyStilNet
from stilkit.stil import (DIFF_MODES, FUSION_MODES, ISM_MODES, MODULES, StilConfig, init_stil_params,
                          run_block, temporal_difference, tim_forward)
from stilkit.training import TrainConfig, evaluate, train


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE[str(n)] = line
    print(line)
    assert ok, line


# ----------------------------------------------------------- 1. oracles

def test_01_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"conv2d": 0.0, "avg_pool": 0.0, "upsample": 0.0, "temporal_difference": 0.0}
    n_shapes = 100
    for _ in range(n_shapes):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(1, 7), rng.integers(1, 7)
        kh, kw = rng.choice([1, 3, 5]), rng.choice([1, 3, 5])
        x = rng.normal(size=(n, ci, h, w))
        wt = rng.normal(size=(co, ci, kh, kw))
        b = rng.normal(size=co)
        pad = ((kh - 1) // 2, (kw - 1) // 2)
        worst["conv2d"] = max(worst["conv2d"], np.abs(F.conv2d(x, wt, b) - conv2d_loops(x, wt, b, pad)).max())

        xe = rng.normal(size=(n, ci, 2 * rng.integers(1, 5), 2 * rng.integers(1, 5)))
        worst["avg_pool"] = max(worst["avg_pool"], np.abs(F.avg_pool_2x2(xe) - avg_pool_loops(xe)).max())
        worst["upsample"] = max(worst["upsample"], np.abs(F.upsample_bilinear_2x(x) - upsample_loops(x)).max())

        axis, k = [(3, (3, 1)), (2, (1, 3)), (0, (3, 3))][rng.integers(0, 3)]
        shape = rng.integers(1, 5, size=4)
        c = int(rng.integers(1, 4))
        shape[1] = c
        xt = rng.normal(size=tuple(shape))
        p = {"c.w": rng.normal(size=(c, c) + k), "c.b": rng.normal(size=c)}
        tape = ad.Tape()
        got = temporal_difference(tape.constant(xt), {kk: tape.constant(v) for kk, v in p.items()}, "c", axis)
        ref = temporal_difference_loops(xt, p["c.w"], p["c.b"], axis)
        worst["temporal_difference"] = max(worst["temporal_difference"], np.abs(got.value - ref).max())
    dt = time.perf_counter() - t0
    ok = all(v <= 1e-12 for v in worst.values()) and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"{n_shapes} random shapes per op, max abs err: {detail} ({dt:.1f}s)")


# ------------------------------------------------------- 2. gradients

def test_02_gradient_suite():
    t0 = time.perf_counter()
    scfg = StilConfig(r=2)
    block = checks.block_check(scfg, shape=(2, 8, 8, 8), step=1e-5, tol=1e-4)
    expected = set(init_stil_params(8, scfg, np.random.default_rng(0))) | {"x"}
    block_groups = set(block.per_group) == expected and all(block.checked[k] > 0 for k in expected)
    mcfg = ModelConfig()
    model = checks.model_check(mcfg, StilConfig(), clip_shape=(2, 3, 8, 8), step=1e-5, tol=1e-4)
    model_groups = set(model.per_group) == set(TinyStilNet(mcfg).params)
    exhaustive = sum(model.checked.values()) == TinyStilNet(mcfg).n_params()
    dt = time.perf_counter() - t0
    ok = block.passed and model.passed and block_groups and model_groups and exhaustive and dt < 300
    report(2, ok, f"block {len(block.per_group)} groups max rel err {block.max_rel_err:.1e}; "
                  f"model {len(model.per_group)} groups / {sum(model.checked.values())} coords "
                  f"max rel err {model.max_rel_err:.1e} (h=1e-5, tol 1e-4, {dt:.0f}s)")


# ------------------------------------------------------- 3. invariants

def test_03_shape_and_boundary_invariants():
    rng = np.random.default_rng(3)
    failures = []
    cfg = StilConfig(r=2)
    for t in (1, 2, 5):
        for c in (4, 8, 16):
            for h, w in ((2, 2), (4, 6), (8, 8)):
                x = rng.normal(size=(t, c, h, w))
                if run_block(x, init_stil_params(c, cfg, rng), cfg).shape != x.shape:
                    failures.append(("shape", (t, c, h, w)))

    for mode in DIFF_MODES:
        mcfg = StilConfig(r=2, diff_mode=mode)
        p = init_stil_params(8, mcfg, rng)  # identity Conv1
        for x in (rng.normal(size=(1, 8, 4, 4)), np.repeat(rng.normal(size=(1, 8, 4, 4)), 4, axis=0)):
            trace = {}
            run_block(x, p, mcfg, trace=trace)
            maps = [v for k, v in trace.items() if ".S_" in k]
            if not maps or not all(np.all(m == 0) for m in maps):
                failures.append(("nullity", mode, x.shape[0]))

    for mode in DIFF_MODES:
        for fusion in FUSION_MODES:
            zcfg = StilConfig(r=2, diff_mode=mode, fusion_mode=fusion)
            zero = {k: np.zeros_like(v) for k, v in init_stil_params(8, zcfg, rng).items()}
            x2 = rng.normal(size=(3, 4, 4, 6))
            tape = ad.Tape()
            y2 = tim_forward(tape.constant(x2), {k: tape.constant(v) for k, v in zero.items()}, zcfg).value
            if not np.array_equal(y2, 0.5 * x2):
                failures.append(("zero-init", mode, fusion))
    report(3, not failures, f"27-shape grid, T=1 and static nullity over {len(DIFF_MODES)} diff modes, "
                            f"zero-init TIM over {len(DIFF_MODES) * len(FUSION_MODES)} modes; failures {failures}")


# ------------------------------------------------------------ 4. ablations

def test_04_ablation_consistency():
    rng = np.random.default_rng(4)
    p = {k: v + rng.normal(scale=0.2, size=v.shape)
         for k, v in init_stil_params(16, StilConfig(r=2, modules="sim_tim"), rng).items()}
    bitwise = True
    for _ in range(5):
        x = rng.normal(size=(4, 16, 8, 8))
        a = run_block(x, p, StilConfig(r=2, ism_mode="none"))
        b = run_block(x, p, StilConfig(r=2, modules="sim_tim"))
        bitwise &= a.tobytes() == b.tobytes()
    grid = cli.ablation_grid(cli.DEFAULTS["ablate"]["panels"])
    counts = [sum(1 for q, _ in grid if q == panel) for panel in ("modules", "diff_mode", "ism_mode", "fusion_mode")]
    values_ok = [v for _, v in grid] == list(MODULES) + list(DIFF_MODES) + list(ISM_MODES) + list(FUSION_MODES)
    ok = bitwise and counts == [4, 4, 4, 2] and values_ok
    report(4, ok, f"ism none == sim_tim bitwise: {bitwise}; grid rows {'/'.join(map(str, counts))}")


# ------------------------------------------------------- 5. behaviour

CORPUS = dict(n_clips=400, seed_base=100, length=16, height=32, width=32)


def _split(spec):
    clips = list(sd.generate_corpus(spec))
    return clips[:320], clips[320:]


def test_05_behavioural_ablation():
    t0 = time.perf_counter()
    # lr 2e-4 is a fine-tuning rate; from scratch it leaves the logits of some seeds
    # stuck on one side of zero long after the ranking is learned
    cfg = TrainConfig(lr=1e-3)

    # balanced corpus with both artefacts, early stop once held-out accuracy reaches 0.95
    tr, te = _split(sd.CorpusSpec(**CORPUS))
    model = TinyStilNet(ModelConfig(), StilConfig(), seed=0)
    curve = []

    def stop(epoch, m):
        curve.append(evaluate(m, te, cfg.frames_eval)["accuracy"])
        return curve[-1] >= 0.95

    train(model, tr, cfg, on_epoch_end=stop)
    best = max(curve)

    # temporal-only fakes, same fixed budget for both variants
    budget = TrainConfig(lr=1e-3, epochs=12)
    tr, te = _split(sd.CorpusSpec(blend=False, **CORPUS))
    acc = {}
    for modules in ("full", "sim_only"):
        m = TinyStilNet(ModelConfig(), StilConfig(modules=modules), seed=0)
        train(m, tr, budget)
        acc[modules] = evaluate(m, te, budget.frames_eval)["accuracy"]
    gap = acc["full"] - acc["sim_only"]
    dt = time.perf_counter() - t0
    ok = best >= 0.95 and len(curve) <= 30 and gap >= 0.10 and dt < 1800
    report(5, ok, f"lr {cfg.lr:g}; balanced: {best:.4f} held-out accuracy after {len(curve)} epochs; temporal-only: "
                  f"full {acc['full']:.4f} vs sim_only {acc['sim_only']:.4f} (gap {gap:+.4f}, "
                  f"{budget.epochs} epochs each) ({dt / 60:.1f} min)")


# ------------------------------------------------------- 6. slice maps

def test_06_slice_map_roughness():
    t0 = time.perf_counter()
    rough = {"h": [0.0, 0.0], "w": [0.0, 0.0]}
    for seed in range(100):
        real = sd.synth_clip(seed, sd.ClipSpec.real())
        fake = sd.synth_clip(seed, sd.ClipSpec.fake())
        for axis in rough:
            rough[axis][0] += sd.temporal_roughness(sd.slice_map(real, axis, 32))
            rough[axis][1] += sd.temporal_roughness(sd.slice_map(fake, axis, 32))
    ratios = {axis: f / r for axis, (r, f) in rough.items()}
    dt = time.perf_counter() - t0
    ok = all(v >= 1.5 for v in ratios.values()) and dt < 60
    report(6, ok, f"fake/real mean roughness over 100 pairs: h-t {ratios['h']:.1f}x, "
                  f"w-t {ratios['w']:.1f}x ({dt:.1f}s)")


# ------------------------------------------------------- 7. determinism

def _digest(d):
    h = hashlib.sha256()
    for f in sorted(p for p in d.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(d)).encode() + f.read_bytes())
    return h.hexdigest()


def test_07_end_to_end_determinism(tmp_path):
    sets = ["--set", "seed=7", "--set", "data.n_clips=16", "--set", "data.length=8", "--set", "data.height=16",
            "--set", "data.width=16", "--set", "train.epochs=2", "--set", "train.batch=4",
            "--set", "train.frames_eval=8", "--set", "holdout.fraction=0.25"]
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        corpus = ["--set", f"corpus={json.dumps(str(out / 'corpus'))}"]
        codes = [cli.main([cmd, *sets, *([] if cmd == "synth" else corpus), "--out", str(out)])
                 for cmd in ("synth", "train", "eval")]
        runs.append((codes, (out / "metrics.eval.json").read_text(), _digest(out / "checkpoint"),
                     _digest(out / "corpus"), (out / "train_log.jsonl").read_text()))
    (ca, ma, ka, da, la), (cb, mb, kb, db, lb) = runs
    ok = ca == cb == [0, 0, 0] and ma == mb and ka == kb and da == db and la == lb
    report(7, ok, f"metrics identical: {ma == mb}; checkpoint sha256 {ka[:12]} vs {kb[:12]}; "
                  f"corpus and log identical: {da == db and la == lb}")
