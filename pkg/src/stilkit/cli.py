"""Command-line entry point: ``stilkit <command> --config c.json --set k=v --out dir``.

Exit codes: 0 success, 1 check or metric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checks, pgm
from . import synthdata as sd
from . import tensor as tn
from .model import ModelConfig, TinyStilNet
from .stil import DIFF_MODES, FUSION_MODES, ISM_MODES, MODULES, ConfigError, StilConfig
from .training import TrainConfig, TrainError, config_dict, evaluate, train

log = logging.getLogger("stilkit")

COMMANDS = ("gradcheck", "selftest", "synth", "train", "eval", "slicemap", "ablate")

# sections backed by a dataclass take its field names as their key set
DATACLASS_SECTIONS = {"stil": StilConfig, "model": ModelConfig, "train": TrainConfig, "data": sd.CorpusSpec}

DEFAULTS = {
    "seed": 0,
    "stil": {},
    "model": {},
    "train": {},
    "data": {},
    # corpus directory to read instead of generating from "data"
    "corpus": None,
    "holdout": {"fraction": 0.2, "stop_at_accuracy": None},
    "gradcheck": {"tol": 1e-4, "step": 1e-5, "shape": [2, 8, 8, 8], "r": 2, "model": True,
                  "model_coords": None},
    "eval": {"checkpoint": None, "attention_clips": 0},
    "slicemap": {"clip": None, "seed": 0, "label": "fake", "axis": "h", "position": None},
    "ablate": {"panels": ["modules", "diff_mode", "ism_mode", "fusion_mode"]},
}

ABLATION_PANELS = {"modules": MODULES, "diff_mode": DIFF_MODES, "ism_mode": ISM_MODES,
                   "fusion_mode": FUSION_MODES}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config

def _known_keys(section: str) -> set[str]:
    if section in DATACLASS_SECTIONS:
        return {f.name for f in fields(DATACLASS_SECTIONS[section])}
    return set(DEFAULTS[section])


def _merge(cfg: dict, updates: dict, where: str) -> None:
    for key, value in updates.items():
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r} in {where}")
        if isinstance(DEFAULTS[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be an object")
            unknown = set(value) - _known_keys(key)
            if unknown:
                raise UsageError(f"unknown keys in section {key!r}: {sorted(unknown)}")
            cfg[key].update(value)
        else:
            cfg[key] = value


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        _merge(cfg, doc, path)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"override must look like key=value, got {item!r}")
        parts = key.split(".")
        if len(parts) == 1:
            _merge(cfg, {parts[0]: _parse_value(raw)}, "--set")
        elif len(parts) == 2:
            _merge(cfg, {parts[0]: {parts[1]: _parse_value(raw)}}, "--set")
        else:
            raise UsageError(f"override key nests too deep: {key!r}")
    return cfg


def build(cfg: dict) -> tuple[StilConfig, ModelConfig, TrainConfig, sd.CorpusSpec]:
    return (StilConfig.from_dict(cfg["stil"]), ModelConfig.from_dict(cfg["model"]),
            TrainConfig.from_dict(cfg["train"]), sd.CorpusSpec.from_dict(cfg["data"]))


def effective_config(cfg: dict) -> dict:
    scfg, mcfg, tcfg, data = build(cfg)
    out = copy.deepcopy(cfg)
    out.update(stil=asdict(scfg), model=mcfg.to_dict(), train=config_dict(tcfg), data=asdict(data))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ------------------------------------------------------------------ corpus

def _corpus(cfg: dict) -> list[sd.Clip]:
    if cfg["corpus"] is not None:
        return sd.read_corpus(cfg["corpus"])
    return list(sd.generate_corpus(build(cfg)[3]))


def split_holdout(clips: list[sd.Clip], fraction: float) -> tuple[list[sd.Clip], list[sd.Clip]]:
    """Trailing ``fraction`` of the corpus, rounded to an even count so it stays balanced."""
    if not 0 <= fraction < 1:
        raise UsageError(f"holdout.fraction must be in [0, 1), got {fraction}")
    n_test = 2 * int(round(len(clips) * fraction / 2))
    if n_test == 0:
        return clips, []
    return clips[:-n_test], clips[-n_test:]


def fit(cfg: dict, scfg: StilConfig, clips: list[sd.Clip], out: Path | None = None):
    """Train one model on the configured split; returns (model, history, held-out metrics or None)."""
    _, mcfg, tcfg, _ = build(cfg)
    train_set, test_set = split_holdout(clips, cfg["holdout"]["fraction"])
    stop_at = cfg["holdout"]["stop_at_accuracy"]
    model = TinyStilNet(mcfg, scfg, seed=int(cfg["seed"]))
    per_epoch = []

    def on_epoch_end(epoch, m):
        if not test_set:
            return False
        r = evaluate(m, test_set, tcfg.frames_eval)
        r["epoch"] = epoch
        per_epoch.append(r)
        log.info("epoch %d held-out %s", epoch, r)
        return stop_at is not None and r["accuracy"] >= stop_at

    if out is not None:
        with open(out / "train_log.jsonl", "w") as lf, open(out / "train_times.jsonl", "w") as tf:
            history = train(model, train_set, tcfg, log_file=lf, time_file=tf, on_epoch_end=on_epoch_end)
    else:
        history = train(model, train_set, tcfg, on_epoch_end=on_epoch_end)
    metrics = None
    if per_epoch:
        metrics = dict(per_epoch[-1], epochs_run=len(per_epoch), history=per_epoch)
    return model, history, metrics


# ---------------------------------------------------------------- commands

def cmd_gradcheck(cfg: dict, out: Path) -> int:
    g = cfg["gradcheck"]
    tol, step = float(g["tol"]), float(g["step"])
    scfg = StilConfig.from_dict(cfg["stil"]).replace(r=int(g["r"]))
    rows = []
    for name, fn, point in checks.primitive_cases():
        rep = ad.grad_check(fn, point, step=step, tol=tol)
        rows.append({"suite": "op", "name": name, "max_rel_err": rep.max_rel_err, "pass": rep.passed})
    rep = checks.block_check(scfg, shape=tuple(g["shape"]), step=step, tol=tol, seed=int(cfg["seed"]))
    for group, err in rep.per_group.items():
        rows.append({"suite": "block", "name": group, "max_rel_err": err, "pass": err <= tol})
    if g["model"]:
        _, mcfg, _, _ = build(cfg)
        rep = checks.model_check(mcfg, StilConfig.from_dict(cfg["stil"]), step=step, tol=tol,
                                 seed=int(cfg["seed"]), max_coords=g["model_coords"])
        for group, err in rep.per_group.items():
            rows.append({"suite": "model", "name": group, "max_rel_err": err, "pass": err <= tol})
    for r in rows:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['suite']:5s} {r['name']:28s} {r['max_rel_err']:.3e}")
    ok = all(r["pass"] for r in rows)
    summary = {"tol": tol, "step": step, "pass": ok, "max_rel_err": max(r["max_rel_err"] for r in rows),
               "groups": rows}
    _write_json(out / "gradcheck.json", summary)
    return 0 if ok else 1


def cmd_selftest(cfg: dict, out: Path) -> int:
    rows = []
    for name, passed, detail in checks.selftest_checks():
        print(f"{'PASS' if passed else 'FAIL'} {name} {detail}".rstrip())
        rows.append({"name": name, "pass": passed, "detail": detail})
    _write_json(out / "selftest.json", rows)
    return 0 if all(r["pass"] for r in rows) else 1


def cmd_synth(cfg: dict, out: Path) -> int:
    spec = build(cfg)[3]
    manifest = sd.write_corpus(spec, out / "corpus")
    _emit({"corpus": str(manifest.parent), "n_clips": spec.n_clips})
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    scfg = build(cfg)[0]
    model, history, metrics = fit(cfg, scfg, _corpus(cfg), out)
    model.save(out / "checkpoint")
    record = {"steps": len(history), "final_loss": history[-1]["loss"], "heldout": metrics}
    _write_json(out / "metrics.train.json", record)
    _emit({k: v for k, v in record.items() if k != "heldout"} | {"heldout_accuracy": metrics and metrics["accuracy"]})
    return 0


def _dump_attention(model: TinyStilNet, clips: list[sd.Clip], n: int, frames: int, out: Path) -> None:
    for i, clip in enumerate(clips[:n]):
        trace: dict = {}
        model.logit(sd.sample_frames(clip, frames).astype(np.float64), trace=trace)
        d = out / "attention" / f"clip_{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for key, fmap in trace.items():
            # S_* maps live in slice layouts; only the (T, C, H, W) attention maps are dumped
            if not (key.endswith(".mask") or ".F_" in key):
                continue
            tn.save(tn.Tensor(fmap), d / f"{key}.sten")
            pgm.write_pgm(d / f"{key}.pgm", pgm.tile_frames(fmap))


def cmd_eval(cfg: dict, out: Path) -> int:
    ck = Path(cfg["eval"]["checkpoint"] or out / "checkpoint")
    if not (ck / "manifest.txt").is_file():
        raise UsageError(f"no checkpoint at {ck}")
    model = TinyStilNet.load(ck)
    tcfg = build(cfg)[2]
    clips = _corpus(cfg)
    _, test_set = split_holdout(clips, cfg["holdout"]["fraction"])
    test_set = test_set or clips
    metrics = evaluate(model, test_set, tcfg.frames_eval)
    _write_json(out / "metrics.eval.json", metrics)
    n_att = int(cfg["eval"]["attention_clips"])
    if n_att:
        _dump_attention(model, test_set, n_att, tcfg.frames_eval, out)
    _emit(metrics)
    return 0


def cmd_slicemap(cfg: dict, out: Path) -> int:
    s = cfg["slicemap"]
    if s["clip"] is not None:
        frames = np.array(tn.load(s["clip"]).array)
        clip = sd.Clip(frames, -1)
    else:
        data = build(cfg)[3]
        common = dict(length=data.length, height=data.height, width=data.width, amplitude=data.amplitude)
        if s["label"] == "real":
            spec = sd.ClipSpec.real(**common)
        elif s["label"] == "fake":
            spec = sd.ClipSpec.fake(jitter_px=data.jitter_px, blend=data.blend, **common)
        else:
            raise UsageError(f"slicemap.label must be 'real' or 'fake', got {s['label']!r}")
        clip = sd.synth_clip(int(s["seed"]), spec)
    _, _, H, W = clip.frames.shape
    axis = s["axis"]
    pos = s["position"]
    if pos is None:
        pos = (W if axis == "h" else H) // 2
    smap = sd.slice_map(clip, axis, int(pos))
    stem = f"slice_{axis}{int(pos)}"
    pgm.write_pgm(out / f"{stem}.pgm", smap)
    tn.save(tn.Tensor(smap), out / f"{stem}.sten")
    _emit({"pgm": str(out / f"{stem}.pgm"), "shape": list(smap.shape),
           "roughness": sd.temporal_roughness(smap)})
    return 0


def ablation_grid(panels) -> list[tuple[str, str]]:
    rows = []
    for panel in panels:
        if panel not in ABLATION_PANELS:
            raise UsageError(f"unknown ablation panel {panel!r}")
        rows += [(panel, v) for v in ABLATION_PANELS[panel]]
    return rows


def cmd_ablate(cfg: dict, out: Path) -> int:
    base = build(cfg)[0]
    clips = _corpus(cfg)
    table = []
    for panel, value in ablation_grid(cfg["ablate"]["panels"]):
        scfg = base.replace(**{panel: value})
        _, history, metrics = fit(cfg, scfg, clips)
        row = {"panel": panel, "variant": value, "config": asdict(scfg), "steps": len(history),
               "accuracy": metrics and metrics["accuracy"], "auc": metrics and metrics["auc"]}
        table.append(row)
        _emit({k: row[k] for k in ("panel", "variant", "accuracy", "auc")})
    _write_json(out / "ablation.json", table)
    with open(out / "ablation.tsv", "w") as fh:
        fh.write("panel\tvariant\taccuracy\tauc\n")
        for r in table:
            fh.write(f"{r['panel']}\t{r['variant']}\t{r['accuracy']}\t{r['auc']}\n")
    return 0


HANDLERS = {"gradcheck": cmd_gradcheck, "selftest": cmd_selftest, "synth": cmd_synth, "train": cmd_train,
            "eval": cmd_eval, "slicemap": cmd_slicemap, "ablate": cmd_ablate}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stilkit", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted-key override, e.g. train.lr=1e-3 (repeatable)")
    ap.add_argument("--out", required=True, help="run directory for every artifact")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        eff = effective_config(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"config.{args.command}.json", eff)
        return HANDLERS[args.command](cfg, out)
    except (UsageError, ConfigError, TrainError, sd.SpecError, tn.TensorError, FileNotFoundError) as exc:
        print(f"stilkit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
