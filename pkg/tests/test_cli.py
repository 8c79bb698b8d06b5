import hashlib
import json

import numpy as np
import pytest

from stilkit import cli, pgm
from stilkit import tensor as tn
from stilkit.stil import StilConfig, init_stil_params, run_block

TINY = ["--set", "data.n_clips=8", "--set", "data.length=8", "--set", "data.height=16",
        "--set", "data.width=16", "--set", "train.epochs=1", "--set", "train.batch=4",
        "--set", "train.frames_eval=8", "--set", "holdout.fraction=0.25"]


def tree_hash(d):
    h = hashlib.sha256()
    for f in sorted(p for p in d.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(d)).encode() + f.read_bytes())
    return h.hexdigest()


def test_missing_config_exit_2(tmp_path, capsys):
    assert cli.main(["gradcheck", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("override", ["bogus=1", "train.bogus=1", "stil.r=0", "stil.modules=everything",
                                      "a.b.c=1", "noequals"])
def test_bad_config_exit_2(tmp_path, override):
    assert cli.main(["selftest", "--set", override, "--out", str(tmp_path)]) == 2


def test_bad_json_file_exit_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["selftest", "--config", str(p), "--out", str(tmp_path)]) == 2
    p.write_text('{"stil": {"radius": 3}}')
    assert cli.main(["selftest", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_unknown_command_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_config_file_and_overrides_merge(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"lr": 1e-3}, "stil": {"r": 4}}))
    cfg = cli.load_config(str(p), ["train.lr=5e-4", "seed=3", "slicemap.axis=w"])
    assert cfg["train"]["lr"] == 5e-4 and cfg["stil"]["r"] == 4 and cfg["seed"] == 3
    assert cfg["slicemap"]["axis"] == "w"


def test_effective_config_echoed(tmp_path):
    assert cli.main(["selftest", "--set", "stil.r=4", "--out", str(tmp_path)]) == 0
    echo = json.loads((tmp_path / "config.selftest.json").read_text())
    assert echo["stil"]["r"] == 4 and echo["train"]["lr"] == 2e-4 and echo["data"]["n_clips"] == 200


def test_selftest_passes(tmp_path, capsys):
    assert cli.main(["selftest", "--out", str(tmp_path)]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_gradcheck_block_only_passes_and_tight_tol_fails(tmp_path, capsys):
    assert cli.main(["gradcheck", "--set", "gradcheck.model=false", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS block sim.k1.w" in out and "FAIL" not in out
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["pass"] and report["max_rel_err"] <= 1e-4
    assert cli.main(["gradcheck", "--set", "gradcheck.model=false", "--set", "gradcheck.tol=1e-12",
                     "--out", str(tmp_path)]) == 1


def test_synth_is_idempotent(tmp_path):
    args = ["--set", "data.n_clips=200", "--set", "data.seed_base=7", "--set", "data.length=4",
            "--set", "data.height=8", "--set", "data.width=8"]
    assert cli.main(["synth", *args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", *args, "--out", str(tmp_path / "b")]) == 0
    assert tree_hash(tmp_path / "a" / "corpus") == tree_hash(tmp_path / "b" / "corpus")
    assert len((tmp_path / "a" / "corpus" / "manifest.jsonl").read_text().splitlines()) == 200


def test_train_eval_pipeline(tmp_path):
    out = str(tmp_path)
    assert cli.main(["synth", *TINY, "--out", out]) == 0
    corpus = ["--set", f"corpus={json.dumps(str(tmp_path / 'corpus'))}"]
    assert cli.main(["train", *TINY, *corpus, "--out", out]) == 0
    assert (tmp_path / "checkpoint" / "manifest.txt").is_file()
    log = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 2 and "wall" not in log[0]
    assert "wall" in (tmp_path / "train_times.jsonl").read_text()
    assert cli.main(["eval", *TINY, *corpus, "--set", "eval.attention_clips=1", "--out", out]) == 0
    metrics = json.loads((tmp_path / "metrics.eval.json").read_text())
    assert metrics["n"] == 2 and 0 <= metrics["accuracy"] <= 1
    att = tmp_path / "attention" / "clip_000"
    fmap = tn.load(att / "b0.stil.tim.F_h.sten")
    assert fmap.dims == (8, 4, 8, 8)
    assert pgm.read_pgm(att / "b0.stil.tim.F_h.pgm").shape == (8, 64)


def test_train_is_idempotent(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", *TINY, "--out", str(tmp_path / name)]) == 0
    for f in ("train_log.jsonl", "metrics.train.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert tree_hash(tmp_path / "a" / "checkpoint") == tree_hash(tmp_path / "b" / "checkpoint")


def test_eval_zero_head_is_chance(tmp_path, capsys):
    args = ["--set", "model.head_init=\"zero\"", "--set", "data.n_clips=40", "--set", "data.length=16",
            "--set", "data.height=16", "--set", "data.width=16", "--set", "holdout.fraction=0"]
    from stilkit.model import ModelConfig, TinyStilNet
    TinyStilNet(ModelConfig(head_init="zero")).save(tmp_path / "checkpoint")
    assert cli.main(["eval", *args, "--out", str(tmp_path)]) == 0
    metrics = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert metrics == {"accuracy": 0.5, "auc": 0.5, "n": 40}


def test_eval_missing_checkpoint_exit_2(tmp_path):
    assert cli.main(["eval", *TINY, "--out", str(tmp_path)]) == 2


def test_slicemap(tmp_path, capsys):
    args = ["--set", "data.length=12", "--set", "data.height=16", "--set", "data.width=20",
            "--set", "slicemap.axis=\"w\"", "--set", "slicemap.position=3"]
    assert cli.main(["slicemap", *args, "--out", str(tmp_path)]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["shape"] == [20, 12]
    assert pgm.read_pgm(tmp_path / "slice_w3.pgm").shape == (20, 12)
    assert cli.main(["slicemap", *args, "--set", "slicemap.position=99", "--out", str(tmp_path)]) == 2
    assert cli.main(["slicemap", "--set", "slicemap.label=\"other\"", "--out", str(tmp_path)]) == 2


def test_slicemap_from_clip_file(tmp_path):
    frames = np.zeros((6, 3, 8, 8), dtype=np.float32)
    tn.save(tn.Tensor(frames), tmp_path / "c.sten")
    assert cli.main(["slicemap", "--set", f"slicemap.clip={json.dumps(str(tmp_path / 'c.sten'))}",
                     "--out", str(tmp_path)]) == 0
    assert pgm.read_pgm(tmp_path / "slice_h4.pgm").shape == (8, 6)


def test_ablation_grid_rows():
    grid = cli.ablation_grid(cli.DEFAULTS["ablate"]["panels"])
    counts = {p: sum(1 for q, _ in grid if q == p) for p in cli.ABLATION_PANELS}
    assert counts == {"modules": 4, "diff_mode": 4, "ism_mode": 4, "fusion_mode": 2}
    assert len(grid) == 14
    with pytest.raises(cli.UsageError):
        cli.ablation_grid(["depth"])


def test_ablation_variants_all_run(rng):
    x = rng.normal(size=(2, 8, 4, 4))
    for panel, value in cli.ablation_grid(cli.DEFAULTS["ablate"]["panels"]):
        cfg = StilConfig(r=2).replace(**{panel: value})
        assert run_block(x, init_stil_params(8, cfg, rng), cfg).shape == x.shape


def test_ablate_command_table(tmp_path):
    assert cli.main(["ablate", *TINY, "--set", 'ablate.panels=["fusion_mode"]', "--out", str(tmp_path)]) == 0
    table = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["variant"] for r in table] == ["sigmoid_of_sum", "mean_of_sigmoids"]
    assert (tmp_path / "ablation.tsv").read_text().splitlines()[0] == "panel\tvariant\taccuracy\tauc"
    assert cli.main(["ablate", *TINY, "--set", 'ablate.panels=["depth"]', "--out", str(tmp_path)]) == 2
