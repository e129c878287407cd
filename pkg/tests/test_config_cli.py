import csv
import json
import shutil
import subprocess
import sys

import pytest

from magicnav.cli import _parse_grid, _apply_point, emit_plot_data, main, read_metrics
from magicnav.config import ConfigError, ExperimentConfig, load_config, parse_config

TINY = """\
[run]
chain = M,S
[env]
n_train_scenes = 2
n_unseen_scenes = 1
train_episodes_per_scene = 10
n_val_seen = 8
n_val_unseen = 8
[S1]
iterations = 4
val_interval = 2
batch_size = 4
warmup = 2
[S2]
iterations = 4
val_interval = 2
batch_size = 4
warmup = 2
[S3]
iterations = 2
val_interval = 1
batch_size = 4
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def jsonl(path):
    return [json.loads(line) for line in open(path)]


# ------------------------------------------------------------------ config

def test_defaults_and_roundtrip():
    cfg = load_config()
    assert cfg == ExperimentConfig()
    assert parse_config(cfg.to_ini()) == cfg
    tiny = parse_config(TINY)
    assert parse_config(tiny.to_ini()) == tiny
    assert tiny.chain_sizes() == ["M", "S"] and tiny.S1.iterations == 4


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"x\.ini:5: unknown key 'bogus' in \[S1\]"):
        parse_config("[run]\nseed = 1\n\n[S1]\nbogus = 3\n", "x.ini")


def test_bad_values_rejected():
    for text in ("[nope]\n", "[S1]\nlr = fast\n", "[S1]\nstage = S2\n", "[run]\nchain = S,L\n"):
        with pytest.raises(ConfigError):
            parse_config(text)


def test_cli_config_error_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nseed = 1\n[S1]\nbogus = 3\n")
    assert run("gen-scenes", "--config", bad, "--out", tmp_path / "o") == 1
    assert ":4:" in capsys.readouterr().err


# -------------------------------------------------------------- gen-scenes

def test_gen_scenes_byte_identical(tiny, tmp_path):
    for d in ("a", "b"):
        assert run("gen-scenes", "--config", tiny, "--out", tmp_path / d) == 0
    for split in ("train", "val_seen", "val_unseen"):
        a = (tmp_path / "a" / "scenes" / f"{split}.json").read_bytes()
        assert a == (tmp_path / "b" / "scenes" / f"{split}.json").read_bytes()
    assert run("gen-scenes", "--config", tiny, "--out", tmp_path / "c", "--seed", 5) == 0
    assert (tmp_path / "c" / "scenes" / "val_unseen.json").read_bytes() != a


# -------------------------------------------------------------------- eval

def test_eval_random_and_init(tiny, tmp_path, capsys):
    out = tmp_path / "e"
    assert run("eval", "--config", tiny, "--out", out, "--random") == 0
    rnd = json.loads(capsys.readouterr().out)
    assert set(rnd) == {"val_seen", "val_unseen"} and 0.0 <= rnd["val_unseen"]["sr"] <= 1.0
    assert run("eval", "--config", tiny, "--out", out, "--init", "S", "--split", "val_seen") == 0
    init = json.loads(capsys.readouterr().out)
    assert set(init) == {"val_seen"}
    recs = jsonl(out / "metrics.jsonl")
    assert [r["run"] for r in recs] == ["eval:random", "eval:random", "eval:init-S"]
    events = [e["event"] for e in jsonl(out / "manifest.jsonl")]
    assert events == ["start", "final", "start", "final"]


def test_missing_checkpoint_exit_2(tiny, tmp_path, capsys):
    assert run("eval", "--config", tiny, "--out", tmp_path / "e", "--checkpoint", tmp_path / "nope.ckpt") == 2
    assert "nope.ckpt" in capsys.readouterr().err
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"x" * 100)
    assert run("distill", "--config", tiny, "--out", tmp_path / "d", "--teacher", junk) == 2


# ---------------------------------------------------------- train pipeline

def test_train_distill_cotrain_pipeline(tiny, tmp_path, capsys):
    out = tmp_path / "r"
    assert run("train", "--config", tiny, "--out", out) == 0
    teacher = out / "checkpoints" / "teacher.ckpt"
    assert teacher.exists()
    assert run("distill", "--config", tiny, "--out", out, "--teacher", teacher) == 0
    student = out / "checkpoints" / "student.ckpt"
    assert run("cotrain", "--config", tiny, "--out", out, "--teacher", teacher, "--student", student) == 0
    assert run("eval", "--config", tiny, "--out", out, "--checkpoint", student) == 0
    recs = jsonl(out / "metrics.jsonl")
    assert {r["run"] for r in recs} >= {"S1", "S2", "S3-teacher", "S3-student"}
    stages = [(e["stage"], e["status"]) for e in jsonl(out / "manifest.jsonl") if e["event"] == "stage"]
    assert stages == [("S1", "begin"), ("S1", "end"), ("S2", "begin"), ("S2", "end"), ("S3", "begin"),
                      ("S3", "end")]


def test_resume_continues_from_last(tiny, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("train", "--config", tiny, "--out", full) == 0
    short = tmp_path / "short.ini"
    short.write_text(TINY.replace("[S1]\niterations = 4", "[S1]\niterations = 2"))
    assert run("train", "--config", short, "--out", part) == 0
    assert run("train", "--config", tiny, "--out", part, "--resume") == 0
    assert (full / "checkpoints" / "teacher.ckpt").read_bytes() == (part / "checkpoints" / "teacher.ckpt").read_bytes()
    assert any(e["event"] == "resume" for e in jsonl(part / "manifest.jsonl"))


def test_chain_is_reproducible(tiny, tmp_path):
    for d in ("a", "b"):
        assert run("chain", "--config", tiny, "--out", tmp_path / d) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    for f in sorted((tmp_path / "a" / "checkpoints").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "checkpoints" / f.name).read_bytes(), f.name

    def strip(path):
        return [{k: v for k, v in e.items() if k not in ("time",)} for e in jsonl(path)]

    a, b = strip(tmp_path / "a" / "manifest.jsonl"), strip(tmp_path / "b" / "manifest.jsonl")
    assert json.dumps(a).replace(str(tmp_path / "a"), "") == json.dumps(b).replace(str(tmp_path / "b"), "")


# ------------------------------------------------------------------ ablate

def test_grid_parsing():
    g = _parse_grid(["beta=0,0.7", "abilities=v+t,none"])
    assert g == {"beta": ["0", "0.7"], "abilities": ["v+t", "none"]}
    cfg = _apply_point(ExperimentConfig(), {"beta": "0", "abilities": "v+t", "kinds": "logit"})
    assert cfg.S2.beta == 0.0 and cfg.distill.abilities == "v,t" and cfg.distill.kinds == "logit"
    assert _apply_point(ExperimentConfig(), {"abilities": "none"}).distill.abilities == ""
    for bad in (["gamma=1"], ["beta"], ["beta="], []):
        with pytest.raises(ConfigError):
            _parse_grid(bad)
    with pytest.raises(ConfigError):
        _apply_point(ExperimentConfig(), {"abilities": "v+x"})
    with pytest.raises(ConfigError):
        _apply_point(ExperimentConfig(), {"weighting": "magic"})


def test_ablate_writes_one_row_per_point(tiny, tmp_path):
    out = tmp_path / "ab"
    assert run("ablate", "--config", tiny, "--out", out, "--grid", "beta=0,0.7", "--grid", "weighting=equal") == 0
    rows = jsonl(out / "ablate.jsonl")
    assert [r["point"] for r in rows] == [{"beta": "0", "weighting": "equal"}, {"beta": "0.7", "weighting": "equal"}]
    assert run("ablate", "--config", tiny, "--out", out, "--grid", "nope=1") == 1


# --------------------------------------------------------------- plot-data

def test_plot_data_roundtrip(tmp_path):
    recs = [{"split": s, "iteration": i, "sr": i / 10, "spl": 0.1, "ne": 1.5, "osr": 0.2, "seed": 3, "run": "S1"}
            for i in (2, 1) for s in ("val_seen", "val_unseen")]
    log = tmp_path / "metrics.jsonl"
    log.write_text("".join(json.dumps(r) + "\n" for r in recs))
    paths = emit_plot_data(read_metrics(log), tmp_path / "plots")
    assert len(paths) == 8
    with open(tmp_path / "plots" / "sr_val_unseen.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(int(r["iteration"]), float(r["value"]), int(r["seed"])) for r in rows] == [(1, 0.1, 3), (2, 0.2, 3)]


def test_plot_data_splits_runs(tmp_path):
    recs = [{"split": "val_seen", "iteration": 1, "sr": 0.5, "spl": 0.1, "ne": 1.0, "osr": 0.5, "seed": 0,
             "run": r} for r in ("S1", "S2")]
    paths = emit_plot_data(recs, tmp_path / "p")
    assert {p.split("/")[-2] for p in paths} == {"S1", "S2"}
    assert len(emit_plot_data(recs, tmp_path / "q", run="S2")) == 4


def test_plot_data_empty_log_exit_2(tmp_path, capsys):
    log = tmp_path / "metrics.jsonl"
    log.write_text("")
    assert run("plot-data", "--metrics", log, "--plots", tmp_path / "p") == 2
    assert "empty" in capsys.readouterr().err
    assert run("plot-data", "--metrics", tmp_path / "missing.jsonl") == 2


@pytest.mark.skipif(shutil.which("magicnav") is None, reason="console script not installed")
def test_console_script_help():
    res = subprocess.run(["magicnav", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-scenes" in res.stdout
    res = subprocess.run([sys.executable, "-m", "magicnav.cli", "eval", "--random", "--checkpoint", "x"],
                         capture_output=True, text=True)
    assert res.returncode == 2  # argparse usage error
