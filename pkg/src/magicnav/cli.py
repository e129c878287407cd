"""magicnav command-line driver.

Every subcommand writes into the run directory (``[run] out_dir`` or
``--out``)::

    manifest.jsonl    append-only: resolved config, stage transitions, checkpoints, final metrics
    metrics.jsonl     one record per evaluation
    checkpoints/      binary checkpoints
    scenes/           gen-scenes output
    plots/            plot-data CSVs

Exit status: 0 ok, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import KINDS, ConfigError, ExperimentConfig, load_config
from .env import dump_split
from .icod import (TrainRun, build_benchmark, cotrain, distill_student,
                   evaluate_split, run_chain)
from .model import ABILITIES, AgentModel
from .seeding import derive_seed

log = logging.getLogger("magicnav")

METRICS = ("sr", "spl", "ne", "osr")
SPLITS = ("val_seen", "val_unseen")


class RunDir:
    """Files of one run directory."""

    def __init__(self, root):
        self.root = root
        os.makedirs(os.path.join(root, "checkpoints"), exist_ok=True)
        self.metrics_path = os.path.join(root, "metrics.jsonl")
        self.manifest_path = os.path.join(root, "manifest.jsonl")

    def path(self, *parts):
        p = os.path.join(self.root, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def ckpt(self, name):
        return self.path("checkpoints", f"{name}.ckpt")

    def _append(self, path, record):
        with open(path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def metric(self, record):
        self._append(self.metrics_path, record)

    def event(self, kind, **fields):
        self._append(self.manifest_path, {"event": kind, "time": time.time(), **fields})


def _seeded(cfg, args):
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, run=replace(cfg.run, out_dir=args.out))
    seed = cfg.run.seed
    # the master seed drives every stochastic part of the run
    cfg = replace(cfg, env=replace(cfg.env, seed=seed),
                  S1=replace(cfg.S1, seed=derive_seed(seed, "S1")),
                  S2=replace(cfg.S2, seed=derive_seed(seed, "S2")),
                  S3=replace(cfg.S3, seed=derive_seed(seed, "S3")))
    return cfg


def _start(args, command):
    cfg = _seeded(load_config(args.config), args)
    rd = RunDir(cfg.run.out_dir)
    rd.event("start", command=command, argv=sys.argv[1:], config=cfg.to_dict())
    return cfg, rd


def _model_init(cfg, size, bench, tag):
    return AgentModel(cfg.model_config(size, bench.vocab.size), seed=derive_seed(cfg.run.seed, tag, "init"))


def _load_model(path):
    return load_checkpoint(path).build_model()


def _final_metrics(model, bench):
    return {split: evaluate_split(model, bench, getattr(bench, split)).as_dict() for split in SPLITS}


def _drive(run, rd, name, resume=False):
    """Run a TrainRun to completion, keeping a resumable checkpoint at each validation."""
    last = rd.ckpt(f"{name}-last")
    if resume and os.path.exists(last):
        run.load(last)
        rd.event("resume", stage=name, checkpoint=last, iteration=run.iteration)
    target = run.stage.iterations
    while run.iteration < target:
        run.step()
        if run.iteration % run.stage.val_interval == 0 or run.iteration == target:
            run.validate()
            run.save(last)
    run.restore_best()
    return run


def _save_model(rd, name, model, stage, run=None, **extra):
    path = rd.ckpt(name)
    meta = {"stage": stage, **extra}
    if run is not None:
        meta["best"] = list(run.best)
    save_checkpoint(path, model, iteration=run.iteration if run else 0, extra=meta)
    rd.event("checkpoint", stage=stage, name=name, path=path)
    return path


# ----------------------------------------------------------------- commands

def cmd_gen_scenes(args):
    cfg, rd = _start(args, "gen-scenes")
    bench = build_benchmark(cfg.env)
    for split in ("train", "val_seen", "val_unseen"):
        sp = getattr(bench, split)
        scenes = list({id(s): s for s in sp.scenes}.values())
        by_scene = {}
        for sc, ep in zip(sp.scenes, sp.episodes):
            by_scene.setdefault(sc.scene_id, []).append(ep)
        path = rd.path("scenes", f"{split}.json")
        dump_split(scenes, by_scene, path)
        rd.event("scenes", split=split, path=path, n_scenes=len(scenes), n_episodes=len(sp.episodes))
    print(rd.path("scenes"))
    return 0


def cmd_train(args):
    cfg, rd = _start(args, "train")
    bench = build_benchmark(cfg.env)
    model = _model_init(cfg, cfg.run.teacher, bench, "teacher")
    rd.event("stage", stage="S1", status="begin", size=cfg.run.teacher)
    run = TrainRun(model, bench, cfg.S1, tag="S1", on_record=rd.metric)
    _drive(run, rd, "S1", resume=args.resume)
    path = _save_model(rd, "teacher", model, "S1", run, size=cfg.run.teacher)
    final = _final_metrics(model, bench)
    rd.event("stage", stage="S1", status="end", checkpoint=path, metrics=final)
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_distill(args):
    cfg, rd = _start(args, "distill")
    bench = build_benchmark(cfg.env)
    teacher = _load_model(args.teacher)
    student = _model_init(cfg, cfg.run.student, bench, "student")
    rd.event("stage", stage="S2", status="begin", teacher=args.teacher, size=cfg.run.student)
    run = TrainRun(student, bench, cfg.S2, guide=teacher, dcfg=cfg.distill_config(cfg.S2.alpha),
                   weighting=cfg.weighting_strategy(), tag="S2", on_record=rd.metric)
    _drive(run, rd, "S2", resume=args.resume)
    path = _save_model(rd, "student", student, "S2", run, size=cfg.run.student)
    final = _final_metrics(student, bench)
    rd.event("stage", stage="S2", status="end", checkpoint=path, metrics=final)
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_cotrain(args):
    cfg, rd = _start(args, "cotrain")
    bench = build_benchmark(cfg.env)
    teacher, student = _load_model(args.teacher), _load_model(args.student)
    rd.event("stage", stage="S3", status="begin", teacher=args.teacher, student=args.student,
             feedback=not args.no_feedback)
    dcfg = cfg.distill_config(cfg.S3.alpha_s)
    _, _, (t_run, s_run) = cotrain(teacher, student, bench, cfg.S3, dcfg, cfg.weighting_strategy(),
                                   on_record=rd.metric, feedback=not args.no_feedback)
    tp = _save_model(rd, "teacher-S3", teacher, "S3", t_run)
    sp = _save_model(rd, "student-S3", student, "S3", s_run)
    final = {"teacher": _final_metrics(teacher, bench), "student": _final_metrics(student, bench)}
    rd.event("stage", stage="S3", status="end", checkpoints=[tp, sp], metrics=final)
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_chain(args):
    cfg, rd = _start(args, "chain")
    bench = build_benchmark(cfg.env)
    chain = cfg.chain_spec(bench.vocab.size)
    sizes = cfg.chain_sizes()

    def on_stage(stage, k, model):
        path = _save_model(rd, f"link{k}-{sizes[k]}-{stage}", model, stage, link=k, size=sizes[k])
        rd.event("stage", stage=stage, link=k, status="end", checkpoint=path)

    head = _load_model(args.head) if args.head else None
    models, _ = run_chain(chain, bench, cfg.stages(), cfg.distill_config(cfg.S2.alpha),
                          cfg.weighting_strategy, seed=cfg.run.seed, on_record=rd.metric, on_stage=on_stage,
                          head=head)
    final = {f"link{k}-{s}": _final_metrics(m, bench) for k, (s, m) in enumerate(zip(sizes, models))}
    rd.event("final", metrics=final)
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_eval(args):
    cfg, rd = _start(args, "eval")
    bench = build_benchmark(cfg.env)
    if args.random:
        model, driver, label = None, "random", "random"
    elif args.checkpoint:
        model, driver, label = _load_model(args.checkpoint), 0, args.checkpoint
    else:
        model, driver, label = _model_init(cfg, args.init, bench, "eval"), 0, f"init-{args.init}"
    splits = SPLITS if args.split == "both" else (args.split,)
    out = {}
    for split in splits:
        rng = np.random.default_rng(derive_seed(cfg.run.seed, "eval", split))
        m = evaluate_split(model, bench, getattr(bench, split), driver=driver, rng=rng)
        rec = {"split": split, "iteration": 0, **m.as_dict(), "seed": cfg.run.seed, "run": f"eval:{label}"}
        rd.metric(rec)
        out[split] = m.as_dict()
    rd.event("final", model=label, metrics=out)
    print(json.dumps(out, sort_keys=True))
    return 0


# ------------------------------------------------------------------ ablation

def _parse_grid(items):
    """``key=v1,v2`` strings -> ordered {key: [values]}; ability/kind sets use ``+``."""
    grid = {}
    for item in items or []:
        key, sep, vals = item.partition("=")
        if not sep or not vals:
            raise ConfigError(f"--grid expects key=v1,v2,...; got {item!r}")
        key = key.strip()
        if key not in ABLATION_KEYS:
            raise ConfigError(f"--grid key {key!r} not one of {sorted(ABLATION_KEYS)}")
        grid[key] = [v.strip() for v in vals.split(",")]
    if not grid:
        raise ConfigError("ablate needs at least one --grid")
    return grid


def _set_members(value, allowed, key):
    members = [] if value in ("none", "") else value.split("+")
    bad = set(members) - set(allowed)
    if bad:
        raise ConfigError(f"--grid {key}: unknown entries {sorted(bad)}")
    return ",".join(members)


def _apply_point(cfg, point):
    for key, value in point.items():
        if key == "beta":
            cfg = replace(cfg, S2=replace(cfg.S2, beta=float(value)))
        elif key == "alpha":
            cfg = replace(cfg, S2=replace(cfg.S2, alpha=float(value)))
        elif key == "weighting":
            cfg = replace(cfg, weighting=replace(cfg.weighting, variant=value))
        elif key == "abilities":
            cfg = replace(cfg, distill=replace(cfg.distill, abilities=_set_members(value, ABILITIES, key)))
        elif key == "kinds":
            cfg = replace(cfg, distill=replace(cfg.distill, kinds=_set_members(value, KINDS, key)))
    cfg.weighting_strategy()  # validates the variant before any training
    return cfg


ABLATION_KEYS = ("beta", "alpha", "weighting", "abilities", "kinds")


def cmd_ablate(args):
    cfg, rd = _start(args, "ablate")
    grid = _parse_grid(args.grid)
    points = [dict(zip(grid, combo)) for combo in itertools.product(*grid.values())]
    configs = [_apply_point(cfg, p) for p in points]
    bench = build_benchmark(cfg.env)
    if args.teacher:
        teacher = _load_model(args.teacher)
    else:
        teacher = _model_init(cfg, cfg.run.teacher, bench, "teacher")
        rd.event("stage", stage="S1", status="begin", size=cfg.run.teacher)
        _drive(TrainRun(teacher, bench, cfg.S1, tag="S1", on_record=rd.metric), rd, "S1")
        path = _save_model(rd, "teacher", teacher, "S1")
        rd.event("stage", stage="S1", status="end", checkpoint=path)
    summary = []
    for point, pcfg in zip(points, configs):
        tag = ",".join(f"{k}={v}" for k, v in point.items())
        rd.event("stage", stage="S2", status="begin", point=point)
        student, run = distill_student(teacher, pcfg.model_config(pcfg.run.student, bench.vocab.size), bench,
                                       pcfg.S2, pcfg.distill_config(pcfg.S2.alpha), pcfg.weighting_strategy(),
                                       on_record=lambda r, tag=tag: rd.metric({**r, "run": f"S2[{tag}]"}),
                                       tag="S2")
        final = _final_metrics(student, bench)
        row = {"point": point, "best_iteration": run.best[2], **{f"{s}_{m}": final[s][m]
                                                                for s in SPLITS for m in METRICS}}
        summary.append(row)
        rd.event("stage", stage="S2", status="end", point=point, metrics=final)
        print(json.dumps(row, sort_keys=True), flush=True)
    with open(rd.path("ablate.jsonl"), "w") as fh:
        for row in summary:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


# ----------------------------------------------------------------- plot data

def read_metrics(path):
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records:
        raise ValueError(f"{path}: metrics log is empty")
    return records


def emit_plot_data(records, out_dir, run=None):
    """Write ``<metric>_<split>.csv`` with columns iteration,value,seed.

    Records from several runs go into one sub-directory per run unless
    ``run`` selects a single one.
    """
    if run is not None:
        records = [r for r in records if r.get("run") == run]
        if not records:
            raise ValueError(f"no records for run {run!r}")
    runs = sorted({r.get("run", "") for r in records})
    written = []
    for name in runs:
        sub = out_dir if len(runs) == 1 else os.path.join(out_dir, name.replace("/", "_") or "run")
        os.makedirs(sub, exist_ok=True)
        mine = [r for r in records if r.get("run", "") == name]
        for metric in METRICS:
            for split in sorted({r["split"] for r in mine}):
                rows = sorted(((r["iteration"], r[metric], r["seed"]) for r in mine if r["split"] == split),
                              key=lambda x: (x[0], x[2]))
                path = os.path.join(sub, f"{metric}_{split}.csv")
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["iteration", "value", "seed"])
                    w.writerows((it, repr(float(v)), seed) for it, v, seed in rows)
                written.append(path)
    return written


def cmd_plot_data(args):
    cfg = _seeded(load_config(args.config), args)
    source = args.metrics or os.path.join(cfg.run.out_dir, "metrics.jsonl")
    try:
        records = read_metrics(source)
    except FileNotFoundError:
        raise ValueError(f"metrics log {source} not found") from None
    out = args.plots or os.path.join(cfg.run.out_dir, "plots")
    for p in emit_plot_data(records, out, args.run):
        print(p)
    return 0


# ---------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="magicnav", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI experiment config (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", help="override [run] out_dir")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-scenes", cmd_gen_scenes, "generate the benchmark scenes and episodes")
    sp = add("train", cmd_train, "S1: train the teacher")
    sp.add_argument("--resume", action="store_true", help="continue from the last S1 checkpoint")
    sp = add("distill", cmd_distill, "S2: distill a student from a teacher checkpoint")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--resume", action="store_true")
    sp = add("cotrain", cmd_cotrain, "S3: co-train a teacher/student pair")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student", required=True)
    sp.add_argument("--no-feedback", action="store_true", help="teacher batches without the student term")
    sp = add("chain", cmd_chain, "S1 then S2+S3 along the configured size chain")
    sp.add_argument("--head", help="skip S1 and use this checkpoint as the head model")
    sp = add("eval", cmd_eval, "evaluate a checkpoint, a fresh model, or the random policy")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--checkpoint")
    g.add_argument("--random", action="store_true", help="uniform random legal actions")
    g.add_argument("--init", default="L", help="untrained model of this ladder size (default)")
    sp.add_argument("--split", choices=(*SPLITS, "both"), default="both")
    sp = add("ablate", cmd_ablate, "S2 sweeps over beta / alpha / weighting / abilities / kinds")
    sp.add_argument("--grid", action="append", help="key=v1,v2,... (sets as a+b, or none)")
    sp.add_argument("--teacher", help="teacher checkpoint (trained with S1 when omitted)")
    sp = add("plot-data", cmd_plot_data, "CSV series per metric and split from a metrics log")
    sp.add_argument("--metrics", help="metrics.jsonl (default: <out_dir>/metrics.jsonl)")
    sp.add_argument("--plots", help="output directory (default: <out_dir>/plots)")
    sp.add_argument("--run", help="restrict to one run tag")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
