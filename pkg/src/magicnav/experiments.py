"""Desk-scale experiments on the default benchmark.

Every stage (teacher training, one distillation, one co-training) is cached
as a JSON result plus checkpoints under a key that hashes exactly the inputs
of that stage, including the key of the model it starts from.  Multi-seed
comparisons therefore share stages instead of retraining them, and changing
one budget only invalidates the stages it feeds.  Run from the shell with::

    python -m magicnav.experiments all --cache acceptance_cache
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import statistics
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .icod import EnvConfig, StageConfig, TrainRun, build_benchmark, cotrain, distill_student, evaluate_split
from .makd import DistillConfig
from .model import SIZE_LADDER, AgentModel
from .seeding import derive_seed
from .weighting import WeightingStrategy

log = logging.getLogger(__name__)

CACHE_FORMAT = 2

#: when true, a stage missing from the cache raises NotCached instead of being computed
READ_ONLY = False


class NotCached(LookupError):
    """A stage result is absent and READ_ONLY forbids computing it."""


@dataclass(frozen=True)
class Budget:
    """Iteration budgets of the acceptance experiments."""
    teacher_iterations: int = 2000
    teacher_val: int = 250
    distill_iterations: int = 2000
    distill_val: int = 250
    cotrain_iterations: int = 250
    cotrain_val: int = 125
    seeds: tuple = (0, 1, 2, 3, 4)


def stage_key(name, params):
    text = json.dumps({"format": CACHE_FORMAT, "name": name, **params}, sort_keys=True)
    return f"{name}-{hashlib.sha256(text.encode()).hexdigest()[:12]}"


def is_cached(cache_dir, key):
    return os.path.exists(os.path.join(cache_dir, f"{key}.json"))


def _cached(cache_dir, key, params, compute):
    path = os.path.join(cache_dir, f"{key}.json")
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    if READ_ONLY:
        raise NotCached(key)
    t0 = time.perf_counter()
    result = {"key": key, "params": params, **compute()}
    result["wall_seconds"] = time.perf_counter() - t0
    os.makedirs(cache_dir, exist_ok=True)
    with open(path + ".tmp", "w") as fh:
        json.dump(result, fh, sort_keys=True, indent=1)
    os.replace(path + ".tmp", path)
    return result


def _ckpt(cache_dir, key, role):
    return os.path.join(cache_dir, f"{key}-{role}.ckpt")


def _load(cache_dir, ref):
    key, role = ref
    return load_checkpoint(_ckpt(cache_dir, key, role)).build_model()


def _both(model, bench):
    return {split: evaluate_split(model, bench, getattr(bench, split)).sr for split in ("val_seen", "val_unseen")}


def _progress(tag):
    return lambda r: log.info("%s it %d %s sr %.3f", tag, r["iteration"], r["split"], r["sr"])


_BENCH = {}


def _bench(env):
    if env not in _BENCH:
        _BENCH[env] = build_benchmark(env)
    return _BENCH[env]


# ------------------------------------------------------------------- stages

def teacher_stage(cache_dir, env=EnvConfig(), budget=Budget(), seed=0, threshold=0.70):
    """S1 on the L-size model; records when unseen SR first reaches ``threshold``.

    Returns (result, ref) where ``ref`` names the best teacher checkpoint.
    """
    params = {"env": asdict(env), "seed": seed, "iterations": budget.teacher_iterations,
              "val": budget.teacher_val, "threshold": threshold}
    key = stage_key("teacher", params)

    def compute():
        bench = _bench(env)
        model = AgentModel(bench.model_config(SIZE_LADDER["L"]), seed=derive_seed(seed, "teacher", "init"))
        stage = StageConfig("S1", iterations=budget.teacher_iterations, val_interval=budget.teacher_val,
                            seed=derive_seed(seed, "S1"))
        run = TrainRun(model, bench, stage, tag="S1", on_record=_progress("S1"))
        t0 = time.perf_counter()
        hit = None
        while run.iteration < stage.iterations:
            run.step()
            if run.iteration % stage.val_interval == 0:
                out = run.validate()
                if hit is None and out["val_unseen"].sr >= threshold:
                    hit = {"iteration": run.iteration, "seconds": time.perf_counter() - t0}
        elapsed = time.perf_counter() - t0
        run.restore_best()
        save_checkpoint(_ckpt(cache_dir, key, "model"), model, iteration=run.iteration)
        rnd = evaluate_split(None, bench, bench.val_unseen, driver="random", rng=np.random.default_rng(seed))
        return {"first_hit": hit, "seconds": elapsed, "best": list(run.best), "records": run.records,
                "random_policy": rnd.as_dict(), "final": _both(model, bench)}

    os.makedirs(cache_dir, exist_ok=True)
    return _cached(cache_dir, key, params, compute), (key, "model")


def distill_stage(cache_dir, teacher_ref, size, alpha, seed, env=EnvConfig(), budget=Budget()):
    """S2: a fresh ``size`` student distilled from ``teacher_ref`` (alpha=0: labels only).

    The student's initialisation and stream depend on (seed, size) only, so
    arms that differ in teacher or alpha start from the same weights.
    """
    params = {"env": asdict(env), "teacher": list(teacher_ref), "size": size, "alpha": alpha, "seed": seed,
              "iterations": budget.distill_iterations, "val": budget.distill_val}
    key = stage_key("distill", params)

    def compute():
        bench = _bench(env)
        teacher = _load(cache_dir, teacher_ref)
        stage = StageConfig("S2", iterations=budget.distill_iterations, val_interval=budget.distill_val,
                            alpha=alpha, seed=derive_seed(seed, "S2", size))
        student, run = distill_student(teacher, bench.model_config(SIZE_LADDER[size]), bench, stage,
                                       DistillConfig(alpha=alpha), WeightingStrategy("mkrw"), tag=f"S2-{size}",
                                       on_record=_progress(f"{key} a={alpha}"))
        save_checkpoint(_ckpt(cache_dir, key, "model"), student, iteration=run.iteration)
        return {"best": list(run.best), "records": run.records, "final": _both(student, bench),
                "teacher": _both(teacher, bench)}

    return _cached(cache_dir, key, params, compute), (key, "model")


def cotrain_stage(cache_dir, teacher_ref, student_ref, seed, feedback=True, env=EnvConfig(), budget=Budget()):
    """S3 on a (teacher, student) pair; refined models are stored as roles "teacher" / "student".

    Reports each model before co-training, at the last iterate and at the
    selected checkpoint.
    """
    params = {"env": asdict(env), "teacher": list(teacher_ref), "student": list(student_ref), "seed": seed,
              "feedback": feedback, "iterations": budget.cotrain_iterations, "val": budget.cotrain_val}
    key = stage_key("cotrain", params)

    def compute():
        bench = _bench(env)
        teacher, student = _load(cache_dir, teacher_ref), _load(cache_dir, student_ref)
        pre = {"teacher": _both(teacher, bench), "student": _both(student, bench)}
        stage = StageConfig("S3", lr=3e-4, iterations=budget.cotrain_iterations, val_interval=budget.cotrain_val,
                            warmup=0, seed=derive_seed(seed, "S3"))
        _, _, (t_run, s_run) = cotrain(teacher, student, bench, stage, DistillConfig(),
                                       WeightingStrategy("mkrw"), tag="S3", feedback=feedback,
                                       on_record=_progress(f"{key} fb={feedback}"))
        out = {"pre": pre, "last": {}, "best": {}}
        for role, run in (("teacher", t_run), ("student", s_run)):
            # the final iteration is always validated; cotrain() then restores the selected checkpoint
            out["last"][role] = {r["split"]: r["sr"] for r in run.records if r["iteration"] == run.iteration}
            out["best"][role] = _both(run.learner, bench)
            out[f"{role}_records"] = run.records
            save_checkpoint(_ckpt(cache_dir, key, role), run.learner, iteration=run.iteration)
        return out

    return _cached(cache_dir, key, params, compute), (key, "teacher"), (key, "student")


# -------------------------------------------------------------- comparisons

def kd_vs_plain(cache_dir, seed, env=EnvConfig(), budget=Budget(), size="S"):
    """Unseen SR of a student distilled with the full loss set vs. trained on labels only."""
    _, head = teacher_stage(cache_dir, env, budget)
    kd, _ = distill_stage(cache_dir, head, size, 0.5, seed, env, budget)
    plain, _ = distill_stage(cache_dir, head, size, 0.0, seed, env, budget)
    return {"kd": kd["final"]["val_unseen"], "plain": plain["final"]["val_unseen"]}


def chain_vs_direct(cache_dir, seed, env=EnvConfig(), budget=Budget()):
    """L -> M -> S against L -> S (each link S2 then S3), plus a no-feedback S3 control on L -> S."""
    _, head = teacher_stage(cache_dir, env, budget)
    links = {}
    _, m = distill_stage(cache_dir, head, "M", 0.5, seed, env, budget)
    links["L-M"], _, m_refined = cotrain_stage(cache_dir, head, m, seed, True, env, budget)
    _, s_chain = distill_stage(cache_dir, m_refined, "S", 0.5, seed, env, budget)
    links["M-S"], _, _ = cotrain_stage(cache_dir, m_refined, s_chain, seed, True, env, budget)
    _, s_direct = distill_stage(cache_dir, head, "S", 0.5, seed, env, budget)
    links["L-S"], _, _ = cotrain_stage(cache_dir, head, s_direct, seed, True, env, budget)
    links["L-S-nofb"], _, _ = cotrain_stage(cache_dir, head, s_direct, seed, False, env, budget)
    return {"links": links,
            "chain_S_unseen": links["M-S"]["best"]["student"]["val_unseen"],
            "direct_S_unseen": links["L-S"]["best"]["student"]["val_unseen"]}


def median(xs):
    return float(statistics.median(xs))


def main(argv=None):
    p = argparse.ArgumentParser(description="desk-scale experiments with a stage cache")
    p.add_argument("what", choices=("teacher", "kd", "chain", "all"))
    p.add_argument("--cache", default="acceptance_cache")
    p.add_argument("--seeds", default="0,1,2,3,4")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    budget = replace(Budget(), seeds=tuple(int(s) for s in args.seeds.split(",")))
    r, _ = teacher_stage(args.cache, budget=budget)
    print(json.dumps({k: r[k] for k in ("first_hit", "seconds", "best", "final", "random_policy")}), flush=True)
    for s in budget.seeds:
        if args.what in ("kd", "all"):
            print(json.dumps({"seed": s, **kd_vs_plain(args.cache, s, budget=budget)}), flush=True)
        if args.what in ("chain", "all"):
            r = chain_vs_direct(args.cache, s, budget=budget)
            print(json.dumps({"seed": s, "chain": r["chain_S_unseen"], "direct": r["direct_S_unseen"]}), flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
