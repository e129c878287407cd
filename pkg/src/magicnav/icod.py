"""Interactive chain-of-distillation: teacher training, distillation,
co-training and chain compression on the synthetic benchmark."""
from __future__ import annotations

import copy
import logging
import math
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .env import Vocabulary, generate_scene, sample_episode
from .makd import DistillConfig, ProjectionAdapter, makd_losses
from .metrics import DEFAULT_SUCCESS_DISTANCE, aggregate
from .model import AgentModel, ModelConfig
from .optim import AdamW
from .rollout import DEFAULT_HORIZON, evaluate, rollout
from .seeding import derive_seed
from .tensor import ContractError
from .weighting import WeightingStrategy, combine_per_sample, teacher_uncertainty, transfer_weight

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


# ----------------------------------------------------------------- benchmark

@dataclass(frozen=True)
class EnvConfig:
    n_train_scenes: int = 20
    n_unseen_scenes: int = 5
    n_nodes: int = 30
    area_side: float = 12.0
    connect_radius: float = 3.5
    n_landmarks: int = 48
    min_hops: int = 2
    max_hops: int = 5
    sigma: float = 0.1
    train_episodes_per_scene: int = 200
    n_val_seen: int = 200
    n_val_unseen: int = 200
    success_distance: float = DEFAULT_SUCCESS_DISTANCE
    horizon: int = DEFAULT_HORIZON
    seed: int = 0


@dataclass
class Split:
    scenes: list        # scene per episode
    episodes: list
    obs_seeds: list


@dataclass
class Benchmark:
    config: EnvConfig
    vocab: Vocabulary
    train_scenes: list
    unseen_scenes: list
    train: Split
    val_seen: Split
    val_unseen: Split

    def model_config(self, hidden, **kw):
        return ModelConfig(hidden=hidden, vocab_size=self.vocab.size, obs_dim=32, **kw)


def _split(scenes, n_per_scene, cfg, vocab, tag):
    sc, eps, seeds = [], [], []
    for i, scene in enumerate(scenes):
        for j in range(n_per_scene):
            sc.append(scene)
            eps.append(sample_episode(scene, derive_seed(cfg.seed, tag, i, j), cfg.min_hops, cfg.max_hops, vocab))
            seeds.append(derive_seed(cfg.seed, tag, "obs", i, j))
    return Split(sc, eps, seeds)


def build_benchmark(cfg: EnvConfig = EnvConfig()):
    vocab = Vocabulary(cfg.n_landmarks)
    kw = dict(n_nodes=cfg.n_nodes, area_side=cfg.area_side, connect_radius=cfg.connect_radius,
              n_landmarks=cfg.n_landmarks)
    train = [generate_scene(derive_seed(cfg.seed, "train-scene", i), scene_id=f"train-{i}", **kw)
             for i in range(cfg.n_train_scenes)]
    unseen = [generate_scene(derive_seed(cfg.seed, "unseen-scene", i), scene_id=f"unseen-{i}", **kw)
              for i in range(cfg.n_unseen_scenes)]
    per_seen = math.ceil(cfg.n_val_seen / len(train))
    per_unseen = math.ceil(cfg.n_val_unseen / len(unseen))
    seen = _split(train, per_seen, cfg, vocab, "val-seen")
    unseen_split = _split(unseen, per_unseen, cfg, vocab, "val-unseen")
    seen = Split(*(x[: cfg.n_val_seen] for x in (seen.scenes, seen.episodes, seen.obs_seeds)))
    unseen_split = Split(*(x[: cfg.n_val_unseen] for x in (unseen_split.scenes, unseen_split.episodes,
                                                            unseen_split.obs_seeds)))
    return Benchmark(cfg, vocab, train, unseen, _split(train, cfg.train_episodes_per_scene, cfg, vocab, "train"),
                     seen, unseen_split)


def evaluate_split(model, bench, split, driver=0, rng=None):
    cfg = bench.config
    res = evaluate(model, split.scenes, split.episodes, horizon=cfg.horizon, sigma=cfg.sigma,
                   obs_seeds=split.obs_seeds, driver=driver, rng=rng)
    return aggregate(res, cfg.success_distance)


# ------------------------------------------------------------------- stages

@dataclass
class StageConfig:
    stage: str = "S1"
    lr: float = 1e-3
    iterations: int = 3000
    val_interval: int = 250
    alpha: float = 0.5
    alpha_t: float = 0.2
    alpha_s: float = 0.5
    batch_size: int = 16
    seed: int = 0
    policy: str = "mixed"          # student | oracle | mixed
    warmup: int = 500              # oracle-forced iterations before the policy applies
    oracle_prob: float = 0.5       # per-step oracle probability under "mixed"
    weight_decay: float = 0.0
    beta: float = 0.7

    def __post_init__(self):
        if self.stage not in ("S1", "S2", "S3", "S4"):
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.policy not in ("student", "oracle", "mixed"):
            raise ContractError(f"unknown policy {self.policy!r}")


def check_stage_pair(s2: StageConfig, s3: StageConfig):
    if not s3.lr < s2.lr:
        warnings.warn(f"co-training lr {s3.lr} is not below distillation lr {s2.lr}", stacklevel=2)


@dataclass(frozen=True)
class ChainSpec:
    configs: tuple

    def __post_init__(self):
        hs = [c.hidden for c in self.configs]
        if not hs:
            raise ContractError("empty chain")
        if any(a <= b for a, b in zip(hs, hs[1:])):
            raise ContractError(f"chain hidden sizes must strictly decrease, got {hs}")


@contextmanager
def frozen(model):
    """Treat a model's parameters as constants for the duration."""
    params = model.parameters() if model is not None else []
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def episode_loss(learner, guide, adapters, scenes, episodes, obs_seeds, *, alpha, dcfg, lam, beta, driver,
                 horizon, sigma, trace=None, oracle_prob=0.0, rng=None):
    """Step-averaged ``alpha * KD + (1 - alpha) * CE`` over a batch, as a scalar.

    ``guide`` (may be None) is run on the learner's trajectory and read as a
    constant.  Per step and sample the KD term is
    ``sum_i lam_i * exp(-beta * U) * L_i`` with ``U`` the guide's cross-entropy
    on the oracle action.
    """
    use_kd = guide is not None and alpha > 0.0
    models = [learner, guide] if use_kd else [learner]
    b = len(episodes)
    terms = []
    steps = np.zeros(b)
    gen = rollout(models, scenes, episodes, driver=driver, horizon=horizon, sigma=sigma, obs_seeds=obs_seeds,
                  rng=rng, oracle_prob=oracle_prob)
    with frozen(guide if use_kd else None):
        for rec in gen:
            mk_s = rec.knowledge[0]
            ce = T.cross_entropy(mk_s.logits, rec.labels, mask=mk_s.action_mask, reduction="none")
            vec = ce if alpha == 0.0 else T.scale(ce, 1.0 - alpha)
            if use_kd:
                mk_t = rec.knowledge[1]
                losses = makd_losses(mk_t, mk_s, adapters, dcfg, step=rec.t)
                probs = np.where(mk_t.action_mask, mk_t.logits.data, -np.inf)
                probs = np.exp(probs - probs.max(axis=1, keepdims=True))
                probs /= probs.sum(axis=1, keepdims=True)
                gamma = transfer_weight(teacher_uncertainty(rec.labels, probs), beta)
                kd = combine_per_sample(losses.total, lam, gamma)
                vec = T.add(vec, T.scale(kd, alpha))
                if trace is not None:
                    trace.append({"t": rec.t, "episodes": rec.episode_index, "gamma": gamma,
                                  "losses": {a: v.data.copy() for a, v in losses.total.items()}})
            elif trace is not None:
                trace.append({"t": rec.t, "episodes": rec.episode_index})
            terms.append((rec.episode_index, vec))
            steps[rec.episode_index] += 1
    weights = 1.0 / (b * steps)
    total = None
    for idx, vec in terms:
        s = T.sum_(T.mul(vec, weights[idx]))
        total = s if total is None else T.add(total, s)
    return total


class TrainRun:
    """One model being optimised, optionally guided by a frozen partner.

    Tracks the best checkpoint by (unseen SR, unseen SPL); the tracked value
    never decreases within a run.
    """

    def __init__(self, learner, bench, stage: StageConfig, guide=None, dcfg=None, weighting=None,
                 adapters=None, alpha=None, tag="run", on_record=None):
        self.learner = learner
        self.guide = guide
        self.bench = bench
        self.stage = stage
        self.dcfg = dcfg or DistillConfig()
        self.weighting = weighting or WeightingStrategy("mkrw")
        self.alpha = stage.alpha if alpha is None else alpha
        if guide is None:
            self.alpha = 0.0
        self.tag = tag
        self.on_record = on_record
        if adapters is None and guide is not None:
            adapters = ProjectionAdapter(learner.config.hidden, guide.config.hidden,
                                         seed=derive_seed(stage.seed, tag, "adapter"))
        self.adapters = adapters
        params = {f"model.{n}": p for n, p in learner.named_parameters()}
        if adapters is not None and self.alpha > 0:
            params.update({f"adapter.{n}": p for n, p in adapters.named_parameters()})
        if self.weighting.variant == "learned" and self.alpha > 0:
            params["weighting.learned"] = self.weighting.learned
        self.opt = AdamW(params, lr=stage.lr, weight_decay=stage.weight_decay)
        self.rng = np.random.default_rng(derive_seed(stage.seed, tag, "batches"))
        self.iteration = 0
        self.best = (-1.0, -1.0, -1)
        self.best_params = None
        self.records = []
        self.losses = []
        self.grad_norms = None

    def _batch(self):
        split = self.bench.train
        idx = self.rng.choice(len(split.episodes), size=self.stage.batch_size, replace=False)
        obs = self.rng.integers(0, 2 ** 63 - 1, size=len(idx))
        return [split.scenes[i] for i in idx], [split.episodes[i] for i in idx], list(obs)

    def step(self):
        scenes, episodes, obs = self._batch()
        lam = self.weighting.weights(self.rng, self.grad_norms) if self.alpha > 0 else np.ones(5)
        oracle = self.stage.policy == "oracle" or self.iteration < self.stage.warmup
        mix = self.stage.oracle_prob if self.stage.policy == "mixed" else 0.0
        self.opt.zero_grad()
        with T.Tape():
            loss = episode_loss(self.learner, self.guide, self.adapters, scenes, episodes, obs,
                                alpha=self.alpha, dcfg=self.dcfg, lam=lam, beta=self.stage.beta,
                                driver="oracle" if oracle else 0, horizon=self.bench.config.horizon,
                                sigma=self.bench.config.sigma, oracle_prob=mix, rng=self.rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"{self.tag}: non-finite loss at iteration {self.iteration}")
            T.backward(loss)
        if self.weighting.variant == "gradadjust":
            self.grad_norms = [0.0 if p.grad is None else float(np.linalg.norm(p.grad)) for p in self.learner.last_layer_params().values()]
        self.opt.step()
        self.iteration += 1
        self.losses.append(value)
        return value

    def validate(self):
        out = {}
        for split_name, split in (("val_seen", self.bench.val_seen), ("val_unseen", self.bench.val_unseen)):
            m = evaluate_split(self.learner, self.bench, split)
            rec = {"split": split_name, "iteration": self.iteration, "sr": m.sr, "spl": m.spl, "ne": m.ne,
                   "osr": m.osr, "n_episodes": m.n_episodes, "seed": self.stage.seed, "run": self.tag}
            self.records.append(rec)
            if self.on_record:
                self.on_record(rec)
            out[split_name] = m
        key = (out["val_unseen"].sr, out["val_unseen"].spl)
        if key > self.best[:2]:
            self.best = key + (self.iteration,)
            self.best_params = {k: v.copy() for k, v in self.learner.state_dict().items()}
        return out

    def run(self, iterations=None):
        target = self.stage.iterations if iterations is None else iterations
        while self.iteration < target:
            self.step()
            if self.iteration % self.stage.val_interval == 0 or self.iteration == target:
                self.validate()
        return self

    def save(self, path):
        """Checkpoint everything needed to resume this run bit-for-bit."""
        arrays = {}
        if self.adapters is not None:
            arrays.update({f"adapter/{n}": p.data for n, p in self.adapters.named_parameters()})
        if self.weighting.learned is not None:
            arrays["weighting/learned"] = self.weighting.learned.data
        if self.best_params is not None:
            arrays.update({f"best/{k}": v for k, v in self.best_params.items()})
        extra = {"tag": self.tag, "best": list(self.best), "records": self.records, "losses": self.losses,
                 "grad_norms": self.grad_norms}
        return save_checkpoint(path, self.learner, self.opt, self.rng, self.iteration, arrays, extra)

    def load(self, path):
        ckpt = load_checkpoint(path)
        self.learner.load_state_dict(ckpt.model_arrays())
        if self.adapters is not None:
            for n, p in self.adapters.named_parameters():
                p.data[...] = ckpt.arrays[f"adapter/{n}"]
        if self.weighting.learned is not None and "weighting/learned" in ckpt.arrays:
            self.weighting.learned.data[...] = ckpt.arrays["weighting/learned"]
        restore_optimizer(ckpt, self.opt)
        self.rng.bit_generator.state = ckpt.rng_state
        self.iteration = ckpt.iteration
        extra = ckpt.extra
        self.best = tuple(extra["best"])
        self.records = list(extra["records"])
        self.losses = list(extra["losses"])
        self.grad_norms = extra["grad_norms"]
        best = ckpt.model_arrays("best/")
        self.best_params = best or None
        return self

    def restore_best(self):
        if self.best_params is not None:
            self.learner.load_state_dict(self.best_params)
        return self.learner


# ------------------------------------------------------------------ S1 - S4

def train_teacher(model, bench, stage: StageConfig, on_record=None, tag="S1"):
    run = TrainRun(model, bench, stage, tag=tag, on_record=on_record)
    run.run()
    run.restore_best()
    return model, run


def distill_student(teacher, student_config, bench, stage: StageConfig, dcfg=None, weighting=None,
                    on_record=None, tag="S2", student=None):
    if student is None:
        student = AgentModel(student_config, seed=derive_seed(stage.seed, tag, "init"))
    run = TrainRun(student, bench, stage, guide=teacher, dcfg=dcfg, weighting=weighting, alpha=stage.alpha,
                   tag=tag, on_record=on_record)
    before = copy.deepcopy(teacher.state_dict())
    run.run()
    run.restore_best()
    for k, v in teacher.state_dict().items():
        if not np.array_equal(v, before[k]):
            raise ContractError(f"teacher parameter {k} changed during distillation")
    return student, run


def cotrain(teacher, student, bench, stage: StageConfig, dcfg=None, weighting=None, on_record=None, tag="S3",
            feedback=True):
    """Alternate teacher-update and student-update batches.

    With ``feedback=False`` the teacher batches carry no distillation term
    (plain continued training), the ablation against co-training.
    """
    w_t = copy.deepcopy(weighting) if weighting is not None else None
    t_stage = StageConfig(**{**asdict(stage), "seed": derive_seed(stage.seed, "teacher-side")})
    s_stage = StageConfig(**{**asdict(stage), "seed": derive_seed(stage.seed, "student-side")})
    t_run = TrainRun(teacher, bench, t_stage, guide=student if feedback else None, dcfg=dcfg, weighting=w_t,
                     alpha=stage.alpha_t, tag=f"{tag}-teacher", on_record=on_record)
    s_run = TrainRun(student, bench, s_stage, guide=teacher, dcfg=dcfg, weighting=weighting,
                     alpha=stage.alpha_s, tag=f"{tag}-student", on_record=on_record)
    for run in (t_run, s_run):
        run.validate()
    while s_run.iteration < stage.iterations:
        t_run.step()
        s_run.step()
        it = s_run.iteration
        if it % stage.val_interval == 0 or it == stage.iterations:
            t_run.validate()
            s_run.validate()
    t_run.restore_best()
    s_run.restore_best()
    return teacher, student, (t_run, s_run)


@dataclass
class ChainStages:
    s1: StageConfig = field(default_factory=lambda: StageConfig("S1", iterations=5000))
    s2: StageConfig = field(default_factory=lambda: StageConfig("S2", iterations=5000))
    s3: StageConfig = field(default_factory=lambda: StageConfig("S3", lr=3e-4, iterations=1000, val_interval=125,
                                                                warmup=0))


def run_chain(chain: ChainSpec, bench, stages: ChainStages, dcfg=None, weighting_factory=None, seed=0,
              on_record=None, on_stage=None, head=None):
    """S1 on the head model, then S2 + S3 per link; the refined student teaches the next link.

    Returns the list of trained models (head first) and the per-stage runs.
    """
    weighting_factory = weighting_factory or (lambda: WeightingStrategy("mkrw"))
    check_stage_pair(stages.s2, stages.s3)
    runs = []
    if head is None:
        head = AgentModel(chain.configs[0], seed=derive_seed(seed, "chain", 0, "init"))
        s1 = StageConfig(**{**asdict(stages.s1), "seed": derive_seed(seed, "chain", 0, "S1")})
        head, run = train_teacher(head, bench, s1, on_record=on_record, tag="link0-S1")
        runs.append(run)
        if on_stage:
            on_stage("S1", 0, head)
    models = [head]
    teacher = head
    for k, cfg in enumerate(chain.configs[1:], start=1):
        s2 = StageConfig(**{**asdict(stages.s2), "seed": derive_seed(seed, "chain", k, "S2")})
        student, run = distill_student(teacher, cfg, bench, s2, dcfg, weighting_factory(), on_record,
                                       tag=f"link{k}-S2")
        runs.append(run)
        if on_stage:
            on_stage("S2", k, student)
        s3 = StageConfig(**{**asdict(stages.s3), "seed": derive_seed(seed, "chain", k, "S3")})
        teacher_ref, student, s3_runs = cotrain(teacher, student, bench, s3, dcfg, weighting_factory(), on_record,
                                                tag=f"link{k}-S3")
        runs.extend(s3_runs)
        if on_stage:
            on_stage("S3", k, student)
        models.append(student)
        teacher = student
    return models, runs
