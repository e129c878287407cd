"""Per-ability transfer losses between a teacher and a student.

Abilities v, t, l, g transfer final-layer attention maps and pooled features;
the decision ability b transfers temperature-softened logits.  Teacher
tensors are always read as constants here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ABILITIES
from .nn import Linear, Module
from .tensor import ContractError, Tensor

FEATURE_ABILITIES = ("v", "t", "l", "g")


@dataclass
class DistillConfig:
    alpha: float = 0.5
    tau_logit: float = 2.0
    abilities: dict = field(default_factory=lambda: {a: True for a in ABILITIES})
    kinds: dict = field(default_factory=lambda: {"attention": True, "feature": True, "logit": True})

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau_logit <= 0:
            raise ContractError(f"tau_logit must be positive, got {self.tau_logit}")
        unknown = set(self.abilities) - set(ABILITIES)
        if unknown:
            raise ContractError(f"unknown abilities {sorted(unknown)}")
        self.abilities = {a: bool(self.abilities.get(a, True)) for a in ABILITIES}
        self.kinds = {k: bool(self.kinds.get(k, True)) for k in ("attention", "feature", "logit")}


class ProjectionAdapter(Module):
    """Maps student features (d_s) into the teacher's space (d_t), one per ability."""

    def __init__(self, d_student, d_teacher, seed=0):
        rng = np.random.default_rng(seed)
        self.dims = (d_student, d_teacher)
        self.maps = {}
        for a in FEATURE_ABILITIES:
            lin = Linear(rng, d_student, d_teacher)
            if d_student == d_teacher:
                lin.weight.data[...] = np.eye(d_student)
            setattr(self, f"map_{a}", lin)
            self.maps[a] = lin

    def __call__(self, ability, x):
        return self.maps[ability](x)

    def check(self, d_student, d_teacher):
        if (d_student, d_teacher) != self.dims:
            raise ContractError(f"adapter built for {self.dims}, used with {(d_student, d_teacher)}")


@dataclass
class AbilityLossSet:
    """Per-sample (B,) losses per ability, with their attention/feature parts."""

    total: dict
    parts: dict

    def scalar(self, ability):
        return float(T.mean(self.total[ability]).data)


def _const(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def attn_transfer_loss(teacher_attn, student_attn, mask=None, ability="?", step="?", reduction="none"):
    """Mean squared difference of attention maps over heads and valid entries."""
    t = _const(teacher_attn)
    student_attn = T.as_tensor(student_attn)
    if t.shape != student_attn.shape:
        raise ContractError(f"attention shapes differ for ability {ability} at step {step}: "
                            f"{t.shape} vs {student_attn.shape}")
    if student_attn.ndim < 2:
        d = T.sub(student_attn, t)
        return T.mean(T.mul(d, d))
    if mask is None:
        mask = np.ones(t.shape, bool)
    m = np.broadcast_to(np.asarray(mask, bool), t.shape).astype(np.float64)
    count = m.reshape(m.shape[0], -1).sum(axis=1)
    d = T.sub(student_attn, t)
    w = m / np.maximum(count, 1.0).reshape((-1,) + (1,) * (m.ndim - 1))
    per = T.sum_(T.reshape(T.mul(T.mul(d, d), w), (t.shape[0], -1)), axis=1)
    return per if reduction == "none" else T.mean(per)


def feat_transfer_loss(teacher_feat, student_feat, adapter=None, ability="v", reduction="none"):
    """Mean squared error between teacher features and adapted student features."""
    t = _const(teacher_feat)
    student_feat = T.as_tensor(student_feat)
    d_s, d_t = student_feat.shape[-1], t.shape[-1]
    if adapter is None:
        if d_s != d_t:
            raise ContractError(f"ability {ability}: student dim {d_s} != teacher dim {d_t} and no adapter")
        proj = student_feat
    else:
        adapter.check(d_s, d_t)
        proj = adapter(ability, student_feat)
    d = T.sub(t, proj)
    sq = T.mul(d, d)
    if sq.ndim == 1:
        return T.mean(sq)
    per = T.mean(sq, axis=tuple(range(1, sq.ndim)))
    return per if reduction == "none" else T.mean(per)


def logit_transfer_loss(teacher_logits, student_logits, tau_logit=2.0, mask=None, reduction="none"):
    t = _const(teacher_logits)
    student_logits = T.as_tensor(student_logits)
    if t.shape != student_logits.shape:
        raise ContractError(f"mirroring contract violated: action sets {t.shape} vs {student_logits.shape}")
    if mask is not None:
        t = np.where(mask, t, 0.0)
        student_logits = T.masked_fill(student_logits, ~np.asarray(mask, bool), 0.0)
    return T.kl_temperature(student_logits, t, tau_logit, mask=mask, reduction=reduction)


def makd_losses(teacher_mk, student_mk, adapters, config: DistillConfig, step="?"):
    """All per-ability transfer losses for one mirrored step."""
    if teacher_mk.action_mask is not None and student_mk.action_mask is not None:
        if not np.array_equal(teacher_mk.action_mask, student_mk.action_mask):
            raise ContractError(f"mirroring contract violated at step {step}: action masks differ")
    b = student_mk.logits.shape[0]
    zero = Tensor(np.zeros(b))
    total, parts = {}, {}
    for a in FEATURE_ABILITIES:
        if not config.abilities[a]:
            total[a] = zero
            parts[a] = {"attention": zero, "feature": zero}
            continue
        pa = zero
        if config.kinds["attention"]:
            pa = attn_transfer_loss(teacher_mk.attn[a], student_mk.attn[a], teacher_mk.attn_mask[a], a, step)
        pf = zero
        if config.kinds["feature"]:
            pf = feat_transfer_loss(teacher_mk.feat[a], student_mk.feat[a], adapters, a)
        parts[a] = {"attention": pa, "feature": pf}
        total[a] = T.add(pa, pf)
    if config.abilities["b"] and config.kinds["logit"]:
        total["b"] = logit_transfer_loss(teacher_mk.logits, student_mk.logits, config.tau_logit,
                                         student_mk.action_mask)
    else:
        total["b"] = zero
    parts["b"] = {"logit": total["b"]}
    return AbilityLossSet(total, parts)


def total_student_loss(kd_loss, ce_loss, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    return T.add(T.scale(kd_loss, alpha), T.scale(ce_loss, 1.0 - alpha))
