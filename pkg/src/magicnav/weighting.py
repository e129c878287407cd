"""Ability-level and sample-level weights for the distillation losses.

MKRW draws a fresh softmax-normalised Gaussian weight vector every optimizer
step; MKTD scales each sample by how well the teacher predicted it.  The
other strategies are the baselines used to compare against MKRW.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

N_ABILITIES = 5
PROB_FLOOR = 1e-12
STRATEGIES = ("mkrw", "equal", "learned", "gradadjust")


@dataclass
class WeightingStrategy:
    variant: str = "mkrw"
    K: float = 5.0
    tau: float = 4.0
    M: int = N_ABILITIES
    learned: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in STRATEGIES:
            raise ContractError(f"unknown weighting {self.variant!r}; choose from {STRATEGIES}")
        if self.variant == "mkrw" and (self.K <= 0 or self.tau <= 0):
            raise ContractError(f"MKRW needs K > 0 and tau > 0 (got K={self.K}, tau={self.tau})")
        if self.variant == "learned" and self.learned is None:
            self.learned = Tensor(np.zeros(self.M), requires_grad=True, name="ability_weights")

    def weights(self, rng=None, grad_norms=None):
        if self.variant == "mkrw":
            return sample_mkrw(rng, self.M, self.K, self.tau)
        if self.variant == "gradadjust" and grad_norms is None:
            return np.ones(self.M)  # no previous iteration to measure yet
        return baseline_weights(self, grad_norms)


def sample_mkrw(rng, M=N_ABILITIES, K=5.0, tau=4.0):
    """``K * softmax(z / tau)`` with ``z`` i.i.d. standard normal."""
    if M < 1:
        raise ContractError("M must be >= 1")
    z = rng.standard_normal(M) / tau
    e = np.exp(z - z.max())
    return K * e / e.sum()


def teacher_uncertainty(target, teacher_probs):
    """Cross-entropy of the teacher against the ground-truth action.

    ``target`` may be one-hot rows or integer indices; probabilities are
    clamped at 1e-12 before the log.
    """
    p = np.asarray(teacher_probs, dtype=np.float64)
    target = np.asarray(target)
    if target.ndim == p.ndim:
        pt = (p * target).sum(axis=-1)
    else:
        pt = np.take_along_axis(p, target[..., None].astype(np.int64), axis=-1)[..., 0]
    return -np.log(np.maximum(pt, PROB_FLOOR))


def transfer_weight(uncertainty, beta):
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    u = np.asarray(uncertainty, dtype=np.float64)
    if np.any(u < 0):
        raise ContractError("uncertainty must be non-negative")
    return np.exp(-beta * u)


def _softplus(x):
    return T.log(T.add(T.exp(x), 1.0))


def baseline_weights(strategy, grad_norms=None):
    """EqualAdd, LearnedWeights or GradAdjust weights (length M).

    LearnedWeights returns a differentiable Tensor; the others plain arrays.
    """
    M = strategy.M
    if strategy.variant == "equal":
        return np.ones(M)
    if strategy.variant == "learned":
        return _softplus(strategy.learned)
    if strategy.variant == "gradadjust":
        if grad_norms is None:
            raise ContractError("GradAdjust needs last-layer gradient norms")
        inv = 1.0 / (np.asarray(grad_norms, dtype=np.float64) + 1e-8)
        return M * inv / inv.sum()
    raise ContractError(f"{strategy.variant!r} has no baseline weights")


def combine_per_sample(ability_losses, lam, gamma):
    """Per-sample ``sum_i lam_i * gamma_n * L_i(n)``.

    ``ability_losses`` is either a sequence aligned with ``lam`` or a mapping
    from ability name to a per-sample loss Tensor (B,), with ``lam`` in
    :data:`magicnav.model.ABILITIES` order.  ``lam`` and ``gamma`` are constants
    unless ``lam`` is itself a Tensor (LearnedWeights).
    """
    from .model import ABILITIES

    n_lam = len(lam.data if isinstance(lam, Tensor) else lam)
    if isinstance(ability_losses, dict):
        if n_lam != len(ABILITIES):
            raise ContractError(f"need {len(ABILITIES)} ability weights, got {n_lam}")
        items = [(ABILITIES.index(a), ability_losses[a]) for a in ABILITIES if a in ability_losses]
    else:
        if len(ability_losses) != n_lam:
            raise ContractError(f"{len(ability_losses)} ability losses but {n_lam} weights")
        items = list(enumerate(ability_losses))
    gamma = np.asarray(gamma, dtype=np.float64)
    total = None
    for i, loss in items:
        loss = T.as_tensor(loss)
        if loss.shape != gamma.shape:
            raise ContractError(f"ability {i}: loss batch {loss.shape} vs sample weights {gamma.shape}")
        w = lam[i] if isinstance(lam, Tensor) else float(lam[i])
        term = T.mul(T.mul(loss, gamma), w)
        total = term if total is None else T.add(total, term)
    if total is None:
        return Tensor(np.zeros_like(gamma))
    return total


def combine(ability_losses, lam, gamma):
    """Batch mean of :func:`combine_per_sample`."""
    return T.mean(combine_per_sample(ability_losses, lam, gamma))
