"""Losses for parallel multi-resolution training with ensemble distillation.

Every function works on plain tensors (any float dtype) and keeps the
autograd graph, so the trainer can backpropagate one summed objective.
Gradient masking is built in: the ensemble loss sees the branch logits as
constants, and every distillation teacher is detached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12

DISTILL_VARIANTS = ("full", "vanilla", "no-ensemble-teacher", "highest-only")


class NonFiniteLoss(ValueError):
    pass


def _check_finite(t, what):
    if not torch.isfinite(t).all():
        raise NonFiniteLoss(f"{what} contains non-finite values")


def _check_probs(p, what):
    _check_finite(p, what)
    tol = max(1e-6, math.sqrt(torch.finfo(p.dtype).eps))
    if (p < 0).any() or ((p.sum(dim=-1) - 1).abs() > tol).any():
        raise ValueError(f"{what} rows are not probability distributions")


def softmax_probs(logits):
    _check_finite(logits, "logits")
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def cross_entropy(logits, labels):
    """Batch mean of ``-log p(y | z)``."""
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ValueError(f"labels must lie in [0, {logits.shape[-1] - 1}]")
    return F.nll_loss(F.log_softmax(logits, dim=-1), labels)


def classification_loss(logits: Sequence[torch.Tensor], labels):
    """Sum over resolutions of the per-resolution cross entropy."""
    if len(logits) == 0:
        raise ValueError("need at least one resolution")
    return sum(cross_entropy(z, labels) for z in logits)


def ensemble_logit(alpha, logits: Sequence[torch.Tensor]):
    if len(logits) != alpha.shape[0]:
        raise ValueError(f"{alpha.shape[0]} ensemble weights for {len(logits)} logit matrices")
    shape = logits[0].shape
    if any(z.shape != shape for z in logits):
        raise ValueError("logit matrices must share one shape")
    return sum(a * z for a, z in zip(alpha, logits))


def ensemble_loss(raw_scores, logits: Sequence[torch.Tensor], labels):
    """Cross entropy of the alpha-weighted logit ensemble.

    The logits enter as constants; only ``raw_scores`` receives gradient.
    """
    alpha = torch.softmax(raw_scores, dim=0)
    z0 = ensemble_logit(alpha, [z.detach() for z in logits])
    return cross_entropy(z0, labels)


def kl_divergence(p_teacher, p_student):
    """Batch mean of ``sum_c p_t log(p_t / p_s)``; the teacher is detached."""
    _check_probs(p_teacher, "teacher")
    _check_probs(p_student, "student")
    p_t = p_teacher.detach()
    log_ratio = p_t.clamp_min(PROB_FLOOR).log() - p_student.clamp_min(PROB_FLOOR).log()
    return (p_t * log_ratio).sum(dim=-1).mean()


def distillation_pairs(variant: str, num_branches: int) -> Tuple[List[Tuple[int, int]], float]:
    """(teacher, student) index pairs and the scale factor for a variant.

    Index 0 is the ensemble prediction, 1..S the branches, largest
    resolution first.  Each variant is rescaled so the loss spans S
    KL-terms' worth, which makes ``full`` come out at ``2 / (S + 1)`` and
    ``vanilla`` at 1.
    """
    S = num_branches
    if variant == "full":
        pairs = [(t, s) for t in range(S) for s in range(t + 1, S + 1)]
    elif variant == "vanilla":
        pairs = [(0, s) for s in range(1, S + 1)]
    elif variant == "no-ensemble-teacher":
        pairs = [(t, s) for t in range(1, S) for s in range(t + 1, S + 1)]
    elif variant == "highest-only":
        pairs = [(1, s) for s in range(2, S + 1)]
    else:
        raise ValueError(f"unknown distillation variant {variant!r}; choose from {DISTILL_VARIANTS}")
    scale = S / len(pairs) if pairs else 0.0
    return pairs, scale


def distillation_loss(variant: str, p0, preds: Sequence[torch.Tensor]):
    pairs, scale = distillation_pairs(variant, len(preds))
    everything = [p0] + list(preds)
    if not pairs:
        return p0.new_zeros(())
    return scale * sum(kl_divergence(everything[t], everything[s]) for t, s in pairs)


def distillation_loss_vanilla(p0, preds: Sequence[torch.Tensor]):
    return distillation_loss("vanilla", p0, preds)


def distillation_loss_full(p0, preds: Sequence[torch.Tensor]):
    return distillation_loss("full", p0, preds)


Number = Union[float, torch.Tensor]


@dataclass
class LossBreakdown:
    l_cls: Number
    l_ens: Number
    l_dis: Number
    total: Number

    def to_floats(self) -> "LossBreakdown":
        f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)  # noqa: E731
        return LossBreakdown(f(self.l_cls), f(self.l_ens), f(self.l_dis), f(self.total))


def total_loss(l_cls: Number, l_ens: Number, l_dis: Number) -> LossBreakdown:
    for name, v in (("l_cls", l_cls), ("l_ens", l_ens), ("l_dis", l_dis)):
        finite = torch.isfinite(v).all() if torch.is_tensor(v) else math.isfinite(v)
        if not finite:
            raise NonFiniteLoss(f"{name} is not finite")
    return LossBreakdown(l_cls, l_ens, l_dis, l_cls + l_ens + l_dis)
