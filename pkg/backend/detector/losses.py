"""
Training objectives.

Every function takes padded (B, L, ...) tensors together with a boolean
mask of real behaviors; plain (N, ...) inputs are treated as one sequence.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch

from .network import sphere_scores

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


def bce(probabilities, targets, eps=BCE_EPS):
    """Element-wise binary cross-entropy (natural log) on inputs clamped to [eps, 1 - eps]"""
    probabilities = probabilities.clamp(eps, 1.0 - eps)
    return -(targets * torch.log(probabilities) + (1.0 - targets) * torch.log1p(-probabilities))


def _batched(context, mask):
    if context.dim() == 2:
        context = context.unsqueeze(0)
        mask = None if mask is None else mask.reshape(1, -1)
    if mask is None:
        mask = torch.ones(context.shape[:2], dtype=torch.bool, device=context.device)
    lengths = mask.sum(dim=1)
    if (lengths == 0).any():
        raise ValueError("Empty sequence in loss input")
    return context, mask, lengths


def _sequence_mean(values, mask, lengths):
    """Mean over each sequence's behaviors, then over the batch"""
    per_sequence = (values * mask).sum(dim=1) / lengths
    return per_sequence.mean()


def multi_center_loss(context, prototypes, mask=None):
    """Mean squared distance of normal behaviors to their nearest center"""
    context, mask, lengths = _batched(context, mask)
    spheres = sphere_scores(context, prototypes, need_second=False)
    return _sequence_mean(spheres.dist_nearest.pow(2), mask, lengths)


def separation_probability(dist_nearest, dist_second):
    """exp(d2) / (exp(d1) + exp(d2)) evaluated after subtracting max(d1, d2)"""
    top = torch.maximum(dist_nearest, dist_second)
    near = torch.exp(dist_nearest - top)
    far = torch.exp(dist_second - top)
    return far / (near + far)


def separability_loss(context, prototypes, mask=None):
    context, mask, lengths = _batched(context, mask)
    if prototypes.size(0) < 2:
        raise ValueError("Separability needs at least two centers")
    spheres = sphere_scores(context, prototypes, need_second=True)
    probability = separation_probability(spheres.dist_nearest, spheres.dist_second)
    return _sequence_mean(bce(probability, torch.ones_like(probability)), mask, lengths)


def stage1_loss(context, prototypes, lambda_sep=0.5, mask=None):
    """L_cen + lambda_sep * L_sep; the separability term is dropped with a single center"""
    if lambda_sep < 0:
        raise ValueError("lambda_sep must be non-negative")
    center = multi_center_loss(context, prototypes, mask)
    if prototypes.size(0) < 2 or lambda_sep == 0:
        separation = torch.zeros_like(center)
    else:
        separation = separability_loss(context, prototypes, mask)
    total = center + lambda_sep * separation
    return total, {'center': center.detach(), 'separation': separation.detach()}


@dataclass(frozen=True)
class TopKRule:
    """
    How many of a bag's highest scores form its bag score.

    A fixed `k` (clamped to the bag length) takes precedence; otherwise
    K = max(1, floor(fraction * N)).
    """

    fraction: float = 0.05
    k: Optional[int] = None

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError("k must be at least 1")
        if self.k is None and not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")

    def size(self, length):
        if self.k is not None:
            return min(self.k, length)
        return max(1, math.floor(self.fraction * length + 1e-9))

    def sizes(self, lengths):
        return torch.tensor([self.size(int(n)) for n in lengths], device=lengths.device)


def bag_scores(fused, mask=None, rule=TopKRule()):
    """Mean of the K(S) highest fused scores of every sequence"""
    fused, mask, lengths = _batched(fused.unsqueeze(-1), mask)
    fused = fused.squeeze(-1)
    ranked, _ = torch.sort(fused.masked_fill(~mask, float('-inf')), dim=1, descending=True)
    k = rule.sizes(lengths)
    selected = torch.arange(ranked.size(1), device=ranked.device)[None, :] < k[:, None]
    return (ranked.masked_fill(~selected, 0.0)).sum(dim=1) / k


def mil_loss(fused, labels, mask=None, rule=TopKRule()):
    """Mean BCE between bag scores and weak labels"""
    scores = bag_scores(fused, mask, rule)
    return bce(scores, labels.to(scores.dtype)).mean()


def _masked_mean(values, selected):
    count = selected.sum()
    if count == 0:
        return values.sum() * 0.0
    return (values * selected).sum() / count


def high_conf_loss(scores, mc_means, tau_a, selected):
    """BCE against hard pseudo labels 1[mc_mean > tau_a] over the high-confidence set"""
    if not selected.any():
        logger.warning("Empty high-confidence set; its loss contributes 0")
    targets = (mc_means > tau_a).to(scores.dtype)
    return _masked_mean(bce(scores, targets), selected)


def mid_conf_loss(scores, mc_means, teacher_scores, tau_c, lambda_pse, selected):
    """
    lambda_pse * hard + (1 - lambda_pse) * soft over the mid-confidence set.

    Hard targets exist only outside the dead band [1 - tau_c, tau_c]; inside
    it a behavior contributes its soft term alone.
    """
    if not 0.5 <= tau_c < 1.0:
        raise ValueError(f"tau_c must lie in [0.5, 1), got {tau_c}")
    if not 0.0 <= lambda_pse <= 1.0:
        raise ValueError(f"lambda_pse must lie in [0, 1], got {lambda_pse}")
    confident = (mc_means > tau_c) | (mc_means < 1.0 - tau_c)
    hard = bce(scores, (mc_means > tau_c).to(scores.dtype)) * confident
    soft = bce(scores, teacher_scores.detach())
    return _masked_mean(lambda_pse * hard + (1.0 - lambda_pse) * soft, selected)
