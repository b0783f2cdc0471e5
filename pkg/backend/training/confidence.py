"""
MC-dropout confidence estimation, the adaptive threshold and the EMA teacher.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch

TAU_C_MIN = 0.5
TAU_C_MAX = 1.0 - 1e-6


def mc_statistics(samples):
    """Mean and unbiased variance over the leading (pass) dimension"""
    samples = torch.as_tensor(samples)
    if samples.size(0) < 2:
        raise ValueError("MC statistics need at least two passes")
    return samples.mean(dim=0), samples.var(dim=0, correction=1)


def mc_estimate(model, codes, lengths, passes):
    """Per-behavior mean and variance of the fused score over `passes` dropout-active forward passes"""
    if passes < 2:
        raise ValueError("MC estimation needs at least two passes")
    was_training = model.training
    model.train()
    try:
        with torch.no_grad():
            samples = torch.stack([model(codes, lengths).fused for _ in range(passes)])
    finally:
        model.train(was_training)
    return mc_statistics(samples)


@dataclass
class ConfidencePartition:
    """Zero-based behavior indices of one anomalous sequence, split by MC variance"""

    high: np.ndarray
    mid: np.ndarray
    low: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def masks(self):
        n = self.variances.size
        high, mid = np.zeros(n, dtype=bool), np.zeros(n, dtype=bool)
        high[self.high] = True
        mid[self.mid] = True
        return high, mid


def partition_confidence(variances, r_hi, r_mid, means=None) -> ConfidencePartition:
    """
    Smallest-variance floor(r_hi * N) behaviors are high confidence, the next
    floor(r_mid * N) are mid confidence and the rest low. Ties go to the lower
    index. A positive r_hi always yields at least one high-confidence behavior.
    """
    variances = np.asarray(variances, dtype=np.float64).ravel()
    n = variances.size
    if n == 0:
        raise ValueError("Cannot partition an empty sequence")
    if r_hi < 0 or r_mid < 0 or r_hi + r_mid > 1.0 + 1e-12:
        raise ValueError(f"Invalid ratios r_hi={r_hi} r_mid={r_mid}")
    n_hi = math.floor(r_hi * n + 1e-9)
    if n_hi == 0 and r_hi > 0:
        n_hi = 1
    n_mid = min(math.floor(r_mid * n + 1e-9), n - n_hi)
    order = np.argsort(variances, kind='stable')
    return ConfidencePartition(
        high=np.sort(order[:n_hi]),
        mid=np.sort(order[n_hi:n_hi + n_mid]),
        low=np.sort(order[n_hi + n_mid:]),
        means=np.zeros(n) if means is None else np.asarray(means, dtype=np.float64).ravel(),
        variances=variances,
    )


def update_tau_c(tau_prev, variances, beta_c):
    """
    tau_c <- beta_c * tau_prev + (1 - beta_c) * mean(maxNorm(1 / var)).

    Zero-variance behaviors count as confidence 1.0. The result is clamped to
    [0.5, 1).
    """
    variances = np.asarray(variances, dtype=np.float64).ravel()
    if variances.size == 0:
        return tau_prev
    confidence = np.ones_like(variances)
    positive = variances > 0
    if positive.any():
        inverse = 1.0 / variances[positive]
        confidence[positive] = inverse / inverse.max()
    tau = beta_c * tau_prev + (1.0 - beta_c) * float(confidence.mean())
    return float(min(max(tau, TAU_C_MIN), TAU_C_MAX))


def update_ema(teacher, student, beta_ema):
    """In-place teacher <- beta * teacher + (1 - beta) * student; buffers are copied"""
    if not 0.0 <= beta_ema <= 1.0:
        raise ValueError(f"beta_ema must lie in [0, 1], got {beta_ema}")
    student_params = dict(student.named_parameters())
    with torch.no_grad():
        for name, param in teacher.named_parameters():
            source = student_params.get(name)
            if source is None or source.shape != param.shape:
                raise ValueError(f"Teacher and student disagree on parameter '{name}'")
            param.mul_(beta_ema).add_(source.detach(), alpha=1.0 - beta_ema)
        student_buffers = dict(student.named_buffers())
        for name, buffer in teacher.named_buffers():
            buffer.copy_(student_buffers[name])
    return teacher
