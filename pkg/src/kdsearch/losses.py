"""Distillation and task losses.

Every loss takes the student side as a :class:`~kdsearch.autograd.Tensor`
(or a plain array) and the teacher side as plain arrays, so gradients only
ever reach the student. Teacher inputs that arrive as tensors are detached.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .types import LossConfig

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
TERMS = ("l_det", "l_reid", "l_p", "l_pr", "l_tr")


class DimensionError(ValueError):
    pass


def _teacher(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _check_pair(student, teacher, min_batch=1):
    s, t = ag.as_tensor(student), _teacher(teacher)
    if s.ndim != 2 or t.ndim != 2:
        raise DimensionError(f"expected (B, C) batches, got {s.shape} and {t.shape}")
    if s.shape != t.shape:
        raise DimensionError(f"student {s.shape} and teacher {t.shape} shapes differ")
    if s.shape[0] < min_batch:
        raise ValueError(f"need a batch of at least {min_batch}, got {s.shape[0]}")
    return s, t


def _kl_rows(student: Tensor, teacher: np.ndarray) -> Tensor:
    """Per-row KL(student || teacher) with the teacher clamped away from 0."""
    low = teacher <= PROB_FLOOR
    if np.any(low):
        log.debug("prob_kd: %d teacher probabilities clamped to %g", int(low.sum()), PROB_FLOOR)
        teacher = np.maximum(teacher, PROB_FLOOR)
    # 0 * log 0 contributes nothing
    s_safe = ag.Tensor(np.where(student.data > 0, 0.0, 1.0)) + student
    return (student * (ag.log(s_safe) - np.log(teacher))).sum(axis=1)


def prob_kd(student, teacher) -> Tensor:
    """Batch-mean KL(student || teacher) over class distributions."""
    s, t = _check_pair(student, teacher)
    return _kl_rows(s, t).mean()


def prob_kd_fsa(student, student_shifted, teacher, teacher_shifted) -> Tensor:
    """Probability KD over both the plain and the spatially shifted views."""
    s, t = _check_pair(student, teacher)
    ss, ts = _check_pair(student_shifted, teacher_shifted)
    if s.shape != ss.shape:
        raise DimensionError("shifted and unshifted batches differ in shape")
    return (_kl_rows(s, t) + _kl_rows(ss, ts)).mean()


def similarity_matrix(feats) -> Tensor:
    f = ag.as_tensor(feats)
    return ag.normalize_rows(f @ f.T)


def pairwise_relation_kd(student, teacher) -> Tensor:
    s, t = _check_pair(student, teacher, min_batch=2)
    b = s.shape[0]
    sim_t = similarity_matrix(t).data
    diff = similarity_matrix(s) - sim_t
    return (diff * diff).sum() * (1.0 / (b * b))


def hardest_negatives(student: np.ndarray, teacher: np.ndarray) -> np.ndarray:
    """Index of the closest teacher row j != i for each student row i (lowest j on ties)."""
    d = np.sqrt(((student[:, None, :] - teacher[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return np.argmin(d, axis=1)


def triplet_relation_kd(student, teacher, margin: float, normalize: bool = False) -> Tensor:
    s, t = _check_pair(student, teacher, min_batch=2)
    if normalize:
        s = ag.normalize_rows(s)
        t = ag.normalize_rows(t).data
    b = s.shape[0]
    neg = hardest_negatives(s.data, t)
    d_pos = ag.norm(s - t, axis=1)
    d_neg = ag.norm(s - t[neg], axis=1)
    return ag.relu(d_pos - d_neg + margin).sum() * (1.0 / b)


def reid_ce(logits, labels) -> Tensor:
    z = ag.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"logits {z.shape} do not match labels {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ValueError(f"label out of range for {z.shape[1]} classes")
    lp = ag.log_softmax(z, axis=1)
    return -lp[np.arange(len(labels)), labels].mean()


@dataclass(frozen=True)
class LossBreakdown:
    l_det: float
    l_reid: float
    l_p: float
    l_pr: float
    l_tr: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def weighted_total(parts: Mapping, cfg: LossConfig):
    """Combine the five terms; works on floats and on tensors alike."""
    return parts["l_det"] + cfg.lam * (
        parts["l_reid"]
        + cfg.beta_p * parts["l_p"]
        + cfg.beta_pr * parts["l_pr"]
        + cfg.beta_tr * parts["l_tr"]
    )


def total_loss(parts: Mapping, cfg: LossConfig) -> LossBreakdown:
    vals = {}
    for name in TERMS:
        v = parts.get(name, 0.0)
        v = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise ValueError(f"loss term {name} is not finite ({v})")
        vals[name] = v
    return LossBreakdown(total=weighted_total(vals, cfg), **vals)
