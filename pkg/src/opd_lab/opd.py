"""Union top-k support and the temperature-scaled forward KL objective.

Per position, with p = softmax(z / tau) over the union support only:

    loss_t = tau^2 * sum_i pT_i (log pT_i - log pS_i)
    d loss_t / d zS_i = tau * (pS_i - pT_i)

The batch loss is the mean of loss_t over positions whose support holds at
least ``min_support`` ids.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import log_softmax
from .teacher import TeacherPosition, score_extra
from .tokenizers import TokenizerSpec, TokenMap

MIN_SUPPORT = 2


@dataclass(frozen=True)
class OpdConfig:
    k_teacher: int = 8
    k_student: int = 8
    tau: float = 1.0
    min_support: int = MIN_SUPPORT
    fallback_enabled: bool = True
    # Score the state after the last emitted token, with eos allowed in its
    # support. Without it nothing in the objective teaches the student to stop.
    stop_supervision: bool = True

    def __post_init__(self):
        if self.k_teacher < 1 or self.k_student < 1:
            raise ValueError("k_teacher and k_student must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.min_support != MIN_SUPPORT:
            raise ValueError(f"min_support is fixed at {MIN_SUPPORT}")


@dataclass(frozen=True)
class UnionSupport:
    position: int
    ids: np.ndarray
    z_T: np.ndarray
    z_S: np.ndarray

    @property
    def valid(self) -> bool:
        return len(self.ids) >= MIN_SUPPORT

    @property
    def size(self) -> int:
        return len(self.ids)


def build_union(
    teacher: TeacherPosition,
    student_topk: Sequence[int],
    student_logits: np.ndarray,
    spec: TokenizerSpec,
    token_map: TokenMap,
    position: int = 0,
) -> UnionSupport:
    """Union of the teacher's mapped top-k and the student's rollout top-k.

    Ids are sorted ascending. Teacher-supported ids take the teacher's top-k
    log-probs; student-only ids are scored from the teacher logits row.
    """
    t_scores = dict(teacher.topk)
    s_ids = {
        int(i) for i in student_topk
        if not spec.special_mask[int(i)] or (teacher.allow_stop and int(i) == spec.eos_id)
    }
    ids = sorted(set(t_scores) | s_ids)
    extra = score_extra(teacher.logits, [i for i in ids if i not in t_scores], token_map)
    z_T = np.array([t_scores[i] if i in t_scores else extra[i] for i in ids], dtype=np.float64)
    ids = np.array(ids, dtype=np.int64)
    z_S = np.asarray(student_logits, dtype=np.float64)[ids]
    return UnionSupport(position, ids, z_T, z_S)


def _check(support: UnionSupport):
    if not support.valid:
        raise ValueError(f"support at position {support.position} has {support.size} ids; need >= {MIN_SUPPORT}")


def kl_loss(support: UnionSupport, tau: float) -> float:
    _check(support)
    log_pT = log_softmax(support.z_T / tau)
    log_pS = log_softmax(support.z_S / tau)
    kl = float(np.sum(np.exp(log_pT) * (log_pT - log_pS)))
    return tau * tau * max(kl, 0.0)


def kl_grad(support: UnionSupport, tau: float) -> np.ndarray:
    _check(support)
    pT = np.exp(log_softmax(support.z_T / tau))
    pS = np.exp(log_softmax(support.z_S / tau))
    return tau * (pS - pT)


@dataclass(frozen=True)
class BatchLoss:
    loss: float
    per_position: tuple[float, ...]
    n_valid: int
    no_valid_positions: bool


def batch_opd_loss(supports: Sequence[UnionSupport], tau: float) -> BatchLoss:
    """Mean over valid supports, reduced in the given order."""
    vals = tuple(kl_loss(s, tau) for s in supports if s.valid)
    if not vals:
        return BatchLoss(0.0, (), 0, True)
    return BatchLoss(float(np.mean(vals)), vals, len(vals), False)
