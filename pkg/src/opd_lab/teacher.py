"""Frozen-teacher scoring of student transcripts.

The student text is re-encoded with the teacher tokenizer, scored under
teacher forcing, aligned back to student positions by character span, and
reduced to mapped top-k supports over student ids.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import ModelParams, char_offsets, forward_logits, log_softmax
from .rollout import topk_sorted
from .tokenizers import TokenizerError, TokenizerSpec, TokenMap, encode

FLOOR_EPS = 1e-8
FLOOR_LOGPROB = math.log(FLOOR_EPS)


@dataclass(frozen=True)
class TeacherForced:
    ids: Optional[tuple[int, ...]]  # None when the text is not encodable
    logits: np.ndarray  # [len(ids), V_teacher]
    alignment_offset: int  # prompt tokens ahead of the first scored position

    @property
    def ok(self) -> bool:
        return self.ids is not None


def teacher_force(params: ModelParams, frames: np.ndarray, text: str, spec: TokenizerSpec, fpt: int, stop: bool = False) -> TeacherForced:
    """Teacher logits at each teacher-token position of ``text``.

    With ``stop`` one more row is scored: the state after the last token,
    where the stop token is predicted.
    """
    try:
        ids = encode(spec, text)
    except TokenizerError:
        return TeacherForced(None, np.zeros((0, params.vocab_size)), 1)
    targets = ids + [spec.eos_id] if stop else ids
    logits = forward_logits(params, frames, targets, spec, fpt) if targets else np.zeros((0, params.vocab_size))
    return TeacherForced(tuple(ids), logits, 1)


@dataclass(frozen=True)
class Alignment:
    index: np.ndarray  # teacher position per student position, -1 if none
    mismatched: np.ndarray  # bool per student position

    @property
    def mismatch_rate(self) -> Optional[float]:
        if len(self.mismatched) == 0:
            return None
        return float(self.mismatched.mean())


def align_positions(
    student_ids: Sequence[int],
    teacher_ids: Optional[Sequence[int]],
    student_spec: TokenizerSpec,
    teacher_spec: TokenizerSpec,
) -> Alignment:
    """Match student positions to teacher positions by character span.

    A student position is aligned only when one teacher token covers exactly
    the same span; otherwise it points at the teacher token containing its
    first character and is flagged.
    """
    n = len(student_ids)
    if teacher_ids is None:
        return Alignment(np.full(n, -1, np.int64), np.ones(n, bool))
    s_off = char_offsets(student_spec, student_ids)
    t_off = char_offsets(teacher_spec, teacher_ids)
    index = np.full(n, -1, np.int64)
    mismatched = np.ones(n, bool)
    j = 0
    for i in range(n):
        start, end = s_off[i], s_off[i + 1]
        while j + 1 < len(t_off) - 1 and t_off[j + 1] <= start:
            j += 1
        if j < len(teacher_ids) and t_off[j] <= start < t_off[j + 1]:
            index[i] = j
            mismatched[i] = not (t_off[j] == start and t_off[j + 1] == end)
    return Alignment(index, mismatched)


def extract_support(
    logits: np.ndarray,
    token_map: TokenMap,
    k_teacher: int,
    student_spec: TokenizerSpec,
    allow_stop: bool = False,
) -> tuple[list[tuple[int, float]], int]:
    """Teacher top-k mapped to student ids, with full-vocab log-probs.

    Returns (entries, dropped). Unmapped, special and blocked ids are dropped;
    eos survives only when ``allow_stop`` (the stop position).
    """
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    out: list[tuple[int, float]] = []
    dropped = 0
    for tid in topk_sorted(logits, k_teacher):
        tid = int(tid)
        if tid == token_map.teacher_eos and allow_stop:
            sid = token_map.student_eos
        else:
            sid = int(token_map.to_student[tid])
        if sid < 0 or (student_spec.special_mask[sid] and not (allow_stop and sid == student_spec.eos_id)):
            dropped += 1
            continue
        out.append((sid, float(logp[tid])))
    return out, dropped


def score_extra(
    logits: np.ndarray,
    requested: Sequence[int],
    token_map: TokenMap,
    floor: float = FLOOR_LOGPROB,
) -> dict[int, float]:
    """Teacher log-probs for student ids; ids without a teacher counterpart get ``floor``."""
    if len(requested) == 0:
        return {}
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    out = {}
    for sid in requested:
        tid = int(token_map.to_teacher[int(sid)])
        out[int(sid)] = float(logp[tid]) if tid >= 0 else floor
    return out


@dataclass(frozen=True)
class TeacherPosition:
    topk: tuple[tuple[int, float], ...]
    logits: np.ndarray  # teacher logits row over the teacher vocabulary
    allow_stop: bool = False


@dataclass(frozen=True)
class TeacherScores:
    """Per student position: a TeacherPosition, or None when mismatched."""

    positions: tuple[Optional[TeacherPosition], ...]
    alignment_offset: int
    mismatch_rate: Optional[float]
    topk_requested: int
    topk_dropped: int

    @property
    def mismatch(self) -> tuple[bool, ...]:
        return tuple(p is None for p in self.positions)


def score_transcript(
    params: ModelParams,
    frames: np.ndarray,
    text: str,
    student_ids: Sequence[int],
    student_spec: TokenizerSpec,
    teacher_spec: TokenizerSpec,
    token_map: TokenMap,
    fpt: int,
    k_teacher: int,
    stop: bool = False,
) -> TeacherScores:
    """Teacher supports for every student transcript position.

    With ``stop`` one extra trailing entry scores the stop position, where the
    stop token may enter the support.
    """
    tf = teacher_force(params, frames, text, teacher_spec, fpt, stop=stop)
    align = align_positions(student_ids, tf.ids, student_spec, teacher_spec)
    positions: list[Optional[TeacherPosition]] = []
    requested = dropped = 0

    def add(row, allow_stop):
        nonlocal requested, dropped
        entries, d = extract_support(row, token_map, k_teacher, student_spec, allow_stop=allow_stop)
        requested += k_teacher
        dropped += d
        positions.append(TeacherPosition(tuple(entries), row, allow_stop))

    for i in range(len(student_ids)):
        if align.mismatched[i]:
            positions.append(None)
        else:
            add(tf.logits[align.index[i]], False)
    if stop:
        if tf.ok:
            add(tf.logits[len(tf.ids)], True)
        else:
            positions.append(None)
    return TeacherScores(tuple(positions), tf.alignment_offset, align.mismatch_rate, requested, dropped)

