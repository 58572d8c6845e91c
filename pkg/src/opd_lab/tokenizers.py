"""Student/teacher tokenizers and the teacher->student id map.

The student is character level. The teacher shares every single-character
token and adds merged multi-character tokens; ids are laid out differently so
the map between the two is never the identity.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FORMAT_VERSION = 1

BOS, EOS, PAD = "<|bos|>", "<|eos|>", "<|pad|>"
# Reserved control band. The first entry doubles as the teacher's task tag.
TASK_TAG = "<|asr|>"
CONTROL_TOKENS = (TASK_TAG, "<|ctl1|>", "<|ctl2|>", "<|ctl3|>")


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerSpec:
    vocab: tuple[str, ...]
    bos_id: int
    eos_id: int
    pad_id: int
    blocked_ranges: tuple[tuple[int, int], ...] = ()
    # Token fed as the "previous token" at position 0.
    prompt_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(
            self, "blocked_ranges", tuple((int(lo), int(hi)) for lo, hi in self.blocked_ranges)
        )
        if self.prompt_id is None:
            object.__setattr__(self, "prompt_id", self.bos_id)
        V = len(self.vocab)
        if len(set(self.vocab)) != V:
            raise TokenizerError("token strings must be unique")
        specials = (self.bos_id, self.eos_id, self.pad_id)
        if any(not 0 <= i < V for i in specials + (self.prompt_id,)):
            raise TokenizerError("special token id outside vocabulary")
        if len(set(specials)) != 3:
            raise TokenizerError("bos/eos/pad ids must be pairwise distinct")
        for lo, hi in self.blocked_ranges:
            if not 0 <= lo <= hi < V:
                raise TokenizerError(f"blocked range [{lo}, {hi}] outside vocabulary")
            if lo <= self.eos_id <= hi:
                raise TokenizerError("blocked range may not contain eos")

    def __len__(self):
        return len(self.vocab)

    @cached_property
    def token_to_id(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.vocab)}

    @cached_property
    def blocked_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.vocab), dtype=bool)
        for lo, hi in self.blocked_ranges:
            mask[lo : hi + 1] = True
        return mask

    @cached_property
    def special_mask(self) -> np.ndarray:
        """Specials (bos/eos/pad/prompt) plus the blocked band."""
        mask = self.blocked_mask.copy()
        mask[[self.bos_id, self.eos_id, self.pad_id, self.prompt_id]] = True
        return mask

    @cached_property
    def char_lengths(self) -> np.ndarray:
        """Characters of transcript covered by each id; 0 for specials."""
        lens = np.array([len(s) for s in self.vocab], dtype=np.int64)
        lens[self.special_mask] = 0
        return lens

    @cached_property
    def _max_token_len(self) -> int:
        return int(self.char_lengths.max(initial=0))

    def is_blocked(self, token_id: int) -> bool:
        return bool(self.blocked_mask[token_id])

    def is_special(self, token_id: int) -> bool:
        return bool(self.special_mask[token_id])

    @property
    def transcript_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.special_mask)

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "vocab": list(self.vocab),
            "bos": self.bos_id,
            "eos": self.eos_id,
            "pad": self.pad_id,
            "prompt": self.prompt_id,
            "blocked": [list(r) for r in self.blocked_ranges],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TokenizerSpec":
        if obj.get("version") != FORMAT_VERSION:
            raise TokenizerError(f"unsupported tokenizer format version {obj.get('version')!r}")
        return cls(
            vocab=tuple(obj["vocab"]),
            bos_id=obj["bos"],
            eos_id=obj["eos"],
            pad_id=obj["pad"],
            blocked_ranges=tuple(tuple(r) for r in obj["blocked"]),
            prompt_id=obj.get("prompt"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "TokenizerSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_student_tokenizer(alphabet: Sequence[str]) -> TokenizerSpec:
    alphabet = list(alphabet)
    if not alphabet:
        raise TokenizerError("alphabet must be non-empty")
    if any(len(c) != 1 for c in alphabet):
        raise TokenizerError("alphabet entries must be single characters")
    if len(set(alphabet)) != len(alphabet):
        dup = sorted({c for c in alphabet if alphabet.count(c) > 1})
        raise TokenizerError(f"duplicate characters in alphabet: {dup}")
    n = len(alphabet)
    vocab = alphabet + [BOS, EOS, PAD] + list(CONTROL_TOKENS)
    return TokenizerSpec(
        vocab=tuple(vocab),
        bos_id=n,
        eos_id=n + 1,
        pad_id=n + 2,
        blocked_ranges=((n + 3, n + 3 + len(CONTROL_TOKENS) - 1),),
    )


def build_teacher_tokenizer(
    student: TokenizerSpec, merges: Sequence[tuple[str, str]]
) -> TokenizerSpec:
    """Teacher vocab: specials and control band first, then the student's
    characters in reverse order, then one token per merge."""
    chars = [student.vocab[i] for i in student.transcript_ids]
    known = set(chars)
    merged: list[str] = []
    for left, right in merges:
        if left not in known or right not in known:
            missing = left if left not in known else right
            raise TokenizerError(f"merge ({left!r}, {right!r}) references unknown token {missing!r}")
        tok = left + right
        if tok not in known:
            known.add(tok)
            merged.append(tok)
    head = [PAD, BOS, EOS] + list(CONTROL_TOKENS)
    vocab = head + chars[::-1] + merged
    return TokenizerSpec(
        vocab=tuple(vocab),
        bos_id=1,
        eos_id=2,
        pad_id=0,
        blocked_ranges=((3, 3 + len(CONTROL_TOKENS) - 1),),
        prompt_id=vocab.index(TASK_TAG),
    )


def encode(spec: TokenizerSpec, text: str) -> list[int]:
    """Greedy longest-match segmentation over the transcript tokens."""
    table = spec.token_to_id
    max_len = spec._max_token_len
    out: list[int] = []
    pos = 0
    while pos < len(text):
        for width in range(min(max_len, len(text) - pos), 0, -1):
            tid = table.get(text[pos : pos + width])
            if tid is not None and not spec.special_mask[tid]:
                out.append(tid)
                pos += width
                break
        else:
            raise TokenizerError(f"cannot encode character {text[pos]!r} at offset {pos}")
    return out


def decode(spec: TokenizerSpec, ids: Sequence[int]) -> str:
    V = len(spec)
    parts = []
    for i in ids:
        i = int(i)
        if not 0 <= i < V:
            raise TokenizerError(f"token id {i} out of range for vocabulary of size {V}")
        if spec.blocked_mask[i] or i == spec.pad_id:
            raise TokenizerError(f"cannot decode blocked/pad id {i}")
        if spec.special_mask[i]:
            continue
        parts.append(spec.vocab[i])
    return "".join(parts)


@dataclass(frozen=True)
class TokenMap:
    entries: tuple[Optional[int], ...]
    drop_count: int
    to_student: np.ndarray = field(repr=False, compare=False)
    to_teacher: np.ndarray = field(repr=False, compare=False)
    student_eos: int = -1
    teacher_eos: int = -1

    def __getitem__(self, teacher_id: int) -> Optional[int]:
        return self.entries[teacher_id]


def build_token_map(teacher: TokenizerSpec, student: TokenizerSpec) -> TokenMap:
    """Map teacher ids to the student id carrying the identical string.

    Specials, blocked ids and strings without a student counterpart are
    dropped. ``to_teacher`` is the inverse over student ids (-1 if none).
    """
    lookup = student.token_to_id
    entries: list[Optional[int]] = []
    for tid, s in enumerate(teacher.vocab):
        sid = None if teacher.special_mask[tid] else lookup.get(s)
        if sid is not None and student.special_mask[sid]:
            sid = None
        entries.append(sid)
    to_student = np.array([-1 if e is None else e for e in entries], dtype=np.int64)
    to_teacher = np.full(len(student), -1, dtype=np.int64)
    for tid, sid in enumerate(entries):
        if sid is not None:
            to_teacher[sid] = tid
    return TokenMap(
        entries=tuple(entries),
        drop_count=sum(e is None for e in entries),
        to_student=to_student,
        to_teacher=to_teacher,
        student_eos=student.eos_id,
        teacher_eos=teacher.eos_id,
    )
