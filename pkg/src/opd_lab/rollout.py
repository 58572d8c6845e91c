"""Student rollouts: no-grad generation, per-position top-k, cleanup."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import ModelParams, audio_features, log_softmax
from .tokenizers import TokenizerSpec, decode


@dataclass(frozen=True)
class Rollout:
    raw_ids: tuple[int, ...]
    clean_ids: tuple[int, ...]
    text: str
    # One entry per raw emitted position: ((id, logit), ...) sorted by logit desc.
    student_topk: tuple[tuple[tuple[int, float], ...], ...]
    # Raw position of each clean id.
    position_map: tuple[int, ...]

    @property
    def empty(self) -> bool:
        return len(self.clean_ids) == 0

    def topk_at_clean(self, i: int):
        return self.student_topk[self.position_map[i]]


def topk_sorted(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, descending, ties to the lower id."""
    order = np.argsort(-logits, kind="stable")
    return order[:k]


def cleanup(raw_ids: Sequence[int], spec: TokenizerSpec) -> list[int]:
    return [int(i) for i in raw_ids if not spec.special_mask[i]]


def _clean_positions(raw_ids: Sequence[int], spec: TokenizerSpec) -> tuple[int, ...]:
    return tuple(p for p, i in enumerate(raw_ids) if not spec.special_mask[i])


def generate(
    params: ModelParams,
    frames: np.ndarray,
    spec: TokenizerSpec,
    fpt: int,
    max_len: int,
    k: int = 8,
    decode_mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
    temperature: float = 1.0,
) -> Rollout:
    """Autoregressive decode; stops after emitting eos or at ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if decode_mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {decode_mode!r}")
    if decode_mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    A_cache: dict[int, np.ndarray] = {}
    H = params.hidden
    W_o1, W_o2 = params.W_o[:H], params.W_o[H:]

    def audio_proj(c: int) -> np.ndarray:
        if c not in A_cache:
            A_cache[c] = (audio_features(frames, [c], fpt) @ params.W_a)[0]
        return A_cache[c]

    raw: list[int] = []
    topk: list[tuple[tuple[int, float], ...]] = []
    prev, offset = spec.prompt_id, 0
    for _ in range(max_len):
        a = audio_proj(offset)
        z = np.tanh(a) @ W_o1 + np.tanh(a + params.E[prev]) @ W_o2 + params.b
        cand = topk_sorted(z, k)
        topk.append(tuple((int(i), float(z[i])) for i in cand))
        if decode_mode == "greedy":
            tok = int(cand[0])
        else:
            p = np.exp(log_softmax(z / temperature))
            tok = int(rng.choice(len(z), p=p))
        raw.append(tok)
        if tok == spec.eos_id:
            break
        prev = tok
        offset += int(spec.char_lengths[tok])
    clean = cleanup(raw, spec)
    return Rollout(
        raw_ids=tuple(raw),
        clean_ids=tuple(clean),
        text=decode(spec, clean),
        student_topk=tuple(topk),
        position_map=_clean_positions(raw, spec),
    )


def dump_rollouts(path, items: Sequence[tuple[int, Rollout]]) -> None:
    """Debug dump: one JSON line per (utterance id, rollout)."""
    with open(path, "w") as fh:
        for utt_id, r in items:
            fh.write(json.dumps({
                "id": utt_id,
                "raw_ids": list(r.raw_ids),
                "text": r.text,
                "topk": [[list(c) for c in pos] for pos in r.student_topk],
            }) + "\n")
