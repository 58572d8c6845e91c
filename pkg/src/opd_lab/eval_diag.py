"""CER/WER scoring and the valid-union-support-size (VUSS) diagnostic."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

# Punctuation stripped before scoring (normalizer version 1).
NORMALIZER_VERSION = 1
PUNCTUATION = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~"
_PUNCT_RE = re.compile("[" + re.escape(PUNCTUATION) + "]")
_WS_RE = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, delete punctuation, collapse whitespace, trim."""
    text = _PUNCT_RE.sub("", text.lower())
    return _WS_RE.sub(" ", text).strip()


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def units(text: str, unit: str) -> list[str]:
    text = normalize(text)
    if unit == "char":
        return list(text.replace(" ", ""))
    if unit == "word":
        return text.split()
    raise ValueError(f"unknown scoring unit {unit!r}")


@dataclass(frozen=True)
class SetScore:
    metric: str  # "CER" or "WER"
    rate: float
    edits: int
    ref_units: int
    utterances: int


def score_set(hyps: Sequence[str], refs: Sequence[str], unit: str = "char") -> SetScore:
    """Corpus-level rate: total edits over total reference units."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    edits = total = 0
    for h, r in zip(hyps, refs):
        ru = units(r, unit)
        edits += edit_distance(units(h, unit), ru)
        total += len(ru)
    if total == 0:
        rate = 0.0 if edits == 0 else float("inf")
    else:
        rate = edits / total
    return SetScore("CER" if unit == "char" else "WER", rate, edits, total, len(refs))


@dataclass
class EvalReport:
    sets: dict[str, SetScore] = field(default_factory=dict)
    config_hash: str = ""

    def to_json(self) -> dict:
        return {
            "normalizer_version": NORMALIZER_VERSION,
            "aggregation": "corpus-level: total edits / total reference units; CER excludes spaces",
            "config_hash": self.config_hash,
            "sets": {k: asdict(v) for k, v in self.sets.items()},
        }

    def table(self) -> str:
        rows = [f"{'set':<12} {'metric':<6} {'rate':>8} {'edits':>7} {'units':>7} {'utts':>5}"]
        for name, s in self.sets.items():
            rows.append(f"{name:<12} {s.metric:<6} {100 * s.rate:>7.2f}% {s.edits:>7d} {s.ref_units:>7d} {s.utterances:>5d}")
        return "\n".join(rows)


# --- VUSS ------------------------------------------------------------------


def record_vuss(support_sizes: Sequence[int]) -> Optional[float]:
    """Mean size over the valid supports of one logging step; None if there are none."""
    sizes = [s for s in support_sizes if s >= 2]
    if not sizes:
        return None
    return float(np.mean(sizes))


@dataclass(frozen=True)
class VussStats:
    window: tuple[float, ...]
    mean: float
    min: float
    max: float
    k_teacher: Optional[int] = None
    k_student: Optional[int] = None
    skipped_steps: int = 0


def aggregate_vuss(window: Sequence[Optional[float]], k_teacher=None, k_student=None) -> VussStats:
    vals = tuple(float(v) for v in window if v is not None)
    skipped = len(window) - len(vals)
    if not vals:
        raise ValueError("VUSS window holds no logged steps")
    return VussStats(vals, float(np.mean(vals)), min(vals), max(vals), k_teacher, k_student, skipped)


def support_overlap_interpretation(before: VussStats, after: VussStats) -> dict:
    """Compare two runs under the same top-k settings; smaller VUSS = more overlap."""
    if (before.k_teacher, before.k_student) != (after.k_teacher, after.k_student):
        raise ValueError(
            f"top-k settings differ: before {(before.k_teacher, before.k_student)}, "
            f"after {(after.k_teacher, after.k_student)}"
        )
    return {
        "k_teacher": before.k_teacher,
        "k_student": before.k_student,
        "before": {"mean": before.mean, "min": before.min, "max": before.max, "steps": len(before.window)},
        "after": {"mean": after.mean, "min": after.min, "max": after.max, "steps": len(after.window)},
        "delta": before.mean - after.mean,
        "overlap_increased": bool(after.mean < before.mean),
    }


def vuss_from_metrics(records: Sequence[dict], window: int = 10) -> VussStats:
    """VussStats over the last ``window`` OPD logging records."""
    recs = [r for r in records if r.get("stage") == "opd"]
    if not recs:
        raise ValueError("no OPD records in metrics stream")
    tail = recs[-window:]
    ks = {(r.get("k_teacher"), r.get("k_student")) for r in tail}
    if len(ks) != 1:
        raise ValueError(f"top-k settings change inside the VUSS window: {sorted(ks)}")
    kt, ks_ = ks.pop()
    return aggregate_vuss([r.get("vuss_mean") for r in tail], kt, ks_)


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
