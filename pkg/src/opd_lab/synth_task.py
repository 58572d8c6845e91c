"""Synthetic speech channel: reference text rendered as noisy frame features.

Every character of the reference becomes ``frames_per_token`` frames equal to
that character's fixed embedding plus Gaussian noise. Embeddings are random
unit vectors drawn from ``embedding_seed`` so characters are acoustically
confusable when ``feature_dim`` is small.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tokenizers import TokenizerSpec, build_student_tokenizer, encode

DEFAULT_WORDS = (
    "the", "cat", "sat", "on", "mat", "dog", "ran", "to", "park", "in",
    "rain", "sun", "is", "hot", "we", "go", "home", "now", "red", "big",
    "box", "fox", "jumps", "over", "lazy", "quick", "brown", "zero", "one",
    "two", "six", "ten", "yes", "no", "stop", "play", "music", "call", "mom",
    "open", "door", "light", "off", "turn", "left", "right", "up", "down",
    "then", "there", "her", "win", "and", "an",
)
ALPHABET = "abcdefghijklmnopqrstuvwxyz "


@dataclass(frozen=True)
class TaskConfig:
    alphabet: str = ALPHABET
    words: tuple[str, ...] = DEFAULT_WORDS
    min_words: int = 2
    max_words: int = 5
    frames_per_token: int = 4
    noise_sigma: float = 0.35
    feature_dim: int = 12
    embedding_seed: int = 1234

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if self.frames_per_token < 2:
            raise ValueError("frames_per_token must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("need 1 <= min_words <= max_words")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not self.words:
            raise ValueError("word list is empty")
        bad = sorted({c for w in self.words for c in w} - set(self.alphabet))
        if bad:
            raise ValueError(f"word list uses characters outside the alphabet: {bad}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["words"] = list(self.words)
        return d

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    @cached_property
    def tokenizer(self) -> TokenizerSpec:
        return build_student_tokenizer(list(self.alphabet))

    @cached_property
    def embeddings(self) -> np.ndarray:
        """[len(alphabet) x feature_dim] unit-norm rows."""
        rng = np.random.default_rng(self.embedding_seed)
        emb = rng.standard_normal((len(self.alphabet), self.feature_dim))
        return emb / np.linalg.norm(emb, axis=1, keepdims=True)


@dataclass(frozen=True)
class Utterance:
    id: int
    ref_text: str
    frames: np.ndarray = field(repr=False, compare=False)
    seed: int = 0


def utterance_seed(dataset_seed: int, utt_id: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, utt_id]).generate_state(1, np.uint64)[0])


def render_frames(config: TaskConfig, text: str, rng: np.random.Generator, noise_sigma=None) -> np.ndarray:
    sigma = config.noise_sigma if noise_sigma is None else noise_sigma
    ids = encode(config.tokenizer, text)
    clean = np.repeat(config.embeddings[ids], config.frames_per_token, axis=0)
    if sigma == 0:
        return clean
    return clean + sigma * rng.standard_normal(clean.shape)


def make_utterance(config: TaskConfig, utt_id: int, seed: int) -> Utterance:
    """Regenerate one utterance from its derived seed."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_words, config.max_words + 1))
    words = [config.words[int(i)] for i in rng.integers(0, len(config.words), size=n)]
    text = " ".join(words)
    return Utterance(id=utt_id, ref_text=text, frames=render_frames(config, text, rng), seed=seed)


def generate_dataset(config: TaskConfig, count: int, seed: int) -> list[Utterance]:
    if count < 0:
        raise ValueError("count must be >= 0")
    return [make_utterance(config, i, utterance_seed(seed, i)) for i in range(count)]


def _id_rank(utt_id: int) -> bytes:
    return hashlib.sha256(str(utt_id).encode()).digest()


def split_dataset(data: Sequence[Utterance], fractions: Sequence[float]):
    """Deterministic disjoint (train, td_pool, eval) split ordered by id hash."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ValueError(f"fractions must be three nonnegative values summing to <= 1, got {fractions}")
    order = sorted(data, key=lambda u: _id_rank(u.id))
    n = len(order)
    sizes = [int(np.floor(f * n + 1e-9)) for f in fractions]
    out, start = [], 0
    for size in sizes:
        part = sorted(order[start : start + size], key=lambda u: u.id)
        out.append(part)
        start += size
    return tuple(out)


def nearest_embedding_decode(config: TaskConfig, frames: np.ndarray) -> str:
    """Oracle decoder: per window, the character with the closest embedding."""
    fpt = config.frames_per_token
    pooled = frames.reshape(-1, fpt, frames.shape[1]).mean(axis=1)
    d = ((pooled[:, None, :] - config.embeddings[None]) ** 2).sum(-1)
    return "".join(config.alphabet[i] for i in d.argmin(axis=1))


# --- on-disk dataset -------------------------------------------------------

MANIFEST = "manifest.jsonl"


def save_dataset(path, config: TaskConfig, data: Sequence[Utterance], seed: int, mode: str = "regenerate",
                 extra: Optional[dict] = None) -> Path:
    if mode not in ("regenerate", "blobs"):
        raise ValueError(f"unknown dataset mode {mode!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "version": 1,
        "mode": mode,
        "seed": seed,
        "count": len(data),
        "task": config.to_json(),
        "config_hash": config.fingerprint,
        **(extra or {}),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for u in data:
        lines.append(json.dumps({"id": u.id, "ref_text": u.ref_text, "seed": u.seed}, sort_keys=True))
        if mode == "blobs":
            (path / "frames").mkdir(exist_ok=True)
            np.save(path / "frames" / f"{u.id}.npy", u.frames.astype("<f8"))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def load_dataset(path) -> tuple[TaskConfig, list[Utterance]]:
    path = Path(path)
    lines = (path / MANIFEST).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("version") != 1:
        raise ValueError(f"unsupported dataset version {header.get('version')!r}")
    config = TaskConfig(**header["task"])
    data = []
    for line in lines[1:]:
        rec = json.loads(line)
        if header["mode"] == "blobs":
            frames = np.load(path / "frames" / f"{rec['id']}.npy")
            data.append(Utterance(rec["id"], rec["ref_text"], frames, rec["seed"]))
        else:
            u = make_utterance(config, rec["id"], rec["seed"])
            if u.ref_text != rec["ref_text"]:
                raise ValueError(f"utterance {rec['id']} does not regenerate to its manifest text")
            data.append(u)
    return config, data
