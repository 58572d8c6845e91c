"""Tiny audio-conditioned autoregressive model with hand-written backprop.

Position t reads the audio window at character offset c_t and the previous
token. The audio feature is the mean of window c_t, the mean of window c_t+1
(a one-window temporal merge) and two end-of-audio flags; windows past the
end of the audio contribute zeros rather than their clamped copy:

    x_t = [pool(c_t) * 1[c_t < n], pool(c_t + 1) * 1[c_t + 1 < n],
           1[c_t >= n], 1[c_t + 1 >= n]]
    a_t = x_t @ W_a
    phi_t = [tanh(a_t), tanh(a_t + E[prev_t])]
    z_t = phi_t @ W_o + b
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .tokenizers import TokenizerSpec


class ModelError(ValueError):
    pass


@dataclass
class ModelParams:
    E: np.ndarray  # [V, H] previous-token embedding
    W_a: np.ndarray  # [2D + 2, H] audio adapter
    W_o: np.ndarray  # [2H, V] output head
    b: np.ndarray  # [V]

    def __post_init__(self):
        V, H = self.E.shape
        if self.W_a.ndim != 2 or self.W_a.shape[1] != H:
            raise ModelError(f"W_a shape {self.W_a.shape} inconsistent with hidden size {H}")
        if self.W_o.shape != (2 * H, V) or self.b.shape != (V,):
            raise ModelError(f"output shapes {self.W_o.shape}, {self.b.shape} inconsistent with V={V}, H={H}")

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def hidden(self) -> int:
        return self.E.shape[1]

    @property
    def feature_dim(self) -> int:
        return (self.W_a.shape[0] - 2) // 2

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        if pos != len(vec):
            raise ModelError("flat vector length does not match parameter count")
        return ModelParams(*out)

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def shapes(self) -> dict[str, list[int]]:
        return {f.name: list(getattr(self, f.name).shape) for f in fields(self)}

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def __add__(self, other: "ModelParams") -> "ModelParams":
        return ModelParams(*(a + o for a, o in zip(self.arrays(), other.arrays())))

    def scale(self, s: float) -> "ModelParams":
        return ModelParams(*(a * s for a in self.arrays()))


def init_params(vocab_size: int, feature_dim: int, hidden: int, rng: np.random.Generator, scale: float = 0.1) -> ModelParams:
    din = 2 * feature_dim + 2
    return ModelParams(
        E=scale * rng.standard_normal((vocab_size, hidden)),
        W_a=scale * rng.standard_normal((din, hidden)),
        W_o=scale * rng.standard_normal((2 * hidden, vocab_size)),
        b=np.zeros(vocab_size),
    )


def pool_frames(frames: np.ndarray, t: int, frames_per_token: int) -> np.ndarray:
    """Mean of window [t*fpt, (t+1)*fpt); windows past the audio clamp to the last one."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ModelError("frames must be a non-empty [T, D] matrix")
    if t < 0:
        raise ModelError("window index must be nonnegative")
    n_windows = -(-frames.shape[0] // frames_per_token)
    t = min(t, n_windows - 1)
    return frames[t * frames_per_token : (t + 1) * frames_per_token].mean(axis=0)


def _pooled_windows(frames: np.ndarray, fpt: int) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ModelError("frames must be a non-empty [T, D] matrix")
    T, D = frames.shape
    if T % fpt == 0:
        return frames.reshape(T // fpt, fpt, D).mean(axis=1)
    return np.stack([pool_frames(frames, t, fpt) for t in range(-(-T // fpt))])


def audio_features(frames: np.ndarray, offsets: Sequence[int], fpt: int) -> np.ndarray:
    pooled = _pooled_windows(frames, fpt)
    n = pooled.shape[0]
    c = np.asarray(offsets, dtype=np.int64)
    past = np.stack([(c >= n), (c + 1 >= n)], axis=1).astype(np.float64)
    here = pooled[np.minimum(c, n - 1)] * (1.0 - past[:, :1])
    ahead = pooled[np.minimum(c + 1, n - 1)] * (1.0 - past[:, 1:])
    return np.concatenate([here, ahead, past], axis=1)


def char_offsets(spec: TokenizerSpec, ids: Sequence[int]) -> np.ndarray:
    """Audio window index for each position when predicting after ``ids[:t]``.

    Length len(ids) + 1: the last entry is the offset after the whole sequence.
    """
    lens = spec.char_lengths[np.asarray(ids, dtype=np.int64)] if len(ids) else np.zeros(0, np.int64)
    return np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)


@dataclass
class ForwardCache:
    x: np.ndarray
    prev: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    logits: np.ndarray


def forward(params: ModelParams, frames: np.ndarray, prev_ids: Sequence[int], offsets: Sequence[int], fpt: int) -> ForwardCache:
    prev = np.asarray(prev_ids, dtype=np.int64)
    if len(prev) != len(offsets):
        raise ModelError("prev_ids and offsets must have equal length")
    if len(prev) and (prev.min() < 0 or prev.max() >= params.vocab_size):
        raise ModelError("previous-token id outside model vocabulary")
    x = audio_features(frames, offsets, fpt) if len(prev) else np.zeros((0, params.W_a.shape[0]))
    if x.shape[1] != params.W_a.shape[0]:
        raise ModelError(f"audio feature width {x.shape[1]} does not match W_a rows {params.W_a.shape[0]}")
    a = x @ params.W_a
    h1 = np.tanh(a)
    h2 = np.tanh(a + params.E[prev])
    logits = np.concatenate([h1, h2], axis=1) @ params.W_o + params.b
    return ForwardCache(x, prev, h1, h2, logits)


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> ModelParams:
    """Gradient of sum(dlogits * logits) with respect to every parameter."""
    H = params.hidden
    phi = np.concatenate([cache.h1, cache.h2], axis=1)
    dW_o = phi.T @ dlogits
    db = dlogits.sum(axis=0)
    dphi = dlogits @ params.W_o.T
    du1 = dphi[:, :H] * (1.0 - cache.h1**2)
    du2 = dphi[:, H:] * (1.0 - cache.h2**2)
    dW_a = cache.x.T @ (du1 + du2)
    dE = np.zeros_like(params.E)
    np.add.at(dE, cache.prev, du2)
    return ModelParams(E=dE, W_a=dW_a, W_o=dW_o, b=db)


def teacher_forcing_inputs(spec: TokenizerSpec, target_ids: Sequence[int]):
    """(prev ids, offsets) for scoring ``target_ids`` position by position."""
    target_ids = list(target_ids)
    prev = [spec.prompt_id] + target_ids[:-1]
    offsets = char_offsets(spec, target_ids)[:-1] if target_ids else np.zeros(0, np.int64)
    return np.array(prev, dtype=np.int64), offsets


def forward_logits(params: ModelParams, frames: np.ndarray, target_ids: Sequence[int], spec: TokenizerSpec, fpt: int) -> np.ndarray:
    """Teacher-forced logits [len(target_ids), V]; row t scores target t."""
    if params.vocab_size != len(spec):
        raise ModelError(f"model vocabulary {params.vocab_size} != tokenizer vocabulary {len(spec)}")
    prev, offsets = teacher_forcing_inputs(spec, target_ids)
    return forward(params, frames, prev, offsets, fpt).logits


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(z, axis))


def ce_loss_and_grad(params: ModelParams, frames: np.ndarray, target_ids: Sequence[int], spec: TokenizerSpec, fpt: int):
    """Mean token cross-entropy under teacher forcing and its exact gradient."""
    target = np.asarray(target_ids, dtype=np.int64)
    if len(target) == 0:
        raise ModelError("cross-entropy needs at least one target token")
    prev, offsets = teacher_forcing_inputs(spec, target)
    cache = forward(params, frames, prev, offsets, fpt)
    logp = log_softmax(cache.logits)
    rows = np.arange(len(target))
    loss = -logp[rows, target].mean()
    dz = np.exp(logp)
    dz[rows, target] -= 1.0
    dz /= len(target)
    return float(loss), backward(params, cache, dz)


def sgd_step(params: ModelParams, grad: ModelParams, lr: float) -> ModelParams:
    if not lr > 0:
        raise ModelError(f"learning rate must be positive, got {lr}")
    if not grad.is_finite():
        raise ModelError("non-finite gradient")
    return ModelParams(*(p - lr * g for p, g in zip(params.arrays(), grad.arrays())))
