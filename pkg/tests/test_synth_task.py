from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from opd_lab.synth_task import (
    TaskConfig,
    generate_dataset,
    load_dataset,
    make_utterance,
    nearest_embedding_decode,
    save_dataset,
    split_dataset,
)
from opd_lab.tokenizers import encode


def test_count_zero():
    assert generate_dataset(TaskConfig(), 0, seed=1) == []
    with pytest.raises(ValueError):
        generate_dataset(TaskConfig(), -1, seed=1)


def test_frame_shape_invariant():
    cfg = TaskConfig()
    for u in generate_dataset(cfg, 20, seed=2):
        n_tokens = len(encode(cfg.tokenizer, u.ref_text))
        assert u.frames.shape == (cfg.frames_per_token * n_tokens, cfg.feature_dim)


def test_zero_noise_frames_are_repeated_embeddings():
    cfg = replace(TaskConfig(), noise_sigma=0.0)
    for u in generate_dataset(cfg, 5, seed=3):
        ids = encode(cfg.tokenizer, u.ref_text)
        expect = np.repeat(cfg.embeddings[ids], cfg.frames_per_token, axis=0)
        assert np.array_equal(u.frames, expect)


def test_noise_has_requested_scale():
    cfg = TaskConfig()
    clean = replace(cfg, noise_sigma=0.0)
    resid = np.concatenate([
        (u.frames - make_utterance(clean, u.id, u.seed).frames).ravel()
        for u in generate_dataset(cfg, 50, seed=4)
    ])
    assert abs(resid.std() - cfg.noise_sigma) < 0.01


def test_determinism_and_regeneration():
    cfg = TaskConfig()
    a, b = generate_dataset(cfg, 10, seed=5), generate_dataset(cfg, 10, seed=5)
    for x, y in zip(a, b):
        assert x == y and np.array_equal(x.frames, y.frames)
        assert np.array_equal(make_utterance(cfg, x.id, x.seed).frames, x.frames)
    c = generate_dataset(cfg, 10, seed=6)
    assert any(x.ref_text != z.ref_text for x, z in zip(a, c))


def test_noise_free_channel_is_decodable():
    cfg = replace(TaskConfig(), noise_sigma=0.0)
    for u in generate_dataset(cfg, 30, seed=7):
        assert nearest_embedding_decode(cfg, u.frames) == u.ref_text


def test_task_config_validation():
    with pytest.raises(ValueError):
        TaskConfig(frames_per_token=1)
    with pytest.raises(ValueError):
        TaskConfig(noise_sigma=-0.1)
    with pytest.raises(ValueError, match="outside the alphabet"):
        TaskConfig(words=("hello!",))


def test_split_examples():
    data = generate_dataset(TaskConfig(), 100, seed=8)
    tr, td, ev = split_dataset(data, (0.8, 0.1, 0.1))
    assert (len(tr), len(td), len(ev)) == (80, 10, 10)
    tr, td, ev = split_dataset(data, (1.0, 0, 0))
    assert len(tr) == 100 and not td and not ev
    for bad in [(0.5, 0.6, 0.1), (-0.1, 0.5, 0.5), (0.5, 0.5)]:
        with pytest.raises(ValueError):
            split_dataset(data, bad)


@given(st.integers(0, 120), st.tuples(*[st.floats(0, 0.34)] * 3))
def test_split_disjoint_and_deterministic(n, fractions):
    data = generate_dataset(TaskConfig(), n, seed=9)
    parts = split_dataset(data, fractions)
    ids = [{u.id for u in p} for p in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert [len(p) for p in parts] == [int(np.floor(f * n + 1e-9)) for f in fractions]
    assert split_dataset(data, fractions) == parts


@pytest.mark.parametrize("mode", ["regenerate", "blobs"])
def test_dataset_disk_round_trip(tmp_path, mode):
    cfg = TaskConfig()
    data = generate_dataset(cfg, 6, seed=10)
    save_dataset(tmp_path / mode, cfg, data, seed=10, mode=mode)
    cfg2, back = load_dataset(tmp_path / mode)
    assert cfg2 == cfg
    for x, y in zip(data, back):
        assert x == y and np.array_equal(x.frames, y.frames)
