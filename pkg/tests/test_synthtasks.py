"""Synthetic language generator: similarity control, determinism, storage."""

import math

import numpy as np
import pytest

from xladapt.synthtasks import (FIRST_TOKEN, TaskBatch, Utterance,
                                generate_language, load_language, load_split,
                                sample_corpus, save_language, save_split,
                                similarity, weighted_average)


def test_delta_zero_identical_to_root():
    a = generate_language(7, 0.0, lang_seed=11)
    b = generate_language(7, 0.0, lang_seed=99)
    assert np.array_equal(a.prototypes, b.prototypes)
    assert similarity(a, b) == 1.0


def test_delta_one_full_mutation():
    root = generate_language(7, 0.0, lang_seed=1)
    far = generate_language(7, 1.0, lang_seed=2)
    assert similarity(root, far) == 0.0


def test_delta_controls_overlap():
    root = generate_language(7, 0.0, lang_seed=1, alphabet_size=12)
    for delta in (0.1, 0.3, 0.7):
        lang = generate_language(7, delta, lang_seed=5, alphabet_size=12)
        expected = 1.0 - math.ceil(delta * 12) / 12
        assert abs(similarity(root, lang) - expected) < 1e-12


def test_similarity_properties():
    a = generate_language(7, 0.3, lang_seed=1)
    b = generate_language(7, 0.6, lang_seed=2)
    assert similarity(a, a) == 1.0
    assert similarity(a, b) == similarity(b, a)
    c = generate_language(7, 0.3, lang_seed=1, alphabet_size=5)
    with pytest.raises(ValueError):
        similarity(a, c)


def test_generation_deterministic():
    a = generate_language(7, 0.4, lang_seed=3)
    b = generate_language(7, 0.4, lang_seed=3)
    assert np.array_equal(a.prototypes, b.prototypes)


def test_delta_out_of_range():
    with pytest.raises(ValueError):
        generate_language(7, 1.5, lang_seed=1)


def test_sample_corpus_deterministic_and_disjoint():
    spec = generate_language(7, 0.2, lang_seed=4)
    s1 = sample_corpus(spec, 30, (2, 4), split_seed=10)
    s2 = sample_corpus(spec, 30, (2, 4), split_seed=10)
    ids = set()
    for b1, b2 in zip(s1, s2):
        for u1, u2 in zip(b1, b2):
            assert u1.utt_id == u2.utt_id
            assert np.array_equal(u1.feats, u2.feats)
            assert u1.tokens == u2.tokens
            assert u1.utt_id not in ids  # split disjointness
            ids.add(u1.utt_id)
    assert sum(len(b) for b in s1) == 30


def test_sigma_zero_features_equal_prototypes():
    spec = generate_language(7, 0.2, lang_seed=4, noise=0.0)
    train, _, _ = sample_corpus(spec, 6, (2, 3), split_seed=1)
    for u in train:
        toks = [t - FIRST_TOKEN for t in u.tokens]
        expect = spec.prototypes[toks].reshape(-1, spec.feature_dim)
        assert np.array_equal(u.feats, expect)


def test_token_frequencies_uniform_within_3_sigma():
    spec = generate_language(7, 0.0, lang_seed=4, alphabet_size=12)
    batches = sample_corpus(spec, 600, (3, 5), split_seed=2)
    counts = np.zeros(12)
    total = 0
    for b in batches:
        for u in b:
            for t in u.tokens:
                counts[t - FIRST_TOKEN] += 1
                total += 1
    p = 1.0 / 12
    sigma = math.sqrt(total * p * (1 - p))
    assert np.abs(counts - total * p).max() <= 3 * sigma


def test_sequences_ctc_feasible_after_subsampling():
    spec = generate_language(7, 0.3, lang_seed=9)
    for batch in sample_corpus(spec, 40, (2, 5), split_seed=3):
        for u in batch:
            reps = sum(1 for a, b in zip(u.tokens, u.tokens[1:]) if a == b)
            frames_out = math.ceil(u.feats.shape[0] / 2)
            assert len(u.tokens) + reps <= frames_out


def test_sample_corpus_minimum_size():
    spec = generate_language(7, 0.2, lang_seed=4)
    with pytest.raises(ValueError):
        sample_corpus(spec, 2, (2, 3), split_seed=1)


def test_weighted_average():
    assert weighted_average([0.2, 0.4], [3, 1]) == pytest.approx(0.25)
    assert weighted_average([0.3, 0.5], [2, 2]) == pytest.approx(0.4)
    assert weighted_average([0.7], [9]) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        weighted_average([0.1], [1, 2])
    with pytest.raises(ValueError):
        weighted_average([0.1, 0.2], [1, 0])


def test_split_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    batch = TaskBatch([
        Utterance("a-0001", rng.normal(size=(6, 8)), [3, 4, 5]),
        Utterance("a-0002", rng.normal(size=(3, 8)), [7]),
    ])
    path = str(tmp_path / "train.bin")
    save_split(path, batch)
    loaded = load_split(path)
    assert len(loaded) == 2
    for u, v in zip(batch, loaded):
        assert u.utt_id == v.utt_id
        assert np.array_equal(u.feats, v.feats)
        assert u.tokens == v.tokens


def test_language_roundtrip_byte_identical(tmp_path):
    spec = generate_language(7, 0.2, lang_seed=4, lang_id="demo")
    splits = sample_corpus(spec, 9, (2, 3), split_seed=5)
    d1, d2 = tmp_path / "c1", tmp_path / "c2"
    save_language(str(d1), spec, splits)
    spec2, splits2 = load_language(str(d1), "demo")
    assert np.array_equal(spec.prototypes, spec2.prototypes)
    save_language(str(d2), spec2, splits2)
    for name in ("spec.json", "train.bin", "valid.bin", "test.bin"):
        assert (d1 / "demo" / name).read_bytes() == \
            (d2 / "demo" / name).read_bytes()
