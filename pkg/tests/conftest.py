"""Shared fixtures and independent oracles for the test suite."""

import itertools

import numpy as np
import pytest

from xladapt.adapters import add_adapter_stack
from xladapt.backbone import BackboneConfig, add_head, build_backbone, Backbone
from xladapt.synthtasks import FIRST_TOKEN, Utterance


def micro_config(**over):
    """Smallest useful backbone: 1+1 layers, 8-dim model, 4-dim features."""
    base = dict(vocab_size=6, num_encoder_layers=1, num_decoder_layers=1,
                model_dim=8, ff_dim=12, num_heads=2, feature_dim=4,
                subsample_factor=2, subsample_kernel=3)
    base.update(over)
    return BackboneConfig(**base)


def micro_model(seed=0, lang="xx", cfg=None):
    cfg = cfg or micro_config()
    ps = build_backbone(cfg, seed=seed)
    add_head(ps, cfg, lang, seed=seed + 1)
    return Backbone(cfg, ps)


def random_batch(rng, n_utts=2, cfg=None, len_range=(2, 3), frames_per_token=3):
    """Utterances with random features and CTC-feasible token sequences."""
    cfg = cfg or micro_config()
    real = cfg.vocab_size - FIRST_TOKEN
    utts = []
    for i in range(n_utts):
        n_tok = int(rng.integers(*len_range, endpoint=True))
        while True:
            toks = rng.integers(0, real, size=n_tok)
            reps = sum(1 for a, b in zip(toks, toks[1:]) if a == b)
            frames = frames_per_token * n_tok
            if n_tok + reps <= -(-frames // cfg.subsample_factor):
                break
        feats = rng.normal(size=(frames, cfg.feature_dim))
        utts.append(Utterance(f"u{i:03d}", feats,
                              [int(t) + FIRST_TOKEN for t in toks]))
    return utts


# ---------------------------------------------------------------------------
# Independent oracles (straight-line reimplementations)
# ---------------------------------------------------------------------------


def ctc_brute_force(probs, target, blank=0):
    """Total probability of emitting ``target``: enumerate every alignment."""
    t_frames, vocab = probs.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_frames):
        collapsed = []
        prev = None
        for s in path:
            if s != prev and s != blank:
                collapsed.append(s)
            prev = s
        if collapsed == list(target):
            p = 1.0
            for t, s in enumerate(path):
                p *= probs[t, s]
            total += p
    return total


def ctc_prefix_brute_force(probs, prefix, blank=0):
    """Total probability that the collapsed output starts with ``prefix``."""
    t_frames, vocab = probs.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_frames):
        collapsed = []
        prev = None
        for s in path:
            if s != prev and s != blank:
                collapsed.append(s)
            prev = s
        if collapsed[:len(prefix)] == list(prefix):
            p = 1.0
            for t, s in enumerate(path):
                p *= probs[t, s]
            total += p
    return total


def random_log_probs(rng, t_frames, vocab):
    logits = rng.normal(size=(t_frames, vocab))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
