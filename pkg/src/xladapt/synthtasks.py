"""Synthetic "languages" with controllable pairwise similarity.

A language is an emission mapping from alphabet tokens to fixed sequences of
feature prototypes (3 frames per token by default). Languages are derived from
a shared root mapping by mutating a fraction ``delta`` of the entries, so the
fraction of shared prototypes is a ground-truth similarity knob.

Everything is a pure function of its seeds (numpy PCG64 via
``default_rng``), so corpora are byte-identical across runs and platforms.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

# reserved token ids shared with the backbone vocabulary
BLANK = 0
SOS = 1
EOS = 2
FIRST_TOKEN = 3


@dataclass
class LanguageSpec:
    lang_id: str
    alphabet_size: int
    frames_per_token: int
    feature_dim: int
    noise: float
    delta: float
    root_seed: int
    lang_seed: int
    # (alphabet_size, frames_per_token, feature_dim)
    prototypes: np.ndarray = field(repr=False)

    @property
    def vocab_size(self):
        return FIRST_TOKEN + self.alphabet_size

    def to_json(self):
        d = {k: getattr(self, k) for k in
             ("lang_id", "alphabet_size", "frames_per_token", "feature_dim",
              "noise", "delta", "root_seed", "lang_seed")}
        d["prototypes"] = self.prototypes.tolist()
        return d

    @staticmethod
    def from_json(d):
        d = dict(d)
        d["prototypes"] = np.asarray(d["prototypes"], dtype=np.float64)
        return LanguageSpec(**d)


@dataclass
class Utterance:
    utt_id: str
    feats: np.ndarray  # (frames, feature_dim)
    tokens: list  # real token ids (>= FIRST_TOKEN)


class TaskBatch(list):
    """List of utterances; the unit handed to losses and training steps."""


def _root_prototypes(root_seed, alphabet_size, frames_per_token, feature_dim):
    rng = np.random.default_rng(root_seed)
    return rng.normal(size=(alphabet_size, frames_per_token, feature_dim))


def generate_language(root_seed, delta, lang_seed, lang_id=None,
                      alphabet_size=12, frames_per_token=3, feature_dim=8,
                      noise=0.1):
    """Mutate ``ceil(delta * alphabet)`` prototype entries of the root mapping."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    protos = _root_prototypes(root_seed, alphabet_size, frames_per_token,
                              feature_dim)
    n_mut = math.ceil(delta * alphabet_size)
    rng = np.random.default_rng(lang_seed)
    if n_mut:
        idx = rng.choice(alphabet_size, size=n_mut, replace=False)
        protos[idx] = rng.normal(size=(n_mut, frames_per_token, feature_dim))
    return LanguageSpec(
        lang_id=lang_id or f"lang{lang_seed}",
        alphabet_size=alphabet_size,
        frames_per_token=frames_per_token,
        feature_dim=feature_dim,
        noise=noise,
        delta=delta,
        root_seed=root_seed,
        lang_seed=lang_seed,
        prototypes=protos,
    )


def similarity(a: LanguageSpec, b: LanguageSpec):
    """Fraction of alphabet entries whose prototypes are identical."""
    if a.alphabet_size != b.alphabet_size:
        raise ValueError("languages use different alphabets")
    same = np.all(a.prototypes == b.prototypes, axis=(1, 2))
    return float(np.mean(same))


def sample_corpus(spec: LanguageSpec, n_utts, len_range, split_seed,
                  split_fracs=(0.7, 0.15, 0.15)):
    """Sample disjoint train/valid/test batches from a language.

    Token sequences are uniform over the alphabet with lengths uniform in
    ``len_range``; features are the token prototypes plus Gaussian noise with
    the spec's sigma.
    """
    if n_utts < 3:
        raise ValueError("need at least 3 utterances for 3 splits")
    lo, hi = len_range
    rng = np.random.default_rng(split_seed)
    utts = []
    for i in range(n_utts):
        n_tok = int(rng.integers(lo, hi + 1))
        toks = rng.integers(0, spec.alphabet_size, size=n_tok)
        # keep the sequence CTC-feasible after downstream 2x subsampling
        max_frames = math.ceil(spec.frames_per_token * n_tok / 2)
        while n_tok + _repeats(toks) > max_frames:
            toks = rng.integers(0, spec.alphabet_size, size=n_tok)
        feats = spec.prototypes[toks].reshape(-1, spec.feature_dim)
        if spec.noise:
            feats = feats + spec.noise * rng.normal(size=feats.shape)
        utts.append(Utterance(f"{spec.lang_id}-{i:04d}", feats,
                              [int(t) + FIRST_TOKEN for t in toks]))
    n_train = max(1, int(round(split_fracs[0] * n_utts)))
    n_valid = max(1, int(round(split_fracs[1] * n_utts)))
    n_valid = min(n_valid, n_utts - n_train - 1)
    train = TaskBatch(utts[:n_train])
    valid = TaskBatch(utts[n_train:n_train + n_valid])
    test = TaskBatch(utts[n_train + n_valid:])
    return train, valid, test


def _repeats(toks):
    return int(sum(1 for a, b in zip(toks, toks[1:]) if a == b))


def weighted_average(metric_per_language, test_sizes):
    if len(metric_per_language) != len(test_sizes):
        raise ValueError("metric and size lists differ in length")
    if any(s <= 0 for s in test_sizes):
        raise ValueError("test sizes must be positive")
    total = sum(test_sizes)
    return sum(m * s for m, s in zip(metric_per_language, test_sizes)) / total


# ---------------------------------------------------------------------------
# On-disk corpus
#
# One directory per language: spec.json plus one binary file per split.
# Record layout (little-endian):
#   u32 id_len | id utf-8 | u32 frames | u32 feat_dim |
#   frames*feat_dim float64 | u32 n_tokens | n_tokens u32
# ---------------------------------------------------------------------------


def save_split(path, batch: TaskBatch):
    with open(path, "wb") as fh:
        for u in batch:
            bid = u.utt_id.encode()
            fh.write(struct.pack("<I", len(bid)))
            fh.write(bid)
            frames, fd = u.feats.shape
            fh.write(struct.pack("<II", frames, fd))
            fh.write(np.ascontiguousarray(u.feats, dtype="<f8").tobytes())
            fh.write(struct.pack("<I", len(u.tokens)))
            fh.write(struct.pack(f"<{len(u.tokens)}I", *u.tokens))


def load_split(path):
    batch = TaskBatch()
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0
    while off < len(data):
        (idlen,) = struct.unpack_from("<I", data, off)
        off += 4
        utt_id = data[off:off + idlen].decode()
        off += idlen
        frames, fd = struct.unpack_from("<II", data, off)
        off += 8
        feats = np.frombuffer(data, dtype="<f8", count=frames * fd,
                              offset=off).reshape(frames, fd).astype(np.float64)
        off += frames * fd * 8
        (ntok,) = struct.unpack_from("<I", data, off)
        off += 4
        toks = list(struct.unpack_from(f"<{ntok}I", data, off))
        off += 4 * ntok
        batch.append(Utterance(utt_id, feats, toks))
    return batch


def save_language(root_dir, spec: LanguageSpec, splits):
    lang_dir = os.path.join(root_dir, spec.lang_id)
    os.makedirs(lang_dir, exist_ok=True)
    with open(os.path.join(lang_dir, "spec.json"), "w") as fh:
        json.dump(spec.to_json(), fh)
    for name, batch in zip(("train", "valid", "test"), splits):
        save_split(os.path.join(lang_dir, f"{name}.bin"), batch)


def load_language(root_dir, lang_id):
    lang_dir = os.path.join(root_dir, lang_id)
    with open(os.path.join(lang_dir, "spec.json")) as fh:
        spec = LanguageSpec.from_json(json.load(fh))
    splits = tuple(load_split(os.path.join(lang_dir, f"{name}.bin"))
                   for name in ("train", "valid", "test"))
    return spec, splits
