"""Miniature encoder-decoder transformer with CTC head and attention decoder.

Training uses the weighted joint objective (1-lambda)*L_att + lambda*L_ctc;
decoding is beam search over the attention decoder with on-the-fly CTC prefix
rescoring of each hypothesis. Per-language output heads (decoder projection
and CTC projection) live in their own parameter partitions so the backbone can
stay frozen during adaptation.

Everything runs one utterance at a time on 2-D tensors; batches are Python
loops. That keeps the gradient path trivially auditable at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_ZERO, Tensor
from .params import ParamSet
from .synthtasks import BLANK, EOS, FIRST_TOKEN, SOS


@dataclass
class BackboneConfig:
    vocab_size: int
    num_encoder_layers: int = 4
    num_decoder_layers: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    num_heads: int = 2
    feature_dim: int = 8
    subsample_factor: int = 2
    subsample_kernel: int = 3
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.vocab_size <= FIRST_TOKEN:
            raise ValueError("vocab must include blank/sos/eos plus real tokens")


def hook_sites(cfg: BackboneConfig):
    """Adapter/fusion attachment points: after each layer's feed-forward."""
    return ([("enc", i) for i in range(cfg.num_encoder_layers)]
            + [("dec", i) for i in range(cfg.num_decoder_layers)])


def _init(rng, shape, scale=None):
    if scale is None:
        scale = 1.0 / math.sqrt(shape[0])
    return rng.normal(scale=scale, size=shape)


def build_backbone(cfg: BackboneConfig, seed=0, params: ParamSet | None = None):
    """Allocate backbone parameters into the ``backbone`` partition."""
    ps = params if params is not None else ParamSet()
    rng = np.random.default_rng(seed)
    d, ff = cfg.model_dim, cfg.ff_dim
    k = cfg.subsample_kernel

    ps.add("backbone.sub.w", _init(rng, (k * cfg.feature_dim, d)), "backbone")
    ps.add("backbone.sub.b", np.zeros(d), "backbone")
    ps.add("backbone.tok_emb", _init(rng, (cfg.vocab_size, d), scale=0.5),
           "backbone")

    def attn_block(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            ps.add(f"{prefix}.{w}", _init(rng, (d, d)), "backbone")

    def ff_block(prefix):
        ps.add(f"{prefix}.w1", _init(rng, (d, ff)), "backbone")
        ps.add(f"{prefix}.b1", np.zeros(ff), "backbone")
        ps.add(f"{prefix}.w2", _init(rng, (ff, d)), "backbone")
        ps.add(f"{prefix}.b2", np.zeros(d), "backbone")

    def ln(prefix):
        ps.add(f"{prefix}.g", np.ones(d), "backbone")
        ps.add(f"{prefix}.b", np.zeros(d), "backbone")

    for i in range(cfg.num_encoder_layers):
        p = f"backbone.enc{i}"
        attn_block(f"{p}.attn")
        ff_block(f"{p}.ff")
        ln(f"{p}.ln1")
        ln(f"{p}.ln2")
    for i in range(cfg.num_decoder_layers):
        p = f"backbone.dec{i}"
        attn_block(f"{p}.self")
        attn_block(f"{p}.cross")
        ff_block(f"{p}.ff")
        ln(f"{p}.ln1")
        ln(f"{p}.ln2")
        ln(f"{p}.ln3")
    return ps


def add_head(ps: ParamSet, cfg: BackboneConfig, lang, seed=0):
    """Per-language decoder and CTC output projections."""
    rng = np.random.default_rng(seed)
    d, v = cfg.model_dim, cfg.vocab_size
    part = f"head:{lang}"
    ps.add(f"head:{lang}.dec.w", _init(rng, (d, v)), part)
    ps.add(f"head:{lang}.dec.b", np.zeros(v), part)
    ps.add(f"head:{lang}.ctc.w", _init(rng, (d, v)), part)
    ps.add(f"head:{lang}.ctc.b", np.zeros(v), part)


_PE_CACHE = {}


def _posenc(length, dim):
    key = (length, dim)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(length)[:, None]
        i = np.arange(dim // 2)[None, :]
        angle = pos / np.power(10000.0, 2 * i / dim)
        pe = np.zeros((length, dim))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        _PE_CACHE[key] = pe
    return pe


class Backbone:
    """Forward passes over a ParamSet; holds no mutable state of its own."""

    def __init__(self, cfg: BackboneConfig, params: ParamSet):
        self.cfg = cfg
        self.params = params

    # -- building blocks ---------------------------------------------------
    def _ln(self, x, prefix):
        p = self.params
        return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"],
                             eps=self.cfg.ln_eps)

    def _mha(self, x_q, x_kv, prefix, causal=False):
        p, cfg = self.params, self.cfg
        d, nh = cfg.model_dim, cfg.num_heads
        dh = d // nh
        q = ad.matmul(x_q, p[f"{prefix}.wq"])
        k = ad.matmul(x_kv, p[f"{prefix}.wk"])
        v = ad.matmul(x_kv, p[f"{prefix}.wv"])
        mask = None
        if causal:
            tq = x_q.shape[0]
            mask = Tensor(np.triu(np.full((tq, tq), LOG_ZERO), k=1))
        heads = []
        for h in range(nh):
            qh = ad.slice_axis(q, 1, h * dh, (h + 1) * dh)
            kh = ad.slice_axis(k, 1, h * dh, (h + 1) * dh)
            vh = ad.slice_axis(v, 1, h * dh, (h + 1) * dh)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
            if mask is not None:
                scores = ad.add(scores, mask)
            heads.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
        return ad.matmul(ad.concat(heads, axis=1), p[f"{prefix}.wo"])

    def _ff(self, x, prefix):
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _subsample(self, feats):
        cfg = self.cfg
        t = feats.shape[0]
        k, s = cfg.subsample_kernel, cfg.subsample_factor
        t_out = math.ceil(t / s)
        pad = max(0, (t_out - 1) * s + k - 1 - t)  # left pad 1, right pad rest
        padded = np.pad(np.asarray(feats, dtype=np.float64), ((1, pad), (0, 0)))
        windows = np.stack([padded[i * s: i * s + k].reshape(-1)
                            for i in range(t_out)])
        p = self.params
        return ad.relu(ad.add(ad.matmul(Tensor(windows), p["backbone.sub.w"]),
                              p["backbone.sub.b"]))

    # -- encoder / decoder -------------------------------------------------
    def encode(self, feats, hooks=None):
        """Subsample then run the encoder stack; hooks fire after each FF."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValueError("encode: empty or malformed feature sequence")
        if feats.shape[1] != self.cfg.feature_dim:
            raise ad.ShapeError(
                f"encode: feature dim {feats.shape[1]} != {self.cfg.feature_dim}")
        x = self._subsample(feats)
        x = ad.add(x, Tensor(_posenc(x.shape[0], self.cfg.model_dim)))
        for i in range(self.cfg.num_encoder_layers):
            p = f"backbone.enc{i}"
            x = self._ln(ad.add(x, self._mha(x, x, f"{p}.attn")), f"{p}.ln1")
            x = self._ln(ad.add(x, self._ff(x, f"{p}.ff")), f"{p}.ln2")
            if hooks is not None:
                x = hooks.apply(("enc", i), x)
        return x

    def decode_states(self, enc, tokens_in, hooks=None):
        """Teacher-forced decoder states for an sos-prefixed token sequence."""
        emb = ad.embedding_lookup(self.params["backbone.tok_emb"],
                                  np.asarray(tokens_in, dtype=np.int64))
        x = ad.add(emb, Tensor(_posenc(len(tokens_in), self.cfg.model_dim)))
        for i in range(self.cfg.num_decoder_layers):
            p = f"backbone.dec{i}"
            x = self._ln(ad.add(x, self._mha(x, x, f"{p}.self", causal=True)),
                         f"{p}.ln1")
            x = self._ln(ad.add(x, self._mha(x, enc, f"{p}.cross")), f"{p}.ln2")
            x = self._ln(ad.add(x, self._ff(x, f"{p}.ff")), f"{p}.ln3")
            if hooks is not None:
                x = hooks.apply(("dec", i), x)
        return x

    def decoder_logits(self, enc, tokens_in, lang, hooks=None):
        x = self.decode_states(enc, tokens_in, hooks)
        p = self.params
        return ad.add(ad.matmul(x, p[f"head:{lang}.dec.w"]),
                      p[f"head:{lang}.dec.b"])

    def ctc_log_probs(self, enc, lang):
        p = self.params
        logits = ad.add(ad.matmul(enc, p[f"head:{lang}.ctc.w"]),
                        p[f"head:{lang}.ctc.b"])
        return ad.log_softmax(logits, axis=-1)

    # -- losses ------------------------------------------------------------
    def att_loss(self, enc, tokens, lang, hooks=None):
        """Teacher-forced cross entropy over sos-prefixed, eos-suffixed targets."""
        tokens_in = [SOS] + list(tokens)
        targets = list(tokens) + [EOS]
        lp = ad.log_softmax(self.decoder_logits(enc, tokens_in, lang, hooks),
                            axis=-1)
        n, v = lp.shape
        flat = ad.reshape(lp, (n * v, 1))
        idx = np.arange(n) * v + np.asarray(targets)
        picked = ad.take_rows(flat, idx)
        return ad.neg(ad.mean(picked))

    def asr_loss(self, batch, lang, lam, hooks=None):
        """Joint loss (1-lam)*L_att + lam*L_ctc, averaged over the batch.

        Returns (total, l_att, l_ctc); the sub-losses are exposed for logging.
        """
        if not 0.0 <= lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        att_terms, ctc_terms = [], []
        for u in batch:
            if not u.tokens:
                raise ValueError(f"empty target in {u.utt_id}")
            enc = self.encode(u.feats, hooks)
            att_terms.append(self.att_loss(enc, u.tokens, lang, hooks))
            try:
                ctc_terms.append(ctc_loss(self.ctc_log_probs(enc, lang),
                                          u.tokens))
            except ValueError as err:
                raise ValueError(f"{u.utt_id}: {err}") from None
        l_att = ad.mean(ad.concat([ad.reshape(t, (1,)) for t in att_terms]))
        l_ctc = ad.mean(ad.concat([ad.reshape(t, (1,)) for t in ctc_terms]))
        total = ad.add(ad.mul(l_att, 1.0 - lam), ad.mul(l_ctc, lam))
        return total, l_att, l_ctc

    # -- decoding ----------------------------------------------------------
    def joint_decode(self, feats, lang, lam, beam=4, max_len=None, hooks=None):
        """Beam search maximizing (1-lam)*logP_att + lam*logP_ctc.

        Hypotheses are pruned on an admissible score (CTC prefix probability
        upper-bounds any completion), so with a beam covering the hypothesis
        space the result is the exhaustive argmax.
        """
        if beam < 1:
            raise ValueError("beam must be >= 1")
        with ad.no_grad():
            enc = self.encode(feats, hooks)
            ctc_lp = self.ctc_log_probs(enc, lang).data
            t_out = enc.shape[0]
            if max_len is None:
                max_len = t_out
            real_tokens = list(range(FIRST_TOKEN, self.cfg.vocab_size))
            active = [((), 0.0)]  # (tokens, att log prob)
            best_final = (None, -np.inf)
            for _ in range(max_len + 1):
                if not active:
                    break
                cands = []
                for toks, att in active:
                    lp = ad.log_softmax(
                        self.decoder_logits(enc, [SOS] + list(toks), lang,
                                            hooks), axis=-1).data[-1]
                    # finishing this hypothesis scores the full CTC probability
                    final = ((1 - lam) * (att + lp[EOS])
                             + lam * ctc_full_logprob(ctc_lp, toks))
                    if final > best_final[1]:
                        best_final = (list(toks), final)
                    if len(toks) >= max_len:
                        continue
                    for c in real_tokens:
                        new = toks + (c,)
                        score = ((1 - lam) * (att + lp[c])
                                 + lam * ctc_prefix_logprob(ctc_lp, new))
                        cands.append((score, new, att + lp[c]))
                cands.sort(key=lambda c: (-c[0], c[1]))
                active = [(toks, att) for score, toks, att in cands[:beam]
                          if score > best_final[1]]
            return best_final


def ctc_loss(log_probs, target):
    """Negative log total alignment probability (forward algorithm, taped).

    ``log_probs`` is a (frames, vocab) tensor of log-distributions; ``target``
    a sequence of non-blank token ids.
    """
    t_frames = log_probs.shape[0]
    y = list(target)
    if not y:
        return ad.neg(ad.tsum(ad.slice_axis(log_probs, 1, BLANK, BLANK + 1)))
    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
    if len(y) + repeats > t_frames:
        raise ValueError(
            f"target needs {len(y) + repeats} frames but only {t_frames} available")
    ext = [BLANK]
    for tok in y:
        ext += [tok, BLANK]
    s = len(ext)
    ext_idx = np.asarray(ext, dtype=np.int64)
    # mask allowing the skip transition ext[i-2] -> ext[i]
    skip_ok = np.full(s, LOG_ZERO)
    for i in range(2, s):
        if ext[i] != BLANK and ext[i] != ext[i - 2]:
            skip_ok[i] = 0.0
    skip_mask = Tensor(skip_ok)
    neg_one = Tensor(np.full(1, LOG_ZERO))

    def row_ext(t):
        row = ad.reshape(ad.slice_axis(log_probs, 0, t, t + 1), (log_probs.shape[1], 1))
        return ad.reshape(ad.take_rows(row, ext_idx), (s,))

    init = np.full(s, LOG_ZERO)
    init[0] = 0.0
    if s > 1:
        init[1] = 0.0
    alpha = ad.add(row_ext(0), Tensor(init))
    for t in range(1, t_frames):
        stay = alpha
        shift1 = ad.concat([neg_one, ad.slice_axis(alpha, 0, 0, s - 1)])
        shift2 = ad.concat([neg_one, neg_one, ad.slice_axis(alpha, 0, 0, s - 2)]) \
            if s > 1 else None
        acc = ad.logaddexp(stay, shift1)
        if shift2 is not None:
            acc = ad.logaddexp(acc, ad.add(shift2, skip_mask))
        alpha = ad.add(acc, row_ext(t))
    tail = ad.slice_axis(alpha, 0, s - 2, s) if s > 1 else alpha
    return ad.neg(ad.logsumexp(tail, axis=0))


def _np_logaddexp(a, b):
    return np.logaddexp(np.maximum(a, LOG_ZERO), np.maximum(b, LOG_ZERO))


def ctc_full_logprob(lp, y):
    """log P(CTC emits exactly y); plain numpy, for decoding."""
    y = list(y)
    if not y:
        return float(lp[:, BLANK].sum())
    ext = [BLANK]
    for tok in y:
        ext += [tok, BLANK]
    s = len(ext)
    alpha = np.full(s, LOG_ZERO)
    alpha[0] = lp[0, BLANK]
    alpha[1] = lp[0, ext[1]]
    for t in range(1, lp.shape[0]):
        prev = alpha
        alpha = prev.copy()
        alpha[1:] = _np_logaddexp(alpha[1:], prev[:-1])
        for i in range(2, s):
            if ext[i] != BLANK and ext[i] != ext[i - 2]:
                alpha[i] = _np_logaddexp(alpha[i], prev[i - 2])
        alpha = alpha + lp[t, ext]
    return float(_np_logaddexp(alpha[-1], alpha[-2]))


def ctc_prefix_logprob(lp, y):
    """log P(collapsed CTC output starts with y); plain numpy.

    Runs the forward recursion over the blank-augmented proper prefix and
    accumulates the mass that newly completes the final label at each frame;
    once completed, all continuations are admissible so their mass is 1.
    """
    y = list(y)
    if not y:
        return 0.0
    g, c = y[:-1], y[-1]
    ext = [BLANK]
    for tok in g:
        ext += [tok, BLANK]
    s = len(ext)
    # virtual blank frame before t=0 so "nothing emitted yet" is state 0
    alpha = np.full(s, LOG_ZERO)
    alpha[0] = 0.0
    psi = LOG_ZERO
    for t in range(lp.shape[0]):
        enter = alpha[s - 1]
        if g and g[-1] != c:
            enter = _np_logaddexp(enter, alpha[s - 2])
        psi = _np_logaddexp(psi, enter + lp[t, c])
        prev = alpha
        alpha = prev.copy()
        if s > 1:
            alpha[1:] = _np_logaddexp(alpha[1:], prev[:-1])
        for i in range(2, s):
            if ext[i] != BLANK and ext[i] != ext[i - 2]:
                alpha[i] = _np_logaddexp(alpha[i], prev[i - 2])
        alpha = alpha + lp[t, ext]
    return float(psi)


def token_error_rate(hyp, ref):
    """Levenshtein distance between token sequences divided by |ref|."""
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise ValueError("reference must be nonempty")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)
