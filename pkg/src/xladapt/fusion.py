"""Attention fusion over per-language adapters, with guide and value losses.

Fusion is position-wise: at each position t the backbone representation z_t is
the query and the N adapter outputs a_{i,t} are keys and values, softmaxed
with a temperature (no 1/sqrt(d) scale). W_V starts at the identity (plus
1e-6 off-diagonal) so a single-language fusion is a near-exact pass-through.

The guide loss is the cross entropy of the target adapter's attention scores,
averaged over positions and samples per layer and summed across layers; the
value-matrix regularizer penalizes squared deviation of W_V from identity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import adapter_forward
from .autodiff import Tensor
from .backbone import BackboneConfig, hook_sites
from .params import ParamSet


@dataclass
class FusionPlan:
    """Which hook sites carry fusion layers and which languages are fused."""
    languages: list  # fused adapter set, e.g. sources + target
    target: str | None  # language whose attention the guide loss rewards
    encoder_layers: list = field(default_factory=list)
    decoder_layers: list = field(default_factory=list)

    @staticmethod
    def full(cfg: BackboneConfig, languages, target):
        return FusionPlan(languages=list(languages), target=target,
                          encoder_layers=list(range(cfg.num_encoder_layers)),
                          decoder_layers=list(range(cfg.num_decoder_layers)))

    def sites(self):
        return ([("enc", i) for i in self.encoder_layers]
                + [("dec", i) for i in self.decoder_layers])

    def has_site(self, site):
        kind, i = site
        return i in (self.encoder_layers if kind == "enc" else self.decoder_layers)


def fusion_param_prefix(site):
    return f"fusion.{site[0]}{site[1]}"


def add_fusion_layers(ps: ParamSet, cfg: BackboneConfig, plan: FusionPlan,
                      seed=0, off_diag=1e-6):
    rng = np.random.default_rng(seed)
    d = cfg.model_dim
    wv_init = np.full((d, d), off_diag)
    np.fill_diagonal(wv_init, 1.0)
    for site in plan.sites():
        p = fusion_param_prefix(site)
        ps.add(f"{p}.wq", rng.normal(scale=0.05, size=(d, d)), "fusion")
        ps.add(f"{p}.wk", rng.normal(scale=0.05, size=(d, d)), "fusion")
        ps.add(f"{p}.wv", wv_init.copy(), "fusion")


def simadapter_forward(z, adapter_outputs, wq, wk, wv, tau=1.0):
    """Fuse adapter outputs by attention from z; returns (output, alpha).

    ``alpha`` is the (positions, languages) attention matrix, also available
    as a taped tensor so the guide loss can differentiate through it.
    """
    if not adapter_outputs:
        raise ValueError("simadapter_forward: no adapter outputs to fuse")
    for i, a in enumerate(adapter_outputs):
        if a.shape != z.shape:
            raise ad.ShapeError(
                f"simadapter_forward: adapter {i} shape {a.shape} != {z.shape}")
    q = ad.matmul(z, wq)
    cols = []
    for a in adapter_outputs:
        k = ad.matmul(a, wk)
        cols.append(ad.tsum(ad.mul(q, k), axis=1, keepdims=True))
    logits = ad.mul(ad.concat(cols, axis=1), 1.0 / tau)
    alpha = ad.softmax(logits, axis=-1)
    out = None
    for i, a in enumerate(adapter_outputs):
        term = ad.mul(ad.slice_axis(alpha, 1, i, i + 1), ad.matmul(a, wv))
        out = term if out is None else ad.add(out, term)
    return out, alpha


class FusionHooks:
    """Backbone hooks running adapter fusion at planned sites.

    At sites outside the plan the target language's adapter (when fused)
    applies alone. Attention is captured per forward pass: detached means for
    export plus, when the plan has a target, taped per-sample log-alpha means
    for the guide loss.
    """

    def __init__(self, ps: ParamSet, cfg: BackboneConfig, plan: FusionPlan,
                 tau=1.0, ln_eps=1e-5):
        self.ps = ps
        self.cfg = cfg
        self.plan = plan
        self.tau = tau
        self.ln_eps = ln_eps
        self.reset_capture()

    def reset_capture(self):
        self.alpha_capture = {site: [] for site in self.plan.sites()}
        self.guide_terms = {site: [] for site in self.plan.sites()}

    def apply(self, site, z):
        plan = self.plan
        if not plan.has_site(site):
            if plan.target is not None and plan.target in plan.languages:
                return adapter_forward(self.ps, plan.target, site, z,
                                       self.ln_eps)
            return z
        outs = [adapter_forward(self.ps, lang, site, z, self.ln_eps)
                for lang in plan.languages]
        p = fusion_param_prefix(site)
        out, alpha = simadapter_forward(z, outs, self.ps[f"{p}.wq"],
                                        self.ps[f"{p}.wk"], self.ps[f"{p}.wv"],
                                        self.tau)
        self.alpha_capture[site].append(alpha.data.copy())
        if plan.target is not None:
            t_idx = plan.languages.index(plan.target)
            log_a = ad.log(ad.slice_axis(alpha, 1, t_idx, t_idx + 1))
            self.guide_terms[site].append(ad.mean(log_a))
        return out


def reg_loss(wv):
    """Squared Frobenius distance of the value matrix from identity."""
    d0, d1 = wv.shape
    if d0 != d1:
        raise ad.ShapeError(f"reg_loss: W_V must be square, got {wv.shape}")
    diff = ad.sub(Tensor(np.eye(d0)), wv)
    return ad.tsum(ad.mul(diff, diff))


def total_reg_loss(ps: ParamSet, plan: FusionPlan):
    terms = [reg_loss(ps[f"{fusion_param_prefix(site)}.wv"])
             for site in plan.sites()]
    return ad.tsum(ad.concat([ad.reshape(t, (1,)) for t in terms]))


def guide_loss(hooks: FusionHooks):
    """Cross entropy of the target adapter's attention, summed over layers.

    Each layer contributes the negative mean of log alpha_target over all
    positions and samples captured since the last ``reset_capture``.
    """
    plan = hooks.plan
    if plan.target is None or plan.target not in plan.languages:
        raise ValueError("guide_loss: target language is not in the fused set")
    layer_terms = []
    for site in plan.sites():
        terms = hooks.guide_terms[site]
        if not terms:
            raise ValueError("guide_loss: no captured attention; run a forward "
                             "pass with fusion hooks first")
        stacked = ad.concat([ad.reshape(t, (1,)) for t in terms])
        layer_terms.append(ad.neg(ad.mean(stacked)))
    return ad.tsum(ad.concat([ad.reshape(t, (1,)) for t in layer_terms]))


def total_loss(model, batch, lang, hooks: FusionHooks, lam, eta=0.01,
               gamma=1.0):
    """L_asr + eta*L_reg + gamma*L_guide for one batch under fusion hooks."""
    if eta < 0 or gamma < 0:
        raise ValueError("loss weights must be nonnegative")
    hooks.reset_capture()
    asr, l_att, l_ctc = model.asr_loss(batch, lang, lam, hooks)
    total = asr
    l_reg = total_reg_loss(model.params, hooks.plan)
    if eta:
        total = ad.add(total, ad.mul(l_reg, eta))
    l_guide = guide_loss(hooks) if hooks.plan.target is not None else None
    if gamma and l_guide is not None:
        total = ad.add(total, ad.mul(l_guide, gamma))
    return total, {"asr": asr.item(), "att": l_att.item(), "ctc": l_ctc.item(),
                   "reg": l_reg.item(),
                   "guide": l_guide.item() if l_guide is not None else 0.0}


def mean_attention(model, batch, lang, hooks: FusionHooks, teacher_force=True):
    """Dataset-mean attention score per (site, language)."""
    hooks.reset_capture()
    with ad.no_grad():
        for u in batch:
            enc = model.encode(u.feats, hooks)
            if teacher_force:
                from .synthtasks import SOS
                model.decode_states(enc, [SOS] + list(u.tokens), hooks)
    means = {}
    for site in hooks.plan.sites():
        caps = hooks.alpha_capture[site]
        if caps:
            stacked = np.concatenate(caps, axis=0)
            means[site] = stacked.mean(axis=0)  # (languages,)
    return means


def export_attention(model, batch, lang, hooks: FusionHooks, path):
    """CSV of dataset-mean attention: one row per fused language, one column
    per fusion site ordered encoder-then-decoder."""
    means = mean_attention(model, batch, lang, hooks)
    sites = hooks.plan.sites()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["language"] + [f"layer_{i}" for i in range(len(sites))])
        for li, fused_lang in enumerate(hooks.plan.languages):
            writer.writerow([fused_lang]
                            + [f"{means[site][li]:.10f}" for site in sites])
    return means
