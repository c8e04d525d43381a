"""Residual bottleneck adapters and the trainable-parameter accounting.

Each adapter is z + W_u * ReLU(W_d * LN(z)) applied position-wise, one per
hook site per language. W_u starts at zero so freshly inserted adapters are an
exact identity; W_d gets small uniform noise so gradients are nonzero from the
first step.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .backbone import BackboneConfig, hook_sites
from .params import ParamSet

DEFAULT_BOTTLENECK = 8


def _site_name(site):
    return f"{site[0]}{site[1]}"


def adapter_param_prefix(lang, site):
    return f"adapter:{lang}.{_site_name(site)}"


def add_adapter_stack(ps: ParamSet, cfg: BackboneConfig, lang,
                      bottleneck=DEFAULT_BOTTLENECK, seed=0):
    """One adapter per hook site, all in partition ``adapter:<lang>``."""
    rng = np.random.default_rng(seed)
    d = cfg.model_dim
    part = f"adapter:{lang}"
    for site in hook_sites(cfg):
        p = adapter_param_prefix(lang, site)
        ps.add(f"{p}.wd", rng.uniform(-0.05, 0.05, size=(d, bottleneck)), part)
        ps.add(f"{p}.wu", np.zeros((bottleneck, d)), part)
        ps.add(f"{p}.ln.g", np.ones(d), part)
        ps.add(f"{p}.ln.b", np.zeros(d), part)


def adapter_forward(ps: ParamSet, lang, site, z, ln_eps=1e-5):
    """z + W_u.ReLU(W_d.LN(z)), position-wise over the last axis."""
    p = adapter_param_prefix(lang, site)
    if z.shape[-1] != ps[f"{p}.wd"].shape[0]:
        raise ad.ShapeError(
            f"adapter_forward: input dim {z.shape[-1]} != "
            f"{ps[f'{p}.wd'].shape[0]}")
    h = ad.layer_norm(z, ps[f"{p}.ln.g"], ps[f"{p}.ln.b"], eps=ln_eps)
    h = ad.relu(ad.matmul(h, ps[f"{p}.wd"]))
    return ad.add(z, ad.matmul(h, ps[f"{p}.wu"]))


class AdapterHooks:
    """Backbone hook object routing every site through one language's stack."""

    def __init__(self, ps: ParamSet, lang, ln_eps=1e-5):
        self.ps = ps
        self.lang = lang
        self.ln_eps = ln_eps

    def apply(self, site, z):
        return adapter_forward(self.ps, self.lang, site, z, self.ln_eps)


def count_trainable(partitions, active):
    """Exact per-partition trainable counts plus ratio to the full model."""
    return partitions.count_trainable(active)
