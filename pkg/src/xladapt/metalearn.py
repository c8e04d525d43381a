"""MAML-style pre-training of a shared adapter stack over source languages.

The inner iteration adapts the trainable parameters by gradient descent on an
episode's meta-train split; the outer iteration descends the meta-validation
loss of the adapted parameters, summed over episodes, with a step size that
anneals linearly to zero.

Losses are plain closures over a read-only parameter view, so the inner update
never mutates its inputs: adapted parameters live in a :class:`ParamView`
overlay. With ``order="second"`` the inner step is built from taped ops and
the meta-gradient is exact; ``order="first"`` evaluates the gradient at the
adapted parameters (the usual first-order approximation) and is the default.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .params import ParamSet


@dataclass
class MetaConfig:
    inner_lr: float = 0.028
    meta_step_size: float = 1.0
    epochs: int = 30
    inner_steps: int = 1
    episode_size: int = 16
    order: str = "first"  # or "second"
    inner_opt: str = "sgd"  # or "adam" (beta1=0)
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr <= 0 or self.meta_step_size <= 0:
            raise ValueError("inner_lr and meta_step_size must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.order not in ("first", "second"):
            raise ValueError("order must be 'first' or 'second'")

    def mu_at(self, epoch):
        """Linear anneal: mu_0 at epoch 0, approaching 0 at the last epoch."""
        return self.meta_step_size * (1.0 - epoch / max(self.epochs, 1))


@dataclass
class Episode:
    lang: str
    train_batch: object
    val_batch: object

    def __post_init__(self):
        tr = {u.utt_id for u in self.train_batch}
        va = {u.utt_id for u in self.val_batch}
        if tr & va:
            raise ValueError(f"episode splits overlap: {sorted(tr & va)}")


class ParamView:
    """Read-only ParamSet facade with an override layer for adapted values."""

    def __init__(self, base: ParamSet, overrides=None):
        self.base = base
        self.overrides = dict(overrides or {})

    def __getitem__(self, name):
        t = self.overrides.get(name)
        return t if t is not None else self.base[name]

    def __contains__(self, name):
        return name in self.overrides or name in self.base

    def trainable_names(self):
        return self.base.trainable_names()

    def trainable_tensors(self):
        return [self[n] for n in self.base.trainable_names()]

    def with_updates(self, updates):
        merged = dict(self.overrides)
        merged.update(updates)
        return ParamView(self.base, merged)


def _sgd_adapt(view, names, grads, eps, taped):
    updates = {}
    for n, g in zip(names, grads):
        if taped:
            updates[n] = ad.sub(view[n], ad.mul(g, eps))
        else:
            updates[n] = Tensor(view[n].data - eps * g.data, requires_grad=True)
    return view.with_updates(updates)


def inner_update(ps, loss_fn, eps, steps=1, opt="sgd"):
    """Adapted parameters after ``steps`` gradient steps; inputs untouched.

    ``loss_fn`` maps a parameter view to a scalar loss Tensor. Returns a
    ParamView whose overrides hold the adapted values.
    """
    view = ps if isinstance(ps, ParamView) else ParamView(ps)
    names = view.trainable_names()
    adam_v = {n: np.zeros_like(view[n].data) for n in names} if opt == "adam" else None
    for step in range(steps):
        with Tape():
            loss = loss_fn(view)
            if not np.isfinite(loss.data).all():
                raise FloatingPointError("inner_update: non-finite loss")
            grads = ad.grad(loss, [view[n] for n in names])
        if opt == "adam":
            # Adam with beta1=0: no momentum, second-moment rescaled step
            updates = {}
            for n, g in zip(names, grads):
                v = 0.999 * adam_v[n] + 0.001 * g.data * g.data
                adam_v[n] = v
                vhat = v / (1 - 0.999 ** (step + 1))
                updates[n] = Tensor(view[n].data
                                    - eps * g.data / (np.sqrt(vhat) + 1e-8),
                                    requires_grad=True)
            view = view.with_updates(updates)
        else:
            view = _sgd_adapt(view, names, grads, eps, taped=False)
    return view


def meta_step(ps: ParamSet, episodes, train_loss_fn, val_loss_fn, eps, mu,
              order="first", inner_steps=1, inner_opt="sgd"):
    """One outer update over a list of episodes; returns per-episode val losses.

    ``train_loss_fn(view, episode)`` and ``val_loss_fn(view, episode)`` map a
    parameter view and an episode to scalar losses. ``ps`` is updated in
    place by -mu * sum_i grad of the adapted validation loss.
    """
    if not episodes:
        raise ValueError("meta_step: no episodes")
    if mu < 0:
        raise ValueError("meta_step: mu must be >= 0")
    names = ps.trainable_names()
    total = {n: np.zeros_like(ps[n].data) for n in names}
    val_losses = {}
    for ep in episodes:
        if order == "second":
            with Tape():
                view = ParamView(ps)
                for _ in range(inner_steps):
                    loss = train_loss_fn(view, ep)
                    grads = ad.grad(loss, [view[n] for n in names],
                                    create_graph=True)
                    view = _sgd_adapt(view, names, grads, eps, taped=True)
                lv = val_loss_fn(view, ep)
                metas = ad.grad(lv, [ps[n] for n in names])
        else:
            view = inner_update(ParamView(ps),
                                lambda v: train_loss_fn(v, ep),
                                eps, steps=inner_steps, opt=inner_opt)
            with Tape():
                lv = val_loss_fn(view, ep)
                metas = ad.grad(lv, [view[n] for n in names])
        if not np.isfinite(lv.data).all():
            raise FloatingPointError(f"meta_step: non-finite loss in {ep.lang}")
        for n, g in zip(names, metas):
            if not np.isfinite(g.data).all():
                raise FloatingPointError(
                    f"meta_step: non-finite meta-gradient in {ep.lang}")
            total[n] += g.data
        val_losses[ep.lang] = lv.item()
    for n in names:
        ps[n].data -= mu * total[n]
    return val_losses


def sample_episode(lang, train_batch, size, seed, val_frac=0.2):
    """Disjoint 80/20 meta-train/meta-validation split of a language batch."""
    rng = np.random.default_rng(seed)
    size = min(size, len(train_batch))
    idx = rng.choice(len(train_batch), size=size, replace=False)
    n_val = max(1, int(round(val_frac * size)))
    val_idx = set(idx[:n_val].tolist())
    tr = [train_batch[i] for i in idx if i not in val_idx]
    va = [train_batch[i] for i in sorted(val_idx)]
    return Episode(lang, tr, va)


def meta_train(meta_cfg: MetaConfig, ps: ParamSet, sources,
               train_loss_fn, val_loss_fn, log_path=None):
    """Run the full outer loop; returns the per-epoch log.

    ``sources`` is a list of (lang, train_batch). A head parameter for every
    source language must already exist in ``ps``.
    """
    for lang, _ in sources:
        if f"head:{lang}.dec.w" not in ps:
            raise ValueError(f"missing trained head for source language {lang}")
    log = []
    for epoch in range(meta_cfg.epochs):
        mu = meta_cfg.mu_at(epoch)
        episodes = [
            sample_episode(lang, batch, meta_cfg.episode_size,
                           seed=meta_cfg.seed * 100003 + epoch * 131 + i)
            for i, (lang, batch) in enumerate(sources)
        ]
        t0 = time.perf_counter()
        val_losses = meta_step(ps, episodes, train_loss_fn, val_loss_fn,
                               eps=meta_cfg.inner_lr, mu=mu,
                               order=meta_cfg.order,
                               inner_steps=meta_cfg.inner_steps,
                               inner_opt=meta_cfg.inner_opt)
        log.append({"epoch": epoch, "mu": mu,
                    "per_language_val_loss": val_losses,
                    "wall_ms": 1000.0 * (time.perf_counter() - t0)})
    if log_path:
        with open(log_path, "w") as fh:
            for row in log:
                fh.write(json.dumps(row) + "\n")
    return log
