"""Stage-wise training loops and the three-stage fusion pipeline.

Stages train exactly one declared set of partitions; everything else is frozen
and the harness audits that bitwise. Early stopping tracks validation loss
with a configurable patience and restores the best trainable snapshot.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapters import AdapterHooks
from .autodiff import Tape
from .backbone import Backbone, token_error_rate
from .fusion import FusionHooks, total_loss
from .params import Adam, SGD


@dataclass
class TrainSettings:
    steps: int = 100
    lr: float = 0.003
    batch_size: int = 4
    lam: float = 0.3
    optimizer: str = "adam"
    weight_decay: float = 0.0
    patience: int = 10  # early-stop patience in evaluations; 0 disables
    eval_every: int = 10
    warmup_steps: int = 5
    seed: int = 0


def _minibatches(batch, size, rng):
    while True:
        order = rng.permutation(len(batch))
        for i in range(0, len(order), size):
            yield [batch[j] for j in order[i:i + size]]


def train_stage(model: Backbone, train_batch, valid_batch, partitions,
                settings: TrainSettings, loss_fn, valid_loss_fn=None):
    """Optimize ``partitions`` only; returns (log, per-step wall ms).

    ``loss_fn(minibatch)`` must return a scalar Tensor built against
    ``model.params``. Early stopping uses ``valid_loss_fn`` (defaults to
    ``loss_fn`` on the validation batch) and restores the best snapshot.
    """
    ps = model.params
    ps.freeze_all_except(*partitions)
    opt_cls = {"adam": Adam, "sgd": SGD}[settings.optimizer]
    opt = opt_cls(ps, settings.lr, weight_decay=settings.weight_decay)
    rng = np.random.default_rng(settings.seed)
    batches = _minibatches(train_batch, settings.batch_size, rng)
    vfn = valid_loss_fn or (lambda: loss_fn(valid_batch))

    best = (np.inf, None)
    bad_evals = 0
    log = []
    t_total = 0.0
    steps_done = 0
    for step in range(settings.steps):
        if settings.warmup_steps and step < settings.warmup_steps:
            opt.lr = settings.lr * (step + 1) / settings.warmup_steps
        else:
            opt.lr = settings.lr
        mb = next(batches)
        t0 = time.perf_counter()
        ps.zero_grad()
        with Tape():
            loss = loss_fn(mb)
            ad.backward(loss)
        opt.step()
        t_total += time.perf_counter() - t0
        steps_done += 1
        if valid_batch and settings.eval_every and \
                (step + 1) % settings.eval_every == 0:
            with ad.no_grad(), Tape():
                vloss = vfn().item()
            log.append({"step": step + 1, "train_loss": loss.item(),
                        "valid_loss": vloss})
            if vloss < best[0] - 1e-12:
                best = (vloss, ps.snapshot_trainable())
                bad_evals = 0
            else:
                bad_evals += 1
                if settings.patience and bad_evals >= settings.patience:
                    break
    if best[1] is not None:
        for name, data in best[1].items():
            ps[name].data[...] = data
    per_step_ms = 1000.0 * t_total / max(steps_done, 1)
    return log, per_step_ms


def asr_loss_fn(model, lang, lam, hooks=None):
    return lambda mb: model.asr_loss(mb, lang, lam, hooks)[0]


def fusion_loss_fn(model, lang, hooks, lam, eta, gamma):
    return lambda mb: total_loss(model, mb, lang, hooks, lam, eta, gamma)[0]


def evaluate(model: Backbone, batch, lang, lam, beam=4, hooks=None):
    """Decode a batch; returns (mean TER, per-utterance records, ms/utt)."""
    records = []
    t0 = time.perf_counter()
    for u in batch:
        hyp, score = model.joint_decode(u.feats, lang, lam, beam=beam,
                                        hooks=hooks)
        ter = token_error_rate(hyp or [], u.tokens)
        records.append({"utt_id": u.utt_id, "ref": list(u.tokens),
                        "hyp": list(hyp or []), "score": score, "ter": ter})
    ms_per_utt = 1000.0 * (time.perf_counter() - t0) / max(len(batch), 1)
    mean_ter = float(np.mean([r["ter"] for r in records])) if records else 0.0
    return mean_ter, records, ms_per_utt


def train_heads(model, lang_data, settings: TrainSettings, langs=None):
    """Stage 1: language-specific heads, one at a time, all else frozen."""
    langs = langs if langs is not None else sorted(lang_data)
    out = {}
    for lang in langs:
        train, valid, _ = lang_data[lang]
        s = TrainSettings(**{**settings.__dict__,
                             "seed": settings.seed + zlib.crc32(lang.encode()) % 1000})
        out[lang] = train_stage(model, train, valid, [f"head:{lang}"], s,
                                asr_loss_fn(model, lang, s.lam))
    return out


def train_adapter(model, lang, train, valid, settings: TrainSettings,
                  adapter_lang=None):
    """Stage 2: one language's adapter stack, heads and backbone frozen."""
    adapter_lang = adapter_lang or lang
    hooks = AdapterHooks(model.params, adapter_lang, model.cfg.ln_eps)
    return train_stage(model, train, valid, [f"adapter:{adapter_lang}"],
                       settings, asr_loss_fn(model, lang, settings.lam, hooks))


def train_fusion(model, target_lang, train, valid, hooks: FusionHooks,
                 settings: TrainSettings, eta=0.01, gamma=1.0):
    """Stage 3: fusion layers only."""
    loss = fusion_loss_fn(model, target_lang, hooks, settings.lam, eta, gamma)
    return train_stage(model, train, valid, ["fusion"], settings, loss)
