"""Experiment orchestration: config, strategy runner, sweeps, time report.

A run is fully determined by (config, seed): corpus generation, backbone
pre-training, and every adaptation stage are seeded, and shared artifacts
(backbone, source heads, source adapters, meta-trained adapter) are cached on
disk per seed so strategies can be compared on identical prerequisites.

Every strategy declares its trainable partitions; at run end the harness
audits bitwise that nothing else changed and embeds the audit in the report.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterHooks, add_adapter_stack
from .autodiff import Tape, backward, no_grad
from .backbone import Backbone, BackboneConfig
from .fusion import FusionHooks, FusionPlan, add_fusion_layers, mean_attention
from .metalearn import MetaConfig, meta_train
from .params import Adam, ParamSet
from .pipeline import (TrainSettings, asr_loss_fn, evaluate, train_adapter,
                       train_fusion, train_stage)
from .synthtasks import (generate_language, sample_corpus, save_language,
                         weighted_average)

STRATEGIES = ("head", "full_ft", "full_ft_l2", "part_ft", "adapter",
              "meta_adapter", "simadapter", "simadapter_plus")

TARGET = "tgt"

# Published full-scale reference deltas for context in time reports:
# meta-initialized adapter training time vs full fine-tuning, and fusion
# decoding real-time-factor overhead.
REFERENCE_TIME_DELTAS = {
    "meta_adapter_train_time_delta": -0.4348,
    "simadapter_decode_rtf_delta": 0.2212,
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _strict_from_dict(cls, d):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls)
                  if f.name in d})


@dataclass
class CorpusConfig:
    root_seed: int = 7
    alphabet_size: int = 12
    feature_dim: int = 8
    frames_per_token: int = 3
    noise: float = 0.1
    source_deltas: list = field(default_factory=lambda: [0.1, 0.25, 0.4, 0.55, 0.7])
    target_delta: float = 0.3
    # low-resource regime: target corpus 10x smaller than each source
    n_utts_source: int = 100
    n_utts_target: int = 10
    len_range: list = field(default_factory=lambda: [2, 5])
    source_split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    target_split: list = field(default_factory=lambda: [0.5, 0.2, 0.3])


@dataclass
class ModelConfig:
    num_encoder_layers: int = 4
    num_decoder_layers: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    num_heads: int = 2
    subsample_factor: int = 2
    bottleneck_dim: int = 8


@dataclass
class TrainConfig:
    lam: float = 0.3
    eta: float = 0.01
    gamma: float = 1.0
    tau: float = 1.0
    beam: int = 4
    lr: float = 0.003
    pretrain_lr: float = 0.003
    pretrain_steps: int = 300
    head_steps: int = 80
    adapter_steps: int = 120
    fusion_steps: int = 120
    batch_size: int = 4
    patience: int = 10
    eval_every: int = 10
    warmup_steps: int = 5
    l2: float = 1e-4
    optimizer: str = "adam"


@dataclass
class MetaSection:
    inner_lr: float = 0.028
    meta_step_size: float = 1.0
    epochs: int = 30
    inner_steps: int = 1
    episode_size: int = 16
    order: str = "first"
    inner_opt: str = "sgd"


@dataclass
class FusionPlanConfig:
    encoder_layers: list | None = None  # None = all
    decoder_layers: list | None = None
    include_target: bool = True
    source_langs: list | None = None  # None = all sources


@dataclass
class ExperimentConfig:
    strategy: str = "adapter"
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    meta: MetaSection = field(default_factory=MetaSection)
    fusion_plan: FusionPlanConfig = field(default_factory=FusionPlanConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy: {self.strategy}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d):
        d = dict(d)
        for key, cls in (("corpus", CorpusConfig), ("model", ModelConfig),
                         ("train", TrainConfig), ("meta", MetaSection),
                         ("fusion_plan", FusionPlanConfig)):
            if key in d and isinstance(d[key], dict):
                d[key] = _strict_from_dict(cls, d[key])
        return _strict_from_dict(ExperimentConfig, d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @staticmethod
    def load(path):
        with open(path) as fh:
            return ExperimentConfig.from_dict(json.load(fh))

    def replace(self, **kwargs):
        return dataclasses.replace(self, **kwargs)


# ---------------------------------------------------------------------------
# Shared artifacts
# ---------------------------------------------------------------------------


def source_langs(cfg: ExperimentConfig):
    return [f"src{i}" for i in range(len(cfg.corpus.source_deltas))]


def language_specs(cfg: ExperimentConfig):
    c = cfg.corpus
    specs = {}
    for i, delta in enumerate(c.source_deltas):
        specs[f"src{i}"] = generate_language(
            c.root_seed, delta, lang_seed=c.root_seed * 1009 + 11 * i + 1,
            lang_id=f"src{i}", alphabet_size=c.alphabet_size,
            frames_per_token=c.frames_per_token, feature_dim=c.feature_dim,
            noise=c.noise)
    specs[TARGET] = generate_language(
        c.root_seed, c.target_delta, lang_seed=c.root_seed * 1009 + 7777,
        lang_id=TARGET, alphabet_size=c.alphabet_size,
        frames_per_token=c.frames_per_token, feature_dim=c.feature_dim,
        noise=c.noise)
    return specs


def build_corpus(cfg: ExperimentConfig, out_dir=None):
    """Language specs plus train/valid/test batches, optionally persisted."""
    c = cfg.corpus
    specs = language_specs(cfg)
    data = {}
    for lang, spec in specs.items():
        target = lang == TARGET
        n = c.n_utts_target if target else c.n_utts_source
        fracs = tuple(c.target_split if target else c.source_split)
        splits = sample_corpus(spec, n, tuple(c.len_range),
                               split_seed=cfg.seed * 7919 + spec.lang_seed,
                               split_fracs=fracs)
        data[lang] = splits
        if out_dir:
            save_language(os.path.join(out_dir, "corpus"), spec, splits)
    return specs, data


def backbone_config(cfg: ExperimentConfig):
    m = cfg.model
    return BackboneConfig(
        vocab_size=3 + cfg.corpus.alphabet_size,
        num_encoder_layers=m.num_encoder_layers,
        num_decoder_layers=m.num_decoder_layers,
        model_dim=m.model_dim, ff_dim=m.ff_dim, num_heads=m.num_heads,
        feature_dim=cfg.corpus.feature_dim,
        subsample_factor=m.subsample_factor)


def pretrain_backbone(cfg: ExperimentConfig, data):
    """Multilingual pre-training: backbone plus per-source heads, pooled."""
    from .backbone import add_head, build_backbone
    bcfg = backbone_config(cfg)
    ps = build_backbone(bcfg, seed=cfg.seed * 31 + 5)
    for i, lang in enumerate(source_langs(cfg)):
        add_head(ps, bcfg, lang, seed=cfg.seed * 31 + 100 + i)
    model = Backbone(bcfg, ps)
    t = cfg.train
    ps.freeze_all_except("backbone", *[f"head:{l}" for l in source_langs(cfg)])
    opt = Adam(ps, t.pretrain_lr)
    rng = np.random.default_rng(cfg.seed * 31 + 9)
    langs = source_langs(cfg)
    for step in range(t.pretrain_steps):
        opt.lr = t.pretrain_lr * min(1.0, (step + 1) / max(t.warmup_steps, 1))
        lang = langs[int(rng.integers(len(langs)))]
        train = data[lang][0]
        idx = rng.choice(len(train), size=min(t.batch_size, len(train)),
                         replace=False)
        mb = [train[i] for i in idx]
        ps.zero_grad()
        with Tape():
            loss, _, _ = model.asr_loss(mb, lang, t.lam)
            backward(loss)
        opt.step()
    return model


class Workspace:
    """Caches per-seed shared artifacts (backbone, heads, adapters, meta)."""

    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.cfg = cfg
        self.out_dir = out_dir
        self.cache_dir = os.path.join(out_dir, f"cache_seed{cfg.seed}")
        os.makedirs(self.cache_dir, exist_ok=True)
        self.specs, self.data = build_corpus(cfg, out_dir)
        self.bcfg = backbone_config(cfg)

    def _path(self, name):
        return os.path.join(self.cache_dir, name)

    def base_params(self):
        """Pre-trained backbone + source heads, cached on disk."""
        path = self._path("backbone.ckpt")
        if not os.path.exists(path):
            model = pretrain_backbone(self.cfg, self.data)
            model.params.save(path)
        return ParamSet.load(path)

    def settings(self, steps, seed_salt, **over):
        t = self.cfg.train
        base = dict(steps=steps, lr=t.lr, batch_size=t.batch_size, lam=t.lam,
                    optimizer=t.optimizer, patience=t.patience,
                    eval_every=t.eval_every, warmup_steps=t.warmup_steps,
                    seed=self.cfg.seed * 613 + seed_salt)
        base.update(over)
        return TrainSettings(**base)

    def train_target_head(self, model):
        from .backbone import add_head
        if f"head:{TARGET}.dec.w" not in model.params:
            add_head(model.params, self.bcfg, TARGET,
                     seed=self.cfg.seed * 31 + 999)
        train, valid, _ = self.data[TARGET]
        return train_stage(model, train, valid, [f"head:{TARGET}"],
                           self.settings(self.cfg.train.head_steps, 1),
                           asr_loss_fn(model, TARGET, self.cfg.train.lam))

    def source_adapter_path(self, lang):
        path = self._path(f"adapter_{lang}.ckpt")
        if not os.path.exists(path):
            ps = self.base_params()
            model = Backbone(self.bcfg, ps)
            add_adapter_stack(ps, self.bcfg, lang,
                              bottleneck=self.cfg.model.bottleneck_dim,
                              seed=self.cfg.seed * 17 + 3)
            train, valid, _ = self.data[lang]
            train_adapter(model, lang, train, valid,
                          self.settings(self.cfg.train.adapter_steps, 2,
                                        patience=0))
            ps.save(path, names=[n for n in ps.names()
                                 if n.startswith(f"adapter:{lang}.")])
        return path

    def meta_adapter_path(self):
        """MAML pre-training of a shared adapter over the source languages."""
        path = self._path("meta_adapter.ckpt")
        if not os.path.exists(path):
            ps = self.base_params()
            model = Backbone(self.bcfg, ps)
            add_adapter_stack(ps, self.bcfg, "meta",
                              bottleneck=self.cfg.model.bottleneck_dim,
                              seed=self.cfg.seed * 17 + 5)
            ps.freeze_all_except("adapter:meta")
            m = self.cfg.meta
            mcfg = MetaConfig(inner_lr=m.inner_lr,
                              meta_step_size=m.meta_step_size,
                              epochs=m.epochs, inner_steps=m.inner_steps,
                              episode_size=m.episode_size, order=m.order,
                              inner_opt=m.inner_opt, seed=self.cfg.seed)
            lam = self.cfg.train.lam

            def loss_fn(view, ep):
                h = AdapterHooks(view, "meta")
                return Backbone(self.bcfg, view).asr_loss(
                    ep.train_batch, ep.lang, lam, h)[0]

            def val_fn(view, ep):
                h = AdapterHooks(view, "meta")
                return Backbone(self.bcfg, view).asr_loss(
                    ep.val_batch, ep.lang, lam, h)[0]

            sources = [(lang, self.data[lang][0]) for lang in source_langs(self.cfg)]
            meta_train(mcfg, ps, sources, loss_fn, val_fn,
                       log_path=self._path("meta_train_log.jsonl"))
            ps.save(path, names=[n for n in ps.names()
                                 if n.startswith("adapter:meta.")])
        return path

    def add_target_adapter(self, model, from_meta=False):
        add_adapter_stack(model.params, self.bcfg, TARGET,
                          bottleneck=self.cfg.model.bottleneck_dim,
                          seed=self.cfg.seed * 17 + 7)
        if from_meta:
            path = self.meta_adapter_path()
            model.params.load_into(
                path, rename=lambda n: n.replace("adapter:meta.",
                                                 f"adapter:{TARGET}."))

    def train_target_adapter(self, model, from_meta=False):
        # A meta-trained initialization is tuned for the inner-loop
        # optimizer, so adaptation from it continues with that optimizer.
        over = ({"optimizer": self.cfg.meta.inner_opt,
                 "lr": self.cfg.meta.inner_lr} if from_meta else {})
        train, valid, _ = self.data[TARGET]
        return train_adapter(model, TARGET, train, valid,
                             self.settings(self.cfg.train.adapter_steps, 4,
                                           **over))

    def fusion_plan(self):
        fp = self.cfg.fusion_plan
        langs = list(fp.source_langs if fp.source_langs is not None
                     else source_langs(self.cfg))
        target = TARGET if fp.include_target else None
        if fp.include_target:
            langs = langs + [TARGET]
        enc = (fp.encoder_layers if fp.encoder_layers is not None
               else list(range(self.bcfg.num_encoder_layers)))
        dec = (fp.decoder_layers if fp.decoder_layers is not None
               else list(range(self.bcfg.num_decoder_layers)))
        return FusionPlan(languages=langs, target=target,
                          encoder_layers=list(enc), decoder_layers=list(dec))


# ---------------------------------------------------------------------------
# Strategy runner
# ---------------------------------------------------------------------------


def run_strategy(cfg: ExperimentConfig, out_dir):
    """Execute one strategy end to end; returns the run report dict."""
    ws = Workspace(cfg, out_dir)
    ps = ws.base_params()
    model = Backbone(ws.bcfg, ps)
    t = cfg.train
    stage_wall = {}
    train_ms = []
    hooks = None
    changed_partitions = set()

    import time as _time

    def staged(name, partitions, fn):
        before = {p: ps.checksum(p) for p in ps.partitions()
                  if p not in partitions}
        t0 = _time.perf_counter()
        result = fn()
        stage_wall[name] = 1000.0 * (_time.perf_counter() - t0)
        after_bad = [p for p, h in before.items() if ps.checksum(p) != h]
        if after_bad:
            raise RuntimeError(f"freeze violation in stage {name}: {after_bad}")
        changed_partitions.update(partitions)
        if isinstance(result, tuple) and len(result) == 2 and \
                isinstance(result[1], float):
            train_ms.append(result[1])
        return result

    strategy = cfg.strategy
    if strategy == "head":
        staged("head", [f"head:{TARGET}"], lambda: ws.train_target_head(model))
    elif strategy in ("full_ft", "full_ft_l2"):
        staged("head", [f"head:{TARGET}"], lambda: ws.train_target_head(model))
        wd = t.l2 if strategy == "full_ft_l2" else 0.0
        train, valid, _ = ws.data[TARGET]
        staged("full_ft", ["backbone", f"head:{TARGET}"], lambda: train_stage(
            model, train, valid, ["backbone", f"head:{TARGET}"],
            ws.settings(t.adapter_steps, 11, weight_decay=wd),
            asr_loss_fn(model, TARGET, t.lam)))
    elif strategy == "part_ft":
        staged("head", [f"head:{TARGET}"], lambda: ws.train_target_head(model))
        last = ws.bcfg.num_decoder_layers - 1
        for name in list(ps.names()):
            if name.startswith(f"backbone.dec{last}."):
                ps.reassign(name, "backbone:part_ft")
        train, valid, _ = ws.data[TARGET]
        staged("part_ft", ["backbone:part_ft", f"head:{TARGET}"],
               lambda: train_stage(
                   model, train, valid, ["backbone:part_ft", f"head:{TARGET}"],
                   ws.settings(t.adapter_steps, 12),
                   asr_loss_fn(model, TARGET, t.lam)))
    elif strategy in ("adapter", "meta_adapter"):
        staged("head", [f"head:{TARGET}"], lambda: ws.train_target_head(model))
        meta = strategy == "meta_adapter"
        ws.add_target_adapter(model, from_meta=meta)
        staged("adapter", [f"adapter:{TARGET}"],
               lambda: ws.train_target_adapter(model, from_meta=meta))
        hooks = AdapterHooks(ps, TARGET, ws.bcfg.ln_eps)
    elif strategy in ("simadapter", "simadapter_plus"):
        plan = ws.fusion_plan()
        staged("head", [f"head:{TARGET}"], lambda: ws.train_target_head(model))
        for lang in plan.languages:
            if lang == TARGET:
                continue
            ps_src = ws.source_adapter_path(lang)
            add_adapter_stack(ps, ws.bcfg, lang,
                              bottleneck=cfg.model.bottleneck_dim,
                              seed=cfg.seed * 17 + 3)
            ps.load_into(ps_src)
        if TARGET in plan.languages:
            meta = strategy == "simadapter_plus"
            ws.add_target_adapter(model, from_meta=meta)
            staged("adapter", [f"adapter:{TARGET}"],
                   lambda: ws.train_target_adapter(model, from_meta=meta))
        add_fusion_layers(ps, ws.bcfg, plan, seed=cfg.seed * 17 + 9)
        hooks = FusionHooks(ps, ws.bcfg, plan, tau=t.tau)
        train, valid, _ = ws.data[TARGET]
        staged("fusion", ["fusion"], lambda: train_fusion(
            model, TARGET, train, valid, hooks,
            ws.settings(t.fusion_steps, 13), eta=t.eta, gamma=t.gamma))
    else:
        raise ValueError(f"unknown strategy: {strategy}")

    # evaluation on the target test split
    _, _, test = ws.data[TARGET]
    ter, records, decode_ms = evaluate(model, test, TARGET, t.lam,
                                       beam=t.beam, hooks=hooks)
    counts = ps.partition_table().count_trainable(changed_partitions)

    report = {
        "strategy": strategy,
        "seed": cfg.seed,
        "per_language_ter": {TARGET: ter},
        "per_language_test_size": {TARGET: len(test)},
        "average_ter": ter,
        "weighted_average_ter": weighted_average([ter], [len(test)]),
        "trainable_counts": counts,
        "per_step_train_ms": float(np.mean(train_ms)) if train_ms else 0.0,
        "per_utt_decode_ms": decode_ms,
        "stage_wall_ms": stage_wall,
        "freeze_audit_ok": True,
    }
    if isinstance(hooks, FusionHooks):
        report["mean_attention"] = {
            f"{site[0]}{site[1]}": dict(zip(hooks.plan.languages,
                                            map(float, scores)))
            for site, scores in mean_attention(model, test, TARGET,
                                               hooks).items()}
    report_path = os.path.join(out_dir,
                               f"report_{strategy}_seed{cfg.seed}.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir,
                           f"decode_{strategy}_seed{cfg.seed}.jsonl"), "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return report


def run_joint_head_adapter(cfg: ExperimentConfig, out_dir):
    """Baseline for the staged-vs-joint comparison: head and adapter trained
    together in a single stage on the same total budget."""
    ws = Workspace(cfg, out_dir)
    ps = ws.base_params()
    model = Backbone(ws.bcfg, ps)
    from .backbone import add_head
    add_head(ps, ws.bcfg, TARGET, seed=cfg.seed * 31 + 999)
    ws.add_target_adapter(model)
    t = cfg.train
    hooks = AdapterHooks(ps, TARGET)
    train, valid, _ = ws.data[TARGET]
    train_stage(model, train, valid, [f"head:{TARGET}", f"adapter:{TARGET}"],
                ws.settings(t.head_steps + t.adapter_steps, 21),
                asr_loss_fn(model, TARGET, t.lam, hooks))
    _, _, test = ws.data[TARGET]
    ter, _, _ = evaluate(model, test, TARGET, t.lam, beam=t.beam, hooks=hooks)
    return {"strategy": "joint_head_adapter", "seed": cfg.seed,
            "per_language_ter": {TARGET: ter}, "average_ter": ter}


def run_pooled_adapter(cfg: ExperimentConfig, out_dir, steps=None):
    """Baseline for the meta-vs-pooled comparison: a shared adapter trained
    on the pooled source languages with a summed multi-language objective,
    then fine-tuned on the target with the same recipe as the meta-trained
    adapter. ``steps`` defaults to the full episode budget of meta training.
    """
    ws = Workspace(cfg, out_dir)
    ps = ws.base_params()
    model = Backbone(ws.bcfg, ps)
    sources = source_langs(cfg)
    if steps is None:
        steps = cfg.meta.epochs * len(sources) * cfg.meta.episode_size \
            // cfg.train.batch_size
    add_adapter_stack(ps, ws.bcfg, "pooled",
                      bottleneck=cfg.model.bottleneck_dim,
                      seed=cfg.seed * 17 + 5)
    ps.freeze_all_except("adapter:pooled")
    hooks = AdapterHooks(ps, "pooled", ws.bcfg.ln_eps)
    lam = cfg.train.lam
    rng = np.random.default_rng(cfg.seed * 613 + 29)
    opt = Adam(ps, cfg.train.lr)
    bs = cfg.train.batch_size
    for _ in range(steps):
        with Tape():
            loss = None
            for lang in sources:
                train, _, _ = ws.data[lang]
                idx = rng.choice(len(train), size=min(bs, len(train)),
                                 replace=False)
                term = model.asr_loss([train[i] for i in idx], lang, lam,
                                      hooks)[0]
                loss = term if loss is None else loss + term
            ps.zero_grad()
            backward(loss)
        opt.step()
    pooled_path = os.path.join(ws.cache_dir, "pooled_adapter.ckpt")
    ps.save(pooled_path, names=[n for n in ps.names()
                                if n.startswith("adapter:pooled.")])

    # fresh parameter set: backbone + target head + target adapter seeded
    # from the pooled checkpoint, fine-tuned like the meta-initialized one
    ps = ws.base_params()
    model = Backbone(ws.bcfg, ps)
    ws.train_target_head(model)
    add_adapter_stack(ps, ws.bcfg, TARGET,
                      bottleneck=cfg.model.bottleneck_dim,
                      seed=cfg.seed * 17 + 7)
    ps.load_into(pooled_path,
                 rename=lambda n: n.replace("adapter:pooled.",
                                            f"adapter:{TARGET}."))
    ws.train_target_adapter(model, from_meta=True)
    hooks = AdapterHooks(ps, TARGET, ws.bcfg.ln_eps)
    _, _, test = ws.data[TARGET]
    ter, _, _ = evaluate(model, test, TARGET, lam, beam=cfg.train.beam,
                         hooks=hooks)
    return {"strategy": "pooled_adapter", "seed": cfg.seed,
            "pretrain_steps": steps,
            "per_language_ter": {TARGET: ter}, "average_ter": ter}


def full_scale_manifest():
    """Trainable-parameter arithmetic at published model scale.

    Builds the full-scale shape manifest with the same constructors used at
    desk scale (9+6 layer, 444-dim backbone; 86-entry dual head; bottleneck-44
    adapters at every layer; fusion on the decoder layers) and returns the
    per-configuration totals, exact and rounded to thousands.
    """
    from .backbone import add_head, build_backbone
    cfg = BackboneConfig(vocab_size=86, num_encoder_layers=9,
                         num_decoder_layers=6, model_dim=444, ff_dim=784,
                         num_heads=4, feature_dim=76, subsample_factor=2,
                         subsample_kernel=2)
    ps = build_backbone(cfg)
    add_head(ps, cfg, TARGET)
    add_adapter_stack(ps, cfg, TARGET, bottleneck=44)
    plan = FusionPlan(languages=[TARGET], target=TARGET, encoder_layers=[],
                      decoder_layers=list(range(cfg.num_decoder_layers)))
    add_fusion_layers(ps, cfg, plan)
    table = ps.partition_table()
    head = f"head:{TARGET}"
    adapter = f"adapter:{TARGET}"
    counts = {
        "full_model": table.count_trainable(["backbone", head])["trainable"],
        "head": table.count_trainable([head])["trainable"],
        "head_adapter": table.count_trainable([head, adapter])["trainable"],
        "head_adapter_fusion": table.count_trainable(
            [head, adapter, "fusion"])["trainable"],
    }
    counts_k = {k: round(v / 1000.0) for k, v in counts.items()}
    return {"exact": counts, "thousands": counts_k}


# ---------------------------------------------------------------------------
# Sweeps and timing
# ---------------------------------------------------------------------------

SWEEP_AXES = ("gamma", "meta_epochs", "fusion_plan")

FUSION_PLAN_PRESETS = {
    "full": (None, None),
    "enc_only": (None, []),
    "first_enc_first_dec": ([0], [0]),
}


def sweep(cfg: ExperimentConfig, axis, values, out_dir):
    """One run per value along a config axis; CSV summary of target TER."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis: {axis}")
    if not values:
        raise ValueError("sweep: empty value list")
    rows = []
    for v in values:
        sub = os.path.join(out_dir, f"sweep_{axis}_{v}")
        os.makedirs(sub, exist_ok=True)
        c = cfg
        if axis == "gamma":
            c = cfg.replace(train=dataclasses.replace(cfg.train, gamma=float(v)))
        elif axis == "meta_epochs":
            c = cfg.replace(meta=dataclasses.replace(cfg.meta, epochs=int(v)))
        else:
            enc, dec = FUSION_PLAN_PRESETS[v]
            c = cfg.replace(fusion_plan=dataclasses.replace(
                cfg.fusion_plan, encoder_layers=enc, decoder_layers=dec))
        report = run_strategy(c, sub)
        rows.append({"axis": axis, "value": v,
                     "ter": report["average_ter"],
                     "weighted_ter": report["weighted_average_ter"]})
    path = os.path.join(out_dir, f"sweep_{axis}.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "value", "ter",
                                                "weighted_ter"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def time_report(reports):
    """Per-step train and per-utterance decode time relative to full_ft."""
    base = next((r for r in reports if r["strategy"] == "full_ft"), None)
    rows = []
    for r in reports:
        row = {
            "strategy": r["strategy"],
            "trainable_params": r["trainable_counts"]["trainable"],
            "per_step_train_ms": r["per_step_train_ms"],
            "per_utt_decode_ms": r["per_utt_decode_ms"],
        }
        if base is not None and base["per_step_train_ms"]:
            row["train_time_vs_full_ft"] = (
                r["per_step_train_ms"] / base["per_step_train_ms"] - 1.0)
        if base is not None and base["per_utt_decode_ms"]:
            row["decode_time_vs_full_ft"] = (
                r["per_utt_decode_ms"] / base["per_utt_decode_ms"] - 1.0)
        rows.append(row)
    return {"rows": rows, "reference_full_scale": dict(REFERENCE_TIME_DELTAS)}
