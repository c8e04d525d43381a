"""Command-line entry points for corpus generation, training, and reports."""

from __future__ import annotations

import argparse
import glob
import json
import os

from .backbone import Backbone
from .harness import (ExperimentConfig, Workspace, run_strategy, sweep,
                      time_report)


def _load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config \
        else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "strategy", None):
        cfg = cfg.replace(strategy=args.strategy)
    return cfg


def _add_common(p, strategy=False):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    if strategy:
        p.add_argument("--strategy", default=None)


def cmd_gen_data(args):
    cfg = _load_config(args)
    ws = Workspace(cfg, args.out_dir)
    print(f"wrote corpus for {sorted(ws.data)} under {args.out_dir}/corpus")


def cmd_train_heads(args):
    cfg = _load_config(args)
    ws = Workspace(cfg, args.out_dir)
    ps = ws.base_params()  # pre-trains backbone + source heads if missing
    model = Backbone(ws.bcfg, ps)
    ws.train_target_head(model)
    path = os.path.join(ws.cache_dir, "heads.ckpt")
    ps.save(path, names=[n for n in ps.names() if n.startswith("head:")])
    print(f"heads saved to {path}")


def cmd_train_adapters(args):
    cfg = _load_config(args)
    ws = Workspace(cfg, args.out_dir)
    from .harness import source_langs
    for lang in source_langs(cfg):
        print(f"{lang}: {ws.source_adapter_path(lang)}")


def cmd_meta_train(args):
    cfg = _load_config(args)
    ws = Workspace(cfg, args.out_dir)
    print(f"meta adapter: {ws.meta_adapter_path()}")


def cmd_train_fusion(args):
    cfg = _load_config(args)
    if cfg.strategy not in ("simadapter", "simadapter_plus"):
        cfg = cfg.replace(strategy="simadapter")
    report = run_strategy(cfg, args.out_dir)
    print(json.dumps({k: report[k] for k in
                      ("strategy", "seed", "average_ter")}, indent=2))


def cmd_run(args):
    cfg = _load_config(args)
    report = run_strategy(cfg, args.out_dir)
    print(json.dumps({k: report[k] for k in
                      ("strategy", "seed", "average_ter",
                       "weighted_average_ter")}, indent=2))


def cmd_sweep(args):
    cfg = _load_config(args)
    values = args.values.split(",")
    if args.axis in ("gamma",):
        values = [float(v) for v in values]
    elif args.axis == "meta_epochs":
        values = [int(v) for v in values]
    rows = sweep(cfg, args.axis, values, args.out_dir)
    for row in rows:
        print(row)


def cmd_export_attention(args):
    cfg = _load_config(args)
    if cfg.strategy not in ("simadapter", "simadapter_plus"):
        cfg = cfg.replace(strategy="simadapter")
    run_strategy(cfg, args.out_dir)
    report_path = os.path.join(args.out_dir, "attention.csv")
    with open(os.path.join(
            args.out_dir, f"report_{cfg.strategy}_seed{cfg.seed}.json")) as fh:
        rep = json.load(fh)
    import csv as _csv
    sites = sorted(rep["mean_attention"], key=_site_order)
    langs = list(next(iter(rep["mean_attention"].values())))
    with open(report_path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["language"] + [f"layer_{i}" for i in range(len(sites))])
        for lang in langs:
            w.writerow([lang] + [f"{rep['mean_attention'][s][lang]:.10f}"
                                 for s in sites])
    print(f"attention map written to {report_path}")


def _site_order(site):
    kind = 0 if site.startswith("enc") else 1
    return (kind, int(site[3:]))


def cmd_report(args):
    reports = []
    for path in sorted(glob.glob(os.path.join(args.out_dir, "report_*.json"))):
        with open(path) as fh:
            reports.append(json.load(fh))
    if not reports:
        print("no reports found")
        return
    summary = time_report(reports)
    out = os.path.join(args.out_dir, "summary.json")
    with open(out, "w") as fh:
        json.dump({"runs": reports, "timing": summary}, fh, indent=2,
                  sort_keys=True)
    for row in summary["rows"]:
        print(row)
    print(f"summary written to {out}")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="xladapt",
        description="Adapter-based cross-lingual transfer experiments on "
                    "synthetic transduction tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    specs = [
        ("gen-data", cmd_gen_data, False),
        ("train-heads", cmd_train_heads, False),
        ("train-adapters", cmd_train_adapters, False),
        ("meta-train", cmd_meta_train, False),
        ("train-fusion", cmd_train_fusion, True),
        ("run", cmd_run, True),
        ("export-attention", cmd_export_attention, True),
        ("report", cmd_report, False),
    ]
    for name, fn, strat in specs:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("--out-dir", required=True)
        else:
            _add_common(p, strategy=strat)
        p.set_defaults(fn=fn)

    p = sub.add_parser("sweep")
    _add_common(p, strategy=True)
    p.add_argument("--axis", required=True,
                   choices=("gamma", "meta_epochs", "fusion_plan"))
    p.add_argument("--values", required=True,
                   help="comma-separated sweep values")
    p.set_defaults(fn=cmd_sweep)

    args = parser.parse_args(argv)
    os.makedirs(args.out_dir, exist_ok=True)
    args.fn(args)


if __name__ == "__main__":
    main()
