"""Experiment harness: config round-trip, determinism, audits, sweeps, CLI."""

import csv
import dataclasses
import json
import os

import pytest

from xladapt import cli
from xladapt.harness import (REFERENCE_TIME_DELTAS, ExperimentConfig,
                             Workspace, run_strategy, sweep, time_report)
from xladapt.synthtasks import weighted_average

TIMING_KEYS = ("per_step_train_ms", "per_utt_decode_ms", "stage_wall_ms")


def micro_exp(strategy="head", seed=0):
    cfg = ExperimentConfig(strategy=strategy, seed=seed)
    return cfg.replace(
        corpus=dataclasses.replace(
            cfg.corpus, source_deltas=[0.2, 0.5], n_utts_source=12,
            n_utts_target=10, alphabet_size=6, feature_dim=4,
            len_range=[2, 3]),
        model=dataclasses.replace(
            cfg.model, num_encoder_layers=1, num_decoder_layers=1,
            model_dim=8, ff_dim=12, num_heads=2, bottleneck_dim=3),
        train=dataclasses.replace(
            cfg.train, pretrain_steps=5, head_steps=6, adapter_steps=6,
            fusion_steps=6, beam=2, patience=0, eval_every=2,
            warmup_steps=2),
        meta=dataclasses.replace(cfg.meta, epochs=2, episode_size=6))


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("runs"))
    reports = {s: run_strategy(micro_exp(s), out)
               for s in ("head", "full_ft", "part_ft", "adapter")}
    return out, reports


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def test_config_json_roundtrip_lossless(tmp_path):
    cfg = micro_exp("adapter", seed=3)
    path = str(tmp_path / "cfg.json")
    cfg.save(path)
    loaded = ExperimentConfig.load(path)
    assert loaded == cfg
    assert loaded.to_dict() == cfg.to_dict()


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown keys"):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError, match="unknown keys"):
        ExperimentConfig.from_dict({"train": {"learning_rate": 0.1}})


def test_config_rejects_unknown_strategy():
    with pytest.raises(ValueError, match="strategy"):
        ExperimentConfig(strategy="finetune_everything")
    with pytest.raises(ValueError, match="strategy"):
        ExperimentConfig.from_dict({"strategy": "nope"})


def test_fusion_plan_respects_include_target(tmp_path):
    cfg = micro_exp("simadapter")
    cfg = cfg.replace(fusion_plan=dataclasses.replace(
        cfg.fusion_plan, include_target=False, source_langs=["src0"],
        encoder_layers=[0], decoder_layers=[]))
    ws = Workspace(cfg, str(tmp_path))
    plan = ws.fusion_plan()
    assert plan.languages == ["src0"]
    assert plan.target is None
    assert plan.sites() == [("enc", 0)]


# ---------------------------------------------------------------------------
# Strategy runner
# ---------------------------------------------------------------------------


def test_run_deterministic_given_config_and_seed(tmp_path):
    cfg = micro_exp("head", seed=1)
    r1 = run_strategy(cfg, str(tmp_path / "a"))
    r2 = run_strategy(cfg, str(tmp_path / "b"))
    strip = lambda r: {k: v for k, v in r.items() if k not in TIMING_KEYS}
    assert strip(r1) == strip(r2)


def test_report_schema_and_weighted_average(runs):
    _, reports = runs
    for rep in reports.values():
        assert rep["freeze_audit_ok"] is True
        sizes = rep["per_language_test_size"]
        ters = rep["per_language_ter"]
        langs = sorted(ters)
        assert rep["weighted_average_ter"] == pytest.approx(
            weighted_average([ters[l] for l in langs],
                             [sizes[l] for l in langs]))
        assert 0.0 <= rep["average_ter"] <= 1.0
        assert rep["trainable_counts"]["trainable"] > 0


def test_report_files_written(runs):
    out, reports = runs
    for strat, rep in reports.items():
        path = os.path.join(out, f"report_{strat}_seed0.json")
        with open(path) as fh:
            assert json.load(fh) == rep
        decode = os.path.join(out, f"decode_{strat}_seed0.jsonl")
        with open(decode) as fh:
            rows = [json.loads(line) for line in fh]
        assert len(rows) == rep["per_language_test_size"]["tgt"]
        assert all({"utt_id", "ref", "hyp"} <= set(r) for r in rows)


def test_trainable_partitions_match_strategy(runs):
    _, reports = runs
    per = lambda s: set(reports[s]["trainable_counts"]["per_partition"])
    assert per("head") == {"head:tgt"}
    assert per("full_ft") == {"backbone", "head:tgt"}
    assert per("part_ft") == {"backbone:part_ft", "head:tgt"}
    assert per("adapter") == {"adapter:tgt", "head:tgt"}


def test_parameter_budgets_ordered(runs):
    _, reports = runs
    ratio = lambda s: reports[s]["trainable_counts"]["ratio"]
    assert ratio("adapter") < ratio("part_ft") < ratio("full_ft")
    # remainder of the budget is the frozen source heads
    assert ratio("full_ft") > 0.5


# ---------------------------------------------------------------------------
# Sweeps and timing
# ---------------------------------------------------------------------------


def test_sweep_gamma_writes_csv(tmp_path):
    cfg = micro_exp("simadapter")
    rows = sweep(cfg, "gamma", [0.0, 1.0], str(tmp_path))
    assert [r["value"] for r in rows] == [0.0, 1.0]
    with open(tmp_path / "sweep_gamma.csv") as fh:
        csv_rows = list(csv.DictReader(fh))
    assert [float(r["value"]) for r in csv_rows] == [0.0, 1.0]
    for r in csv_rows:
        assert 0.0 <= float(r["ter"]) <= 1.0


def test_sweep_validates_axis_and_values(tmp_path):
    cfg = micro_exp()
    with pytest.raises(ValueError, match="axis"):
        sweep(cfg, "learning_rate", [0.1], str(tmp_path))
    with pytest.raises(ValueError, match="empty"):
        sweep(cfg, "gamma", [], str(tmp_path))


def test_time_report_relative_to_full_ft(runs):
    _, reports = runs
    summary = time_report(list(reports.values()))
    assert summary["reference_full_scale"] == REFERENCE_TIME_DELTAS
    by_strat = {r["strategy"]: r for r in summary["rows"]}
    base = by_strat["full_ft"]
    assert base["train_time_vs_full_ft"] == pytest.approx(0.0)
    adapter = by_strat["adapter"]
    expect = reports["adapter"]["per_step_train_ms"] \
        / reports["full_ft"]["per_step_train_ms"] - 1.0
    assert adapter["train_time_vs_full_ft"] == pytest.approx(expect)
    assert adapter["trainable_params"] < base["trainable_params"]


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def test_cli_gen_data_run_report(tmp_path, capsys):
    cfg_path = str(tmp_path / "cfg.json")
    micro_exp("head").save(cfg_path)
    out = str(tmp_path / "out")

    cli.main(["gen-data", "--config", cfg_path, "--out-dir", out])
    assert os.path.isdir(os.path.join(out, "corpus", "tgt"))
    capsys.readouterr()

    cli.main(["run", "--config", cfg_path, "--out-dir", out])
    printed = json.loads(capsys.readouterr().out)
    assert printed["strategy"] == "head"
    assert os.path.exists(os.path.join(out, "report_head_seed0.json"))

    cli.main(["report", "--out-dir", out])
    with open(os.path.join(out, "summary.json")) as fh:
        summary = json.load(fh)
    assert summary["timing"]["reference_full_scale"] == REFERENCE_TIME_DELTAS


def test_cli_export_attention(tmp_path):
    cfg_path = str(tmp_path / "cfg.json")
    micro_exp("simadapter").save(cfg_path)
    out = str(tmp_path / "out")
    cli.main(["export-attention", "--config", cfg_path, "--out-dir", out])
    with open(os.path.join(out, "attention.csv")) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "language"
    langs = [r[0] for r in rows[1:]]
    assert set(langs) == {"src0", "src1", "tgt"}
    for col in range(1, len(rows[0])):
        assert sum(float(r[col]) for r in rows[1:]) == pytest.approx(1.0)
