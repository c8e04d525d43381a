"""Attention fusion over language adapters: identities, losses, gradients."""

import csv

import numpy as np
import pytest

import xladapt.autodiff as ad
from xladapt.autodiff import Tape, Tensor, grad_check
from xladapt.adapters import add_adapter_stack, adapter_forward
from xladapt.fusion import (FusionHooks, FusionPlan, add_fusion_layers,
                            export_attention, fusion_param_prefix, guide_loss,
                            mean_attention, reg_loss, simadapter_forward,
                            total_loss, total_reg_loss)

from conftest import micro_model, random_batch


def fusion_model(langs=("aa", "bb", "tgt"), target="tgt", seed=0,
                 enc_layers=None, dec_layers=None, perturb=True):
    model = micro_model(seed=seed, lang=target)
    cfg, ps = model.cfg, model.params
    rng = np.random.default_rng(seed + 50)
    for lang in langs:
        add_adapter_stack(ps, cfg, lang, bottleneck=3, seed=seed + 3)
        if perturb:  # give each adapter a distinct non-trivial response
            for name, tens in ps.items(f"adapter:{lang}"):
                if name.endswith(".wu"):
                    tens.data[...] = 0.2 * rng.normal(size=tens.shape)
    plan = FusionPlan(
        languages=list(langs), target=target,
        encoder_layers=(list(range(cfg.num_encoder_layers))
                        if enc_layers is None else enc_layers),
        decoder_layers=(list(range(cfg.num_decoder_layers))
                        if dec_layers is None else dec_layers))
    add_fusion_layers(ps, cfg, plan, seed=seed + 9)
    return model, plan, FusionHooks(ps, cfg, plan)


def test_value_matrix_init_near_identity():
    model, plan, _ = fusion_model()
    n = len(plan.languages)
    for site in plan.sites():
        wv = model.params[f"{fusion_param_prefix(site)}.wv"].data
        assert np.sum((np.eye(8) - wv) ** 2) <= n * n * 1e-12 + 8 * 7 * 1e-12


def test_single_language_fusion_matches_adapter(rng):
    model, plan, hooks = fusion_model(langs=("solo",), target="solo")
    z = Tensor(rng.normal(size=(5, 8)))
    with Tape():
        fused = hooks.apply(("enc", 0), z).data
        alone = adapter_forward(model.params, "solo", ("enc", 0), z).data
    assert np.abs(fused - alone).max() <= 1e-5


def test_attention_simplex(rng):
    model, plan, hooks = fusion_model()
    batch = random_batch(rng)
    with Tape():
        model.asr_loss(batch, "tgt", 0.3, hooks)
    for site in plan.sites():
        for alpha in hooks.alpha_capture[site]:
            assert (alpha >= 0).all()
            assert np.abs(alpha.sum(axis=1) - 1.0).max() <= 1e-12


def test_identical_adapters_get_symmetric_attention(rng):
    model, plan, hooks = fusion_model(langs=("aa", "bb"), target="bb",
                                      perturb=False)
    ps = model.params
    # make bb an exact copy of aa so both branches are indistinguishable
    for name, tens in ps.items("adapter:bb"):
        tens.data[...] = ps[name.replace(":bb.", ":aa.")].data
    z = Tensor(rng.normal(size=(4, 8)))
    with Tape():
        hooks.apply(("enc", 0), z)
    alpha = hooks.alpha_capture[("enc", 0)][0]
    assert np.abs(alpha - 0.5).max() < 1e-12


def test_forward_matches_straight_line_oracle(rng):
    d = 8
    z = rng.normal(size=(6, d))
    adapters = [rng.normal(size=(6, d)) for _ in range(3)]
    wq, wk = 0.3 * rng.normal(size=(d, d)), 0.3 * rng.normal(size=(d, d))
    wv = np.eye(d) + 0.01 * rng.normal(size=(d, d))
    tau = 1.3
    with Tape():
        out, alpha = simadapter_forward(
            Tensor(z), [Tensor(a) for a in adapters], Tensor(wq), Tensor(wk),
            Tensor(wv), tau=tau)

    # independent per-position loop
    for s in range(z.shape[0]):
        logits = np.array([(z[s] @ wq) @ (a[s] @ wk) for a in adapters]) / tau
        e = np.exp(logits - logits.max())
        a_ref = e / e.sum()
        o_ref = sum(a_ref[i] * (adapters[i][s] @ wv) for i in range(3))
        assert np.abs(alpha.data[s] - a_ref).max() < 1e-12
        assert np.abs(out.data[s] - o_ref).max() < 1e-12


def test_forward_validates_inputs(rng):
    d = 8
    w = Tensor(np.eye(d))
    with pytest.raises(ValueError):
        simadapter_forward(Tensor(rng.normal(size=(3, d))), [], w, w, w)
    with pytest.raises(ad.ShapeError):
        simadapter_forward(Tensor(rng.normal(size=(3, d))),
                           [Tensor(rng.normal(size=(4, d)))], w, w, w)


def test_reg_loss_examples():
    with Tape():
        assert reg_loss(Tensor(np.eye(5))).item() == 0.0
        wv = np.eye(5)
        wv[0, 3] = 0.1
        assert abs(reg_loss(Tensor(wv)).item() - 0.01) < 1e-15
    with pytest.raises(ad.ShapeError):
        reg_loss(Tensor(np.ones((2, 3))))


def test_total_reg_loss_additive():
    model, plan, _ = fusion_model(enc_layers=[0], dec_layers=[0])
    ps = model.params
    ps["fusion.enc0.wv"].data[...] = np.eye(8)
    ps["fusion.dec0.wv"].data[...] = np.eye(8)
    ps["fusion.enc0.wv"].data[0, 1] = 0.3
    ps["fusion.dec0.wv"].data[2, 0] = 0.4
    with Tape():
        total = total_reg_loss(ps, plan).item()
    assert abs(total - (0.09 + 0.16)) < 1e-12


def test_guide_loss_examples():
    model, plan, hooks = fusion_model(enc_layers=[0], dec_layers=[])
    site = ("enc", 0)
    # target attention 1 everywhere -> 0
    hooks.reset_capture()
    with Tape():
        hooks.guide_terms[site] = [ad.mean(ad.log(Tensor(np.ones((4, 1)))))]
        assert abs(guide_loss(hooks).item()) < 1e-15
    # K*S = 4 positions with alpha = 0.5 -> ln 2
    hooks.reset_capture()
    with Tape():
        hooks.guide_terms[site] = [ad.mean(ad.log(Tensor(np.full((4, 1), 0.5))))]
        assert abs(guide_loss(hooks).item() - np.log(2.0)) < 1e-12


def test_guide_loss_matches_scalar_loop_oracle(rng):
    model, plan, hooks = fusion_model(enc_layers=[0], dec_layers=[0])
    expect = 0.0
    with Tape():
        for site in plan.sites():
            terms = []
            for _ in range(2):  # two captured forward passes per site
                alphas = rng.uniform(0.05, 1.0, size=(5, 1))
                terms.append(ad.mean(ad.log(Tensor(alphas))))
                expect += -np.mean(np.log(alphas)) / 2
            hooks.guide_terms[site] = terms
        got = guide_loss(hooks).item()
    assert abs(got - expect) < 1e-12


def test_guide_loss_requires_target_and_capture():
    model, plan, hooks = fusion_model()
    with pytest.raises(ValueError, match="captured"):
        guide_loss(hooks)
    plan_no_target = FusionPlan(languages=["aa"], target=None,
                                encoder_layers=[0], decoder_layers=[])
    h2 = FusionHooks(model.params, model.cfg, plan_no_target)
    with pytest.raises(ValueError, match="target"):
        guide_loss(h2)


def test_total_loss_reduces_to_asr_when_unweighted(rng):
    model, plan, hooks = fusion_model()
    batch = random_batch(rng)
    with Tape():
        total, comps = total_loss(model, batch, "tgt", hooks, lam=0.3,
                                  eta=0.0, gamma=0.0)
    assert total.item() == comps["asr"]


def test_total_loss_affine_in_weights(rng):
    model, plan, hooks = fusion_model()
    batch = random_batch(rng)
    with Tape():
        t1, c1 = total_loss(model, batch, "tgt", hooks, 0.3, eta=0.01,
                            gamma=1.0)
    with Tape():
        t2, c2 = total_loss(model, batch, "tgt", hooks, 0.3, eta=0.05,
                            gamma=0.25)
    assert abs(c1["reg"] - c2["reg"]) < 1e-12
    assert abs(c1["guide"] - c2["guide"]) < 1e-12
    expect_delta = (0.01 - 0.05) * c1["reg"] + (1.0 - 0.25) * c1["guide"]
    assert abs((t1.item() - t2.item()) - expect_delta) < 1e-10
    assert abs(t1.item() - (c1["asr"] + 0.01 * c1["reg"] + c1["guide"])) < 1e-10


def test_total_loss_rejects_negative_weights(rng):
    model, plan, hooks = fusion_model()
    with pytest.raises(ValueError):
        total_loss(model, random_batch(rng), "tgt", hooks, 0.3, eta=-1.0)


def test_guide_loss_gradient_wrt_query_weights(rng):
    model, plan, hooks = fusion_model(enc_layers=[0], dec_layers=[], seed=1)
    wq = model.params["fusion.enc0.wq"]
    batch = random_batch(rng, n_utts=1)

    def f():
        hooks.reset_capture()
        model.asr_loss(batch, "tgt", 0.3, hooks)
        return guide_loss(hooks)

    assert grad_check(f, [wq]) < 1e-4


def test_total_loss_gradient(rng):
    model, plan, hooks = fusion_model(enc_layers=[0], dec_layers=[0], seed=1)
    ps = model.params
    batch = random_batch(rng, n_utts=1)
    subset = [ps["fusion.enc0.wq"], ps["fusion.dec0.wv"],
              ps["adapter:tgt.enc0.wu"], ps["head:tgt.dec.b"]]
    err = grad_check(
        lambda: total_loss(model, batch, "tgt", hooks, 0.3)[0], subset)
    assert err < 1e-4


def test_off_plan_site_applies_target_adapter(rng):
    model, plan, hooks = fusion_model(enc_layers=[], dec_layers=[0])
    z = Tensor(rng.normal(size=(4, 8)))
    with Tape():
        out = hooks.apply(("enc", 0), z).data
        expect = adapter_forward(model.params, "tgt", ("enc", 0), z).data
    assert np.array_equal(out, expect)


def test_mean_attention_sums_to_one(rng):
    model, plan, hooks = fusion_model()
    batch = random_batch(rng)
    means = mean_attention(model, batch, "tgt", hooks)
    for site, scores in means.items():
        assert abs(scores.sum() - 1.0) <= 1e-9


def test_export_attention_csv(tmp_path, rng):
    model, plan, hooks = fusion_model()
    batch = random_batch(rng)
    path = str(tmp_path / "attention.csv")
    export_attention(model, batch, "tgt", hooks, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    n_sites = len(plan.sites())
    assert rows[0] == ["language"] + [f"layer_{i}" for i in range(n_sites)]
    assert [r[0] for r in rows[1:]] == list(plan.languages)
    cols = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    assert np.abs(cols.sum(axis=0) - 1.0).max() <= 1e-9


def test_export_single_language_all_ones(tmp_path, rng):
    model, plan, hooks = fusion_model(langs=("solo",), target="solo")
    path = str(tmp_path / "solo.csv")
    means = export_attention(model, random_batch(rng), "solo", hooks, path)
    for scores in means.values():
        assert np.abs(scores - 1.0).max() <= 1e-12
