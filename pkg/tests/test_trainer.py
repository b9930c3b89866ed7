import dataclasses
import json
import math

import numpy as np
import pytest
import torch

import icsl.trainer as trainer_mod
from icsl.checkpoint import load_checkpoint, save_checkpoint
from icsl.config import resolve_config
from icsl.data import generate_synthetic, lodo_splits, SynthSpec
from icsl.errors import ICSLError, NumericError
from icsl.metrics import evaluate
from icsl.trainer import (
    run_comparison,
    run_lodo,
    run_split,
    run_sweep,
    sweep_config,
    train,
)


def _cfg(**kw):
    base = {"phase1_epochs": 2, "phase2_epochs": 2, "batch_size": 4, "image_size": 32, "val_every": 1}
    base.update(kw)
    return resolve_config("desk", overrides=base)


@pytest.fixture(scope="module")
def split(small_corpus):
    return lodo_splits(small_corpus)[0]


def _losses(log):
    return np.array([[r[k] for k in ("seg", "consist", "adv", "total")] for r in log])


def _same_params(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_log_records_and_loss_identity(split, small_corpus):
    cfg = _cfg()
    res = train(split.train_samples(), cfg, split.held_in_test(), small_corpus.decomposition)
    assert len(res.log) == 4 * 2  # 8 samples, batch 4, 4 epochs
    assert [r["phase"] for r in res.log] == [1] * 4 + [2] * 4
    for r in res.log:
        assert set(r) >= {"step", "epoch", "phase", "lr", "wall_time", "seg", "consist", "adv", "total"}
        assert abs(r["total"] - (r["seg"] + r["consist"] + cfg.lambda_adv * r["adv"])) < 1e-6
    for r in res.log[:4]:
        assert r["consist"] == 0 and r["adv"] == 0
    assert all(r["adv"] > 0 for r in res.log[4:])
    assert [v["epoch"] for v in res.validation] == [1, 2, 3, 4]
    assert res.best_val == max(v["dice"] for v in res.validation)


def test_phase2_zero_is_plain_baseline(split):
    a = train(split.train_samples(), _cfg(phase2_epochs=0))
    b = train(split.train_samples(), _cfg(phase2_epochs=2))
    assert all(r["phase"] == 1 for r in a.log)
    # phase 1 is the same vanilla run whatever follows it
    assert np.array_equal(_losses(a.log), _losses(b.log)[: len(a.log)])


def test_seed_determinism(split):
    a = train(split.train_samples(), _cfg())
    b = train(split.train_samples(), _cfg())
    assert np.abs(_losses(a.log) - _losses(b.log)).max() <= 1e-6
    assert _same_params(a.model, b.model) and _same_params(a.classifier, b.classifier)
    c = train(split.train_samples(), _cfg(seed=1))
    assert not np.array_equal(_losses(a.log), _losses(c.log))


@pytest.mark.parametrize("ablation,zero", [("consist", "consist"), ("adv", "adv"), ("sir", "consist")])
def test_ablation_switches(split, ablation, zero):
    cfg = _cfg().ablate(ablation)
    res = train(split.train_samples(), cfg)
    for r in res.log:
        assert r[zero] == 0.0
        assert abs(r["total"] - (r["seg"] + r["consist"] + cfg.lambda_adv * r["adv"])) < 1e-6


def test_disable_sir_paths_coincide(split):
    from icsl.model import forward_dual
    from icsl.trainer import collate, phase2_sir

    res = train(split.train_samples(), _cfg().ablate("sir"))
    x, _ = collate(split.train_samples()[:4])
    out = forward_dual(res.model, res.classifier, x, phase2_sir(_cfg().ablate("sir")))
    assert torch.equal(out.p_seg, out.p_seg_hat)


def test_resume_from_phase1_snapshot_matches_scratch(split):
    full = train(split.train_samples(), _cfg())
    other = train(split.train_samples(), _cfg().ablate("adv"))
    resumed = train(split.train_samples(), _cfg(), resume=other.phase1)
    assert np.array_equal(_losses(full.log), _losses(resumed.log))
    assert _same_params(full.model, resumed.model)
    with pytest.raises(ICSLError):
        train(split.train_samples(), _cfg(learning_rate=5e-4), resume=other.phase1)


def test_alternating_mode_runs(split):
    res = train(split.train_samples(), _cfg(adv_mode="alternating"))
    assert all(math.isfinite(r["total"]) for r in res.log)
    assert res.log[-1]["phase"] == 2


def test_poly_schedule_decays(split):
    res = train(split.train_samples(), _cfg(lr_schedule="poly"))
    p2 = [r["lr"] for r in res.log if r["phase"] == 2]
    assert p2[0] == pytest.approx(1e-3) and all(a > b for a, b in zip(p2, p2[1:]))
    assert all(r["lr"] == 1e-3 for r in res.log if r["phase"] == 1)


def test_run_dir_layout_and_checkpoints(tmp_path, split, small_corpus):
    res = train(split.train_samples(), _cfg(checkpoint_every=2), split.held_in_test(),
                small_corpus.decomposition, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert {"config.cfg", "train_log.jsonl", "final.npz", "best.npz", "epoch0002.npz", "epoch0004.npz"} <= set(names)
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert len([l for l in lines if "step" in l]) == len(res.log)
    _, _, manifest = load_checkpoint(tmp_path / "final.npz")
    assert manifest["step"] == 8 and manifest["phase"] == 2


def test_checkpoint_round_trip_is_bit_identical(tmp_path, split, small_corpus):
    res = train(split.train_samples(), _cfg())
    names = {d.domain_id: d.name for d in small_corpus.domains}
    before = evaluate(res.model, split.test_domain.test, small_corpus.decomposition, names)
    path = save_checkpoint(tmp_path / "m.npz", res.model, res.classifier, _cfg().model)
    model, clf, _ = load_checkpoint(path)
    after = evaluate(model, split.test_domain.test, small_corpus.decomposition, names)
    assert before.to_dict() == after.to_dict()
    assert _same_params(res.classifier, clf)


def test_non_finite_loss_aborts_with_context(tmp_path, split, monkeypatch):
    real = trainer_mod.seg_loss
    calls = {"n": 0}

    def flaky(p, q, y):
        calls["n"] += 1
        out = real(p, q, y)
        return out * float("nan") if calls["n"] == 3 else out

    monkeypatch.setattr(trainer_mod, "seg_loss", flaky)
    with pytest.raises(NumericError, match=r"seg.*step 3 \(epoch 2, phase 1\)"):
        train(split.train_samples(), _cfg(), run_dir=tmp_path)
    model, _, manifest = load_checkpoint(tmp_path / "last_good.npz")
    assert manifest["step"] == 2


def test_lodo_failed_split_does_not_abort(small_corpus, monkeypatch):
    real = trainer_mod.train

    def failing(samples, config, *a, **kw):
        if config.seed % 1000 == 1:
            raise NumericError("consist is nan")
        return real(samples, config, *a, **kw)

    monkeypatch.setattr(trainer_mod, "train", failing)
    res = run_lodo(small_corpus, _cfg(phase1_epochs=1, phase2_epochs=1))
    assert res.report.failed == {1: "NumericError: consist is nan"}
    assert res.report.entries[(0, "disc")].n == len(small_corpus.domains[0].test)
    assert "failed" in res.table()


def test_lodo_parallel_equals_sequential(small_corpus):
    cfg = _cfg(phase1_epochs=1, phase2_epochs=1)
    seq = run_lodo(small_corpus, cfg)
    par = run_lodo(small_corpus, cfg, jobs=2)
    assert seq.report.to_dict() == par.report.to_dict()
    for a, b in zip(seq.splits, par.splits):
        assert np.array_equal(_losses(a.log), _losses(b.log))


def test_comparison_shares_phase1_without_changing_results(small_corpus):
    cfg = _cfg(phase1_epochs=1, phase2_epochs=1)
    both = run_comparison(small_corpus, {"full": cfg, "no_adv": cfg.ablate("adv")})
    alone = run_lodo(small_corpus, cfg.ablate("adv"))
    assert both["no_adv"].report.to_dict()["entries"] == alone.report.to_dict()["entries"]


def test_lodo_report_overall_is_mean_of_class_averages(small_corpus):
    res = run_lodo(small_corpus, _cfg(phase1_epochs=1, phase2_epochs=0))
    rep = res.report
    assert sorted(rep.domains) == [0, 1]
    expected = np.mean([np.mean([rep.entries[(d, c)].dice for d in (0, 1)]) for c in rep.class_names])
    assert abs(rep.overall() - expected) < 1e-9


def test_sweep_rows(small_corpus):
    cfg = _cfg(phase1_epochs=1, phase2_epochs=1)
    rows = run_sweep(small_corpus, cfg, "lambda_adv", [0.0, 0.2])
    assert [r["value"] for r in rows] == [0.0, 0.2]
    assert all(math.isfinite(r["dice"]) and r["parameter"] == "lambda_adv" for r in rows)
    default = run_lodo(small_corpus, cfg)
    assert rows[1]["dice"] == default.report.overall()


def test_sweep_config_validation():
    cfg = _cfg()
    s = sweep_config(cfg, "lambda_style_fixed", 0.4).sir
    assert s.lambda_mode == "fixed" and s.lambda_fixed == 0.4
    assert cfg.sir.lambda_mode == "uniform"
    for param, value in (("lambda_style_fixed", 1.5), ("lambda_adv", -0.1), ("gamma", 1.0)):
        with pytest.raises(ValueError):
            sweep_config(cfg, param, value)


def test_style_lambda_one_matches_sir_off(split):
    base = _cfg()
    one = train(split.train_samples(), sweep_config(base, "lambda_style_fixed", 1.0))
    off = train(split.train_samples(), base.ablate("sir"))
    a, b = _losses(one.log), _losses(off.log)
    assert np.abs(a[:, 0] - b[:, 0]).max() < 1e-3
    assert np.abs(a[:, 1]).max() < 1e-3


@pytest.mark.slow
def test_phase1_loss_halves_within_ten_epochs():
    corpus = generate_synthetic(SynthSpec(seed=0))
    sp = lodo_splits(corpus)[0]
    cfg = resolve_config("desk", overrides={"phase2_epochs": 0, "phase1_epochs": 10})
    res = train(sp.train_samples(), cfg)
    per_epoch = {}
    for r in res.log:
        per_epoch.setdefault(r["epoch"], []).append(r["seg"])
    first, last = np.mean(per_epoch[1]), np.mean(per_epoch[10])
    assert last <= 0.5 * first


def test_comparison_parallel_equals_sequential(small_corpus):
    cfg = _cfg(phase1_epochs=1, phase2_epochs=1)
    variants = {"full": cfg, "base": cfg.ablate("sir", "consist", "adv")}
    seq = run_comparison(small_corpus, variants)
    par = run_comparison(small_corpus, variants, jobs=2)
    for name in variants:
        assert seq[name].report.to_dict() == par[name].report.to_dict()
