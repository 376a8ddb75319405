import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import toy_config, toy_split
from gacl.dataset import SplitDataset, make_synthetic, parse_records, split_by_density
from gacl.diffcore import NonFiniteError
from gacl.dyngraph import build_graph
from gacl.harness import (
    BaselineWarning,
    ConfigError,
    ConfigMismatchError,
    GACLModel,
    GridWarning,
    LeakageAudit,
    MetricsReport,
    ModelConfig,
    NoEligibleTargets,
    ablation_table,
    baseline_global_mean,
    compare_to_baseline,
    eligible_targets,
    evaluate,
    load_config,
    mae,
    nmae,
    predict_targets,
    reports_to_csv,
    rmse,
    run_ablation_suite,
    train,
)
from gacl.harness.training import window_builder

# -- metrics -----------------------------------------------------------------


def test_metric_examples():
    assert mae([2, 4], [1, 2]) == 1.5
    assert nmae([2, 4], [1, 2]) == 1.0
    assert rmse([2, 4], [1, 2]) == pytest.approx(1.58114, abs=1e-5)
    assert mae([0], [5]) == 5


def test_metrics_zero_on_perfect_prediction():
    a = [0.3, 1.2, 7.0]
    assert mae(a, a) == nmae(a, a) == rmse(a, a) == 0.0


def test_single_pair_rmse_equals_mae():
    assert rmse([3.5], [1.0]) == mae([3.5], [1.0]) == 2.5


@pytest.mark.parametrize("f", [mae, nmae, rmse])
def test_metric_errors(f):
    with pytest.raises(ValueError):
        f([], [])
    with pytest.raises(ValueError):
        f([1.0], [1.0, 2.0])


def test_nmae_zero_sum():
    with pytest.raises(ValueError):
        nmae([1.0], [0.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0.01, 100)), min_size=1, max_size=30),
       st.floats(0.01, 100))
def test_metric_properties(pairs, c):
    p = np.array([x for x, _ in pairs])
    a = np.array([y for _, y in pairs])
    assert mae(p, a) <= rmse(p, a) + 1e-12
    assert nmae(c * p, c * a) == pytest.approx(nmae(p, a), rel=1e-9, abs=1e-12)


def test_report_json_round_trip_and_stable():
    r = MetricsReport.from_predictions([1.0, 2.0], [1.5, 2.0], dataset="x", density=0.1, ablation="full",
                                       config_hash="abc", wall_time=3.2)
    payload = json.loads(r.to_json())
    assert payload["schema"] == 1 and "wall_time" not in payload
    assert MetricsReport.from_dict(payload).to_json() == r.to_json()
    assert "wall_time" in r.to_dict(include_timing=True)


def test_report_csv_columns():
    r = MetricsReport.from_predictions([1.0], [2.0], dataset="x", density=0.05, ablation="gacl-t",
                                       config_hash="h")
    lines = reports_to_csv([r]).splitlines()
    assert lines[0] == "dataset,density,ablation,mae,nmae,rmse,n_eval"
    assert lines[1] == "x,0.05,gacl-t,1.0,0.5,1.0,1"


# -- config ------------------------------------------------------------------

def test_default_preset():
    cfg = ModelConfig()
    assert (cfg.ws, cfg.l_tf, cfg.l_hd, cfg.l_g, cfg.d) == (32, 8, 8, 2, 128)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cfg.validate(strict_grid=True)


def test_off_grid_warns_or_fails():
    cfg = toy_config()
    with pytest.warns(GridWarning):
        cfg.validate()
    with pytest.raises(ConfigError):
        cfg.validate(strict_grid=True)


@pytest.mark.parametrize("change", [dict(l_g=5), dict(d=7, l_hd=1), dict(d=8, l_hd=3), dict(density=1.0),
                                    dict(batch_size=0), dict(lr=float("nan")), dict(target_mode="log"),
                                    dict(neighbor_cap=0), dict(epochs=-1)])
def test_invalid_config(change):
    with pytest.raises(ConfigError):
        toy_config(**change).validate()


def test_unknown_keys_listed():
    with pytest.raises(ConfigError, match="bogus, extra"):
        ModelConfig.from_mapping({"d": 32, "extra": 1, "bogus": 2})


def test_config_hash_stable_under_key_order():
    a = ModelConfig.from_mapping({"d": 64, "ws": 4, "lr": 0.01})
    b = ModelConfig.from_mapping({"lr": 0.01, "ws": 4, "d": 64})
    assert a.config_hash() == b.config_hash()
    assert a.replace(workers=4, epochs=3).config_hash() == a.config_hash()
    assert a.replace(seed_init=1).config_hash() != a.config_hash()


def test_neighbor_cap_infinity_spellings():
    assert ModelConfig(neighbor_cap="inf").neighbor_cap is None
    assert ModelConfig(neighbor_cap=float("inf")).neighbor_cap is None


def test_load_config_toml_and_json(tmp_path):
    t = tmp_path / "c.toml"
    t.write_text('d = 64\nablation = "tw"\nneighbor_cap = "inf"\n')
    cfg = load_config(t)
    assert cfg.d == 64 and cfg.ablation == "semantic_only" and cfg.neighbor_cap is None
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"ws": 8}))
    assert load_config(j).ws == 8
    bad = tmp_path / "bad.toml"
    bad.write_text("d = = 3")
    with pytest.raises(ConfigError):
        load_config(bad)


# -- training ----------------------------------------------------------------

def test_eligible_targets_respect_window():
    sp = toy_split()
    tg = eligible_targets(sp.train, 2)
    assert len(tg) and np.all(tg.slices >= 2)


def test_no_eligible_targets():
    with pytest.raises(NoEligibleTargets):
        train(toy_config(ws=3), toy_split())


def test_zero_epochs_returns_initial_parameters():
    sp = toy_split()
    cfg = toy_config(epochs=0)
    result = train(cfg, sp)
    assert result.log == [] and result.epochs_run == 0
    fresh = GACLModel(cfg, sp.n_users, sp.n_services, sp.train.value_min, sp.train.value_max,
                      output_bias=float(result.model.ps["predictor.b_o"].data))
    assert fresh.ps.content_hash() == result.model.ps.content_hash()


def test_training_log_fields_and_loss_decreases():
    result = train(toy_config(epochs=30, lr=1e-2), toy_split())
    assert set(result.log[0]) == {"epoch", "train_loss", "train_mse", "val_mae", "lr", "wall_time"}
    assert result.log[-1]["train_mse"] < result.log[0]["train_mse"]
    lines = result.log_jsonl().splitlines()
    assert len(lines) == 30 and json.loads(lines[0])["epoch"] == 0


def test_training_deterministic(tmp_path):
    cfg = toy_config(epochs=3)
    a, b = train(cfg, toy_split()), train(cfg, toy_split())
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt.json").read_bytes() == (tmp_path / "b.ckpt.json").read_bytes()
    c = train(cfg.replace(seed_sample=1), toy_split())
    assert c.model.ps.content_hash() != a.model.ps.content_hash()


def test_worker_sharding_matches_serial():
    sp = toy_split(4, 4, 3, density=0.9)
    a = train(toy_config(epochs=2, batch_size=8), sp)
    b = train(toy_config(epochs=2, batch_size=8, workers=3), sp)
    for name, t in a.model.ps.items():
        assert np.allclose(t.data, b.model.ps[name].data, atol=1e-10, rtol=0)


def test_early_stopping_restores_best():
    sp = toy_split(5, 6, 4, density=0.8)
    result = train(toy_config(epochs=200, patience=2, lr=5e-2, val_fraction=0.3), sp)
    assert result.stopped_early and result.epochs_run < 200
    best = min(e["val_mae"] for e in result.log)
    assert result.early_stop_state["best_val"] == best
    assert result.log[result.early_stop_state["best_epoch"]]["val_mae"] == best


def test_nonfinite_training_raises():
    with pytest.raises(NonFiniteError):
        train(toy_config(epochs=3, lr=1e300), toy_split())


def test_resume_continues_log(tmp_path):
    sp = toy_split()
    full = train(toy_config(epochs=4), sp)
    first = train(toy_config(epochs=2), sp)
    first.save(tmp_path / "half.ckpt")
    rest = train(toy_config(epochs=4), sp, resume=tmp_path / "half.ckpt")
    assert [e["epoch"] for e in rest.log] == [2, 3]
    for name, t in full.model.ps.items():
        assert np.allclose(t.data, rest.model.ps[name].data, atol=1e-12, rtol=0)


def test_resume_rejects_other_config(tmp_path):
    sp = toy_split()
    train(toy_config(epochs=1), sp).save(tmp_path / "m.ckpt")
    with pytest.raises(ConfigMismatchError):
        train(toy_config(epochs=2, d=6), sp, resume=tmp_path / "m.ckpt")


def test_leakage_audit_counts_no_test_records():
    sp = split_by_density(make_synthetic(5, 6, 4, seed=3), 0.5, 3)
    audit = LeakageAudit()
    train(toy_config(epochs=2, ws=2, l_g=2), sp, audit=audit)
    test = [(int(r.user), int(r.service), int(r.slice)) for r in sp.test.records()]
    assert audit.target_triples and audit.edge_triples
    assert audit.touched(test) == 0


# -- evaluation ----------------------------------------------------------------

def test_evaluate_report_and_mismatch(tmp_path):
    sp = toy_split()
    cfg = toy_config(epochs=2)
    model = train(cfg, sp).model
    report = evaluate(model, sp, cfg)
    assert report.n_eval == len(eligible_targets(sp.test, cfg.ws))
    assert report.mae <= report.rmse and report.ablation == "full"
    with pytest.raises(ConfigMismatchError):
        evaluate(model, sp, cfg.replace(seed_init=9))
    with pytest.warns(UserWarning):
        forced = evaluate(model, sp, cfg.replace(seed_init=9), force=True)
    assert forced.to_json() == report.to_json()


def test_evaluate_perfect_stub():
    rows = "".join(f"{u} {s} {t} 2.0\n" for u in range(3) for s in range(3) for t in range(3))
    sp = split_by_density(parse_records(rows.encode()), 0.5, 0)
    cfg = toy_config()
    model = GACLModel(cfg, sp.n_users, sp.n_services)
    model.ps["predictor.W_o"].data[...] = 0.0
    model.ps["predictor.b_o"].data[...] = 2.0
    report = evaluate(model, sp)
    assert report.mae == report.nmae == report.rmse == 0.0


def test_slice_grouping_has_no_effect():
    sp = toy_split(4, 4, 3, density=0.6)
    model = train(toy_config(epochs=1, ws=1), sp).model
    builder = window_builder(model, build_graph(sp))
    triples = eligible_targets(sp.test, 1).triples()
    a = predict_targets(model, builder, triples, batch_size=3, group_by_slice=True)
    b = predict_targets(model, builder, triples, batch_size=3, group_by_slice=False)
    assert np.allclose(a, b, atol=1e-12, rtol=0)


def test_model_save_load_round_trip(tmp_path):
    sp = toy_split()
    model = train(toy_config(epochs=1), sp).model
    model.save(tmp_path / "m.ckpt")
    loaded, meta, _ = GACLModel.load(tmp_path / "m.ckpt")
    assert meta["config_hash"] == model.config.config_hash()
    assert loaded.ps.content_hash() == model.ps.content_hash()
    assert evaluate(loaded, sp).to_json() == evaluate(model, sp).to_json()


# -- baseline ------------------------------------------------------------------

def _manual_split(values_train, values_test):
    rows = [(0, i, 0, v) for i, v in enumerate(values_train + values_test)]
    ds = parse_records("".join(f"{u} {s} {t} {v}\n" for u, s, t, v in rows).encode())
    n = len(values_train)
    return SplitDataset(ds, np.arange(n), np.arange(n, len(rows)), 0.5, 0)


def test_baseline_two_value_set():
    r = baseline_global_mean(_manual_split([0.0, 2.0], [0.0, 2.0]))
    assert r.mae == 1.0 and r.rmse == 1.0


def test_baseline_midpoint():
    r = baseline_global_mean(_manual_split([0.0, 2.0], [1.0]))
    assert r.mae == 0.0 and r.n_eval == 1


def test_baseline_constant_dataset():
    r = baseline_global_mean(_manual_split([3.0, 3.0], [3.0, 3.0]))
    assert r.mae == r.nmae == r.rmse == 0.0


def test_baseline_comparison_warns():
    good = MetricsReport.from_predictions([1.0], [1.1], dataset="x", density=0.5, ablation="full", config_hash="h")
    bad = MetricsReport.from_predictions([1.0], [3.0], dataset="x", density=0.5, ablation="full", config_hash="h")
    assert compare_to_baseline(good, bad)
    with pytest.warns(BaselineWarning):
        assert not compare_to_baseline(bad, good)


# -- ablation suite ------------------------------------------------------------

def test_ablation_suite_variants_converge_and_differ_only_in_flag():
    sp = split_by_density(make_synthetic(), 0.8, 0)
    base = toy_config(d=8, ws=2, l_hd=2, epochs=60, lr=1e-2, batch_size=32, reg_lambda=1e-3)
    reports, results = run_ablation_suite(base, sp, dataset_name="synthetic", return_results=True)
    assert [r.ablation for r in reports] == ["full", "gacl-t", "gacl-w", "gacl-tw"]
    configs = [res.model.config.to_dict() for res in results]
    for cfg in configs[1:]:
        diff = {k for k in cfg if cfg[k] != configs[0][k]}
        assert diff == {"ablation"}
    for res in results:
        assert res.log[-1]["train_loss"] < 1e-1
    tw = results[3].model.ps
    assert not any(("W_w" in n or "W_alpha" in n or "W_beta" in n) for n in tw.names())
    counts = [res.model.ps.count() for res in results]
    assert counts[0] > max(counts[1], counts[2]) and min(counts[1], counts[2]) > counts[3]
    table = ablation_table(reports).splitlines()
    assert len(table) == 5 and table[0].startswith("dataset,density,ablation")
