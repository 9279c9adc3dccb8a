import math

import numpy as np
import pytest

from kicl.baselines import (FULL_ACTION, FullActionModel, MethodSpec, decode_method,
                            hap_actions, load_methods_cfg, load_model, run_hap, run_rmb,
                            train_method)
from kicl.discourse import BaselineSignal
from kicl.errors import ConfigError, InputError
from kicl.marketdata import generate_market
from kicl.metrics import betrayal_metrics, perf_metrics
from kicl.policy import KiclConfig, KiclModel
from kicl.portfolio import PortfolioConfig
from kicl.replay import build_replay

from conftest import small_world

SMALL = dict(hidden=(16, 16), iql_steps=30, bc_epochs=2, batch=64, log_interval=10)
TAU = 5e-4


def one_signal(n_days=60, day=30, signals=None):
    series = generate_market(0, 1, n_days)
    sigs = signals or [BaselineSignal("kol_00", "T000", day, 1.0, 0.9, math.tanh(1.8))]
    return build_replay(series, sigs, kol_ids=["kol_00"])


def daily(res):
    days = np.unique(res.trading_days)
    return np.array([res.contrib[res.trading_days == d].sum() for d in days])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rmb_is_the_anchor(seed):
    buf = small_world(seed)[3]
    res = run_rmb(buf)
    assert betrayal_metrics(res.weights, res.a_base) == {"UER": 0.0, "DRR": 0.0, "BD": 0.0}
    assert np.array_equal(res.weights, buf.baseline_actions)


def test_rmb_event_free_is_flat():
    buf = build_replay(generate_market(0, 2, 60), [], kol_ids=["kol_00"])
    res = run_rmb(buf, PortfolioConfig(cost_rate=0.0))
    assert perf_metrics(daily(res))["CR"] == 0.0


def test_hap_holds_past_the_anchor():
    buf = one_signal()
    acts = hap_actions(buf, hold_days=10, size=0.1)
    i = int(np.flatnonzero(buf.trading_days == 30)[0])
    assert np.all(acts[i : i + 10] == 0.1) and np.all(acts[i + 10 :] == 0.0)
    silent_held = (np.abs(buf.baseline_actions) < TAU) & (np.abs(acts) > TAU)
    assert silent_held.sum() == 4
    res = run_hap(buf)
    assert np.count_nonzero((np.abs(res.a_base) < TAU) & (np.abs(res.weights) > TAU)) == 4


def test_hap_hold_one_day():
    buf = one_signal()
    acts = hap_actions(buf, hold_days=1)
    assert np.count_nonzero(acts) == 1 and acts[buf.fresh][0] == 0.1
    with pytest.raises(InputError):
        hap_actions(buf, hold_days=0)


def test_hap_flips_on_opposite_signal():
    sigs = [BaselineSignal("kol_00", "T000", 30, 1.0, 0.9, math.tanh(1.8)),
            BaselineSignal("kol_00", "T000", 33, -1.0, 0.9, -math.tanh(1.8))]
    buf = one_signal(signals=sigs)
    acts = hap_actions(buf)
    j = int(np.flatnonzero(buf.trading_days == 33)[0])
    assert acts[j - 1] == 0.1 and acts[j] == -0.1
    sig = np.abs(buf.baseline_actions) >= TAU
    assert acts[j] * buf.baseline_actions[j] > 0
    assert np.count_nonzero(sig & (acts * buf.baseline_actions < 0)) == 0


def test_sup_delta_is_sound(splits):
    spec = MethodSpec("SUP-DELTA")
    model, _ = train_method(spec, splits[0], KiclConfig(**SMALL), seed=0)
    assert model.config.hard_scope == "infer_only" and model.config.iql_steps == 0
    res = decode_method(spec, model, splits[2], PortfolioConfig())
    bet = betrayal_metrics(res.weights, res.a_base)
    assert bet["UER"] == 0.0 and bet["DRR"] == 0.0


def test_bc_on_anchor_data_has_small_bd(splits):
    import dataclasses
    train = dataclasses.replace(splits[0], behavior_actions=splits[0].baseline_actions.copy())
    cfg = KiclConfig(**{**SMALL, "bc_epochs": 120, "lr_actor": 3e-3})
    model, _ = train_method(MethodSpec("BC"), train, cfg, seed=0)
    res = decode_method(MethodSpec("BC"), model, train, PortfolioConfig())
    assert betrayal_metrics(res.raw, res.a_base)["BD"] < 0.02


@pytest.mark.parametrize("method", FULL_ACTION)
def test_full_action_methods_run(method, splits, tmp_path):
    spec = MethodSpec(method)
    model, log = train_method(spec, splits[0], KiclConfig(**SMALL), seed=0)
    assert isinstance(model, FullActionModel) and len(log.rows) == 3
    res = decode_method(spec, model, splits[2], PortfolioConfig())
    assert np.all(np.abs(res.raw) <= 0.2) and np.all(np.isfinite(res.weights))
    model.save(tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert np.array_equal(back.act(splits[2].states, splits[2].baseline_actions),
                          model.act(splits[2].states, splits[2].baseline_actions))


def test_td3bc_heavy_bc_tracks_behavior(splits):
    spec = MethodSpec("TD3+BC", constants={"alpha": 1e-6})
    cfg = KiclConfig(**{**SMALL, "iql_steps": 1500, "lr_actor": 3e-3})
    model, _ = train_method(spec, splits[0], cfg, seed=0)
    a = model.act(splits[0].states, splits[0].baseline_actions)
    assert float(np.mean(np.abs(a - splits[0].behavior_actions))) < 1e-2


def test_kicl_model_loads_as_kicl(splits, tmp_path):
    model, _ = train_method(MethodSpec("KICL"), splits[0], KiclConfig(**SMALL), seed=0)
    model.save(tmp_path / "k")
    assert isinstance(load_model(tmp_path / "k"), KiclModel)


def test_heuristics_skip_training(splits):
    assert train_method(MethodSpec("RMB"), splits[0], KiclConfig(**SMALL)) == (None, None)
    assert not MethodSpec("HAP").trains and MethodSpec("CQL").trains


def test_methods_cfg(tmp_path):
    p = tmp_path / "methods.cfg"
    p.write_text("[methods]\nrun = RMB, CQL, HAP\n\n[CQL]\nsteps = 50\nalpha = 5\n\n"
                 "[HAP]\nhold_days = 3\n")
    specs = load_methods_cfg(p)
    assert [s.method for s in specs] == ["RMB", "CQL", "HAP"]
    assert specs[1].steps == 50 and specs[1].constants["alpha"] == 5.0
    assert specs[1].constants["n_samples"] == 10 and specs[2].constants["hold_days"] == 3.0
    p.write_text("[methods]\nrun = RMB, XYZ\n")
    with pytest.raises(ConfigError):
        load_methods_cfg(p)
    p.write_text("[methods]\nrun = CQL\n[CQL]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        load_methods_cfg(p)
    with pytest.raises(ConfigError):
        load_methods_cfg(tmp_path / "missing.cfg")
