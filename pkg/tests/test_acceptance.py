"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before it
asserts, so a run lists every verdict even when some fail.
"""
import dataclasses
import decimal
import hashlib
import math
import statistics
import time
import zlib

import numpy as np

from kicl.baselines import MethodSpec, run_rmb, train_method
from kicl.config import preset
from kicl.discourse import (BaselineSignal, CandidateKol, baseline_raw, baseline_signals,
                            generate_discourse, rank_kols)
from kicl.fixtures import REFERENCE_COUNTS, SYNTH_START, adversarial_replay, count_fixture
from kicl.losses import expectile_of
from kicl.marketdata import MarketSeries, TradingCalendar, compute_factors, generate_market
from kicl.metrics import betrayal_metrics, build_traces, evaluate, mean_report, perf_metrics
from kicl.metrics import event_win_rate
from kicl.pipeline import Pipeline
from kicl.policy import KiclConfig, decode, propose_delta
from kicl.replay import (ReplayBuffer, StateLayout, build_replay, chronological_split,
                         partition_stats, regime_decomposition)
from kicl.training import train_kicl

import _oracles as O
from _acceptance_log import record
from _gradcheck import LOSS_CASES, REL_TOL
from _helpers import fit_expectile_value

from conftest import small_world

# --- 1 ---------------------------------------------------------------------------------

SWEEP_SEEDS = range(50)
SWEEP_BUDGET_S = 600.0
# Soundness is a property of decode-time projection, not of how well the nets
# are trained, so the sweep runs the desk data with a short training budget.
SWEEP_TRAIN = dict(bc_epochs=1, iql_steps=100)


def desk_replay(seed):
    cfg = preset("desk")
    m, d = cfg.market, cfg.discourse
    series = generate_market(seed, m.n_tickers, m.n_days, m.regime)
    cal = TradingCalendar.business_days(SYNTH_START, m.n_days)
    events = generate_discourse(seed, [s.ticker for s in series], cal, d.intensity, d.params)
    kols = [f"kol_{k:02d}" for k in range(d.params.n_kols)]
    buf = build_replay(series, baseline_signals(events, cal), cfg.behavior, cfg.portfolio, kols)
    return cfg, buf


def test_01_constraint_soundness_sweep():
    t0 = time.perf_counter()
    worst = {"uer": 0.0, "drr": 0.0}
    bad = []
    for seed in SWEEP_SEEDS:
        cfg, buf = desk_replay(seed)
        splits = chronological_split(buf, cfg.eval.split_ratios)
        for scope in ("both", "infer_only"):
            kcfg = dataclasses.replace(cfg.kicl, hard_scope=scope, **SWEEP_TRAIN)
            model, _ = train_kicl(splits[0], kcfg, seed)
            for part in splits[1:]:
                res = decode(model, part, scope, cfg.portfolio)
                reports = build_traces(res, run_rmb(part, cfg.portfolio))
                for trace in reports.values():
                    r = evaluate(trace, cfg.portfolio.tau_entry)
                    worst["uer"] = max(worst["uer"], r.uer)
                    worst["drr"] = max(worst["drr"], r.drr)
                    if r.uer != 0.0 or r.drr != 0.0:
                        bad.append((seed, scope))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < SWEEP_BUDGET_S
    record(1, "constraint soundness", ok,
           f"{len(SWEEP_SEEDS)} seeds x {{both, infer_only}}, max UER={worst['uer']} "
           f"max DRR={worst['drr']}, {elapsed:.0f}s")
    assert not bad, bad
    assert elapsed < SWEEP_BUDGET_S


# --- 2 ---------------------------------------------------------------------------------


def test_02_ablation_direction_on_adversarial_fixture():
    buf = adversarial_replay(0)
    train, _, test = chronological_split(buf)
    out = {}
    for name, scope in (("WO-H", "none"), ("Full", "both")):
        cfg = KiclConfig(iql_steps=1000, regime_split=True, hard_scope=scope)
        model, _ = train_kicl(train, cfg, seed=0)
        res = decode(model, test, scope)
        traces = build_traces(res, run_rmb(test))
        out[name] = mean_report(evaluate(t) for t in traces.values())
    wo, full = out["WO-H"], out["Full"]
    ok = wo.drr >= 0.2 and full.drr == 0.0 and full.ret >= wo.ret
    record(2, "ablation direction", ok,
           f"WO-H DRR={wo.drr:.3f} CR={wo.ret:.4f}; Full DRR={full.drr} CR={full.ret:.4f}")
    assert wo.drr >= 0.2 and full.drr == 0.0 and full.ret >= wo.ret


# --- 3 ---------------------------------------------------------------------------------


def test_03_gradient_checks():
    worst = {}
    for name, case in LOSS_CASES.items():
        rng = np.random.default_rng(zlib.crc32(b"acceptance-" + name.encode()))
        worst[name] = max(case(rng) for _ in range(100))
    ok = max(worst.values()) < REL_TOL
    record(3, "gradient correctness", ok,
           f"{len(worst)} losses x 100 points, worst rel err "
           f"{max(worst.values()):.2e} ({max(worst, key=worst.get)})")
    assert ok, worst


# --- 4 ---------------------------------------------------------------------------------


def test_04_expectile_oracle():
    rng = np.random.default_rng(4)
    fixtures = [np.array([0.0, 1.0]), rng.normal(size=200), rng.exponential(size=50)]
    errs = []
    for xs in fixtures:
        v, _ = fit_expectile_value(xs, 0.7)
        errs.append(abs(v - expectile_of(xs, 0.7)))
    ok = max(errs) < 1e-3
    record(4, "expectile oracle", ok, f"max |V - e_0.7| = {max(errs):.2e}")
    assert ok


# --- 5 ---------------------------------------------------------------------------------


def test_05_metric_oracles():
    rng = np.random.default_rng(5)
    worst = dict.fromkeys(("MDD", "CR", "Sharpe", "UER", "DRR", "BD", "WR"), 0.0)
    for _ in range(100):
        t = O.random_trace(rng)
        _, daily = t.daily()
        p = perf_metrics(daily)
        b = betrayal_metrics(t.a_policy, t.a_base)
        got = {"MDD": p["MDD"], "CR": p["CR"], "Sharpe": p["Sharpe"], "UER": b["UER"],
               "DRR": b["DRR"], "BD": b["BD"], "WR": event_win_rate(t)[0]}
        want = {"MDD": O.mdd(daily), "CR": O.cr(daily), "Sharpe": O.sharpe(daily),
                "UER": O.uer(t.a_policy, t.a_base), "DRR": O.drr(t.a_policy, t.a_base),
                "BD": O.bd(t.a_policy, t.a_base), "WR": O.win_rate(t)}
        for k in worst:
            worst[k] = max(worst[k], abs(got[k] - want[k]))
    flat = [perf_metrics(np.full(n, c))["Sharpe"] for n, c in ((30, 0.001), (5, -0.02), (2, 0))]
    ok = max(worst.values()) <= 1e-10 and all(s == 0.0 for s in flat)
    record(5, "metric oracles", ok,
           f"max abs err {max(worst.values()):.1e} over 100 traces; sigma=0 Sharpe {flat}")
    assert ok, worst


# --- 6 ---------------------------------------------------------------------------------


def naive_factors(close, volume, t):
    rets = [close[i] / close[i - 1] - 1.0 for i in range(t - 19, t + 1)]

    def pstd(xs):  # population std, ddof = 0
        m = math.fsum(xs) / len(xs)
        return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / len(xs))

    vols = list(volume[t - 19 : t + 1])
    mv = math.fsum(vols) / 20
    sv = pstd(vols)
    sma = math.fsum(close[t - 19 : t + 1]) / 20
    return [close[t] / close[t - 1] - 1.0, close[t] / close[t - 5] - 1.0, pstd(rets[-5:]),
            pstd(rets), 0.0 if sv == 0 else (volume[t] - mv) / sv, close[t] / sma - 1.0]


def test_06_factor_fidelity():
    rng = np.random.default_rng(6)
    err = 0.0
    for _ in range(50):
        n = int(rng.integers(21, 60))
        close = 100 * np.exp(np.cumsum(rng.normal(0, 0.02, n)))
        vol = rng.lognormal(13, 0.5, n)
        s = MarketSeries("X", np.arange(n), close, close, close, close, vol)
        for t in range(20, n):
            err = max(err, float(np.max(np.abs(
                compute_factors(s, t).as_array() - np.array(naive_factors(close, vol, t))))))
    # ddof = 0: the 5-day vol of returns (+a, -a, +a, -a, +a) scaled around their mean
    close = 100 * np.cumprod(np.r_[1.0, np.tile([1.01, 1 / 1.01], 15)])
    s = MarketSeries("X", np.arange(31), close, close, close, close, np.full(31, 1e6))
    f = compute_factors(s, 30)
    r = close[26:31] / close[25:30] - 1
    ddof0 = abs(f.vol_5d - float(np.std(r, ddof=0))) < 1e-12
    ddof1_differs = abs(f.vol_5d - float(np.std(r, ddof=1))) > 1e-6
    fallback = f.volu_z_20d == 0.0
    ok = err < 1e-12 and ddof0 and ddof1_differs and fallback
    record(6, "factor fidelity", ok,
           f"max err {err:.1e}; ddof=0 {ddof0 and ddof1_differs}; const-volume z {f.volu_z_20d}")
    assert ok


# --- 7 ---------------------------------------------------------------------------------


def test_07_partition_arithmetic():
    st = partition_stats(count_fixture(**REFERENCE_COUNTS))
    rng = np.random.default_rng(7)
    gap = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 500))
        losses = rng.exponential(1.0, n) * rng.uniform(0.1, 10)
        mask = rng.random(n) < rng.uniform(0.01, 0.5)
        full, parts = regime_decomposition(losses, mask)
        gap = max(gap, abs(full - parts))
    ok = abs(st["ratio"] - 25.93) <= 0.01 and abs(st["pct_sig"] - 3.71) <= 0.01 and gap <= 1e-12
    record(7, "partition arithmetic", ok,
           f"ratio {st['ratio']:.4f}, signal share {st['pct_sig']:.4f}%, "
           f"decomposition gap {gap:.1e}")
    assert ok


# --- 8 ---------------------------------------------------------------------------------


def test_08_equivalence_reductions(splits):
    base = KiclConfig(hidden=(32, 32), iql_steps=300, bc_epochs=3, batch=128, log_interval=25)
    stripped = dataclasses.replace(base, lambda_fid=0.0, actor_align=0.0, lambda_ent=0.0,
                                   lambda_rev=0.0, anchor_w=0.0, hard_scope="none",
                                   regime_split=False)
    _, log_kicl = train_kicl(splits[0], stripped, seed=3)
    _, log_iql = train_method(MethodSpec("IQL"), splits[0], base, seed=3)
    iql_same = (log_kicl.rows == log_iql.rows and
                log_kicl.bc_epoch_losses == log_iql.bc_epoch_losses and len(log_kicl.rows) > 0)
    m_k, l_k = train_kicl(splits[0], dataclasses.replace(stripped, iql_steps=0), seed=3)
    m_b, l_b = train_method(MethodSpec("BC"), splits[0], base, seed=3)
    v = splits[1]
    bc_same = (l_k.rows == [] and l_k.bc_epoch_losses == l_b.bc_epoch_losses and
               np.array_equal(propose_delta(m_k, v.states, v.baseline_actions, v.fresh),
                              propose_delta(m_b, v.states, v.baseline_actions, v.fresh)))
    record(8, "equivalence reductions", iql_same and bc_same,
           f"stripped KICL == IQL logs: {iql_same}; iql_steps=0 == BC: {bc_same}")
    assert iql_same and bc_same


# --- 9 ---------------------------------------------------------------------------------


def tanh_hp(x: float) -> float:
    with decimal.localcontext() as ctx:
        ctx.prec = 50
        e = (decimal.Decimal(x) * 2).exp()
        return float((e - 1) / (e + 1))


def rmb_fixtures():
    yield "small-0", small_world(0)[3]
    yield "small-1", small_world(1, n_kols=3)[3]
    yield "adversarial", adversarial_replay(0)
    series = generate_market(0, 1, 60)
    yield "one-event", build_replay(
        series, [BaselineSignal("kol_00", "T000", 30, 1.0, 0.9, math.tanh(1.8))],
        kol_ids=["kol_00"])
    yield "event-free", build_replay(generate_market(0, 2, 60), [], kol_ids=["kol_00"])


def test_09_baseline_anchor_math():
    rng = np.random.default_rng(9)
    s = rng.uniform(-1, 1, 1000)
    c = rng.uniform(0, 1, 1000)
    err = max(abs(baseline_raw(a, b) - tanh_hp(2.0 * a * b)) for a, b in zip(s, c))
    nonzero = []
    for name, buf in rmb_fixtures():
        res = run_rmb(buf)
        m = betrayal_metrics(res.weights, res.a_base)
        if any(m.values()):
            nonzero.append((name, m))
    ok = err <= 1e-9 and not nonzero
    record(9, "baseline anchor math", ok,
           f"tanh max err {err:.1e} at 1000 points; RMB UER/DRR/BD nonzero on {nonzero or 'none'}")
    assert ok


# --- 10 --------------------------------------------------------------------------------


def _post(likes=300, replies=30, retweets=10, quotes=5, views=5000, rel=0.5):
    return {"likes": likes, "replies": replies, "retweets": retweets, "quotes": quotes,
            "views": views, "text_relevance_raw": rel}


def ranking_fixture():
    rng = np.random.default_rng(10)
    out = []

    def random_posts(k, **fixed):
        return [_post(likes=int(rng.integers(200, 3000)), replies=int(rng.integers(20, 300)),
                      retweets=int(rng.integers(0, 100)), quotes=int(rng.integers(0, 30)),
                      views=int(rng.integers(3000, 90000)), rel=float(rng.random()))
                | fixed for _ in range(k)]

    # threshold edges
    out.append(CandidateKol("replies_20", 1000, random_posts(3, replies=20), 5, 6))
    out.append(CandidateKol("replies_19", 1000, random_posts(3, replies=19), 5, 6))
    out.append(CandidateKol("likes_200", 1000, random_posts(3, likes=200), 5, 6))
    out.append(CandidateKol("likes_199", 1000, random_posts(3, likes=199), 5, 6))
    out.append(CandidateKol("mutual_5", 1000, random_posts(4), 5, 5))
    out.append(CandidateKol("mutual_4", 1000, random_posts(4), 5, 4))
    out.append(CandidateKol("followers_200000", 200_000, random_posts(4), 5, 6))
    out.append(CandidateKol("followers_200001", 200_001, random_posts(4), 5, 6))
    out.append(CandidateKol("posts_3", 1000, random_posts(3), 5, 6))
    out.append(CandidateKol("posts_2", 1000, random_posts(2) + random_posts(2, replies=5), 5, 6))
    out.append(CandidateKol("active_3", 1000, random_posts(3), 3, 6))
    out.append(CandidateKol("active_2", 1000, random_posts(3), 2, 6))
    out.append(CandidateKol("views_3000", 1000, random_posts(3, views=3000), 5, 6))
    out.append(CandidateKol("views_2999", 1000, random_posts(3, views=2999), 5, 6))
    for i in range(6):
        out.append(CandidateKol(f"rand_{i}", int(rng.integers(0, 500_000)),
                                random_posts(int(rng.integers(2, 8))),
                                int(rng.integers(1, 10)), int(rng.integers(3, 10))))
    return out


def ranking_oracle(cands):
    """Spreadsheet-style recomputation with plain Python scalars."""
    rows = []
    for c in cands:
        posts = [p for p in c.posts if p["replies"] >= 20 and p["likes"] >= 200]
        views = sorted(p["views"] for p in posts)
        ok = (len(posts) >= 3 and c.active_days >= 3 and statistics.median(views) >= 3000
              and c.mutual_overlap >= 5) if posts else False
        if not ok:
            continue
        sim = sum(p["text_relevance_raw"] for p in posts) / len(posts)
        er = sum(p["likes"] + p["replies"] + p["retweets"] + p["quotes"] for p in posts) / len(posts)
        rows.append([c.handle, c.followers > 200_000, sim, math.log(1 + 1000 * er)])

    def norm(col):
        lo, hi = min(r[col] for r in rows), max(r[col] for r in rows)
        for r in rows:
            r.append(0.0 if hi == lo else (r[col] - lo) / (hi - lo))

    norm(2)
    norm(3)
    for r in rows:
        r.append(0.4 * r[4] + 0.6 * r[5])
    rows.sort(key=lambda r: (not r[1], -r[6], r[0]))
    return [(r[0], r[6]) for r in rows]


def test_10_kol_ranking():
    cands = ranking_fixture()
    assert len(cands) == 20
    got = [(k.handle, k.score) for k in rank_kols(cands) if k.eligible]
    want = ranking_oracle(cands)
    same_order = [h for h, _ in got] == [h for h, _ in want]
    score_err = max(abs(a[1] - b[1]) for a, b in zip(got, want)) if same_order else math.inf
    elig = {h for h, _ in got}
    edges = ({"replies_20", "likes_200", "mutual_5", "posts_3", "active_3", "views_3000"} <= elig
             and not {"replies_19", "likes_199", "mutual_4", "posts_2", "active_2",
                      "views_2999"} & elig)
    tiers = {k.handle: k.priority for k in rank_kols(cands)}
    tier_ok = tiers["followers_200001"] and not tiers["followers_200000"]
    pair = rank_kols([CandidateKol("a", 10, [_post(rel=1.0, likes=200)] * 3, 5, 6),
                      CandidateKol("b", 10, [_post(rel=0.0, likes=900)] * 3, 5, 6)])
    a = next(k for k in pair if k.handle == "a")
    weights_ok = a.sim_norm == 1.0 and a.eng_norm == 0.0 and abs(a.score - 0.4) < 1e-12
    ok = same_order and score_err < 1e-12 and edges and tier_ok and weights_ok
    record(10, "KOL ranking", ok,
           f"order match {same_order}, score err {score_err:.1e}, thresholds {edges and tier_ok}, "
           f"0.4 case {weights_ok}")
    assert ok


# --- 11 --------------------------------------------------------------------------------


def rows_on_days(days):
    n = len(days)
    lay = StateLayout(2, 2)
    z = np.zeros(n)
    return ReplayBuffer(lay, np.zeros((n, lay.dim)), np.zeros((n, lay.dim)), z, z, z, z, z,
                        np.zeros(n, bool), z, z, np.zeros(n, bool),
                        np.array(["T"] * n, dtype=object), np.array(["k"] * n, dtype=object),
                        np.asarray(days))


def test_11_split_protocol():
    rng = np.random.default_rng(11)
    worst, straddles = 0.0, 0
    for _ in range(100):
        n_days = int(rng.integers(3, 400))
        day_ids = np.sort(rng.choice(5000, n_days, replace=False))
        days = np.repeat(day_ids, rng.integers(1, 12, n_days))
        rng.shuffle(days)
        parts = chronological_split(rows_on_days(days))
        sets = [set(p.trading_days.tolist()) for p in parts]
        straddles += len(sets[0] & sets[1]) + len(sets[1] & sets[2]) + len(sets[0] & sets[2])
        assert sum(len(p) for p in parts) == len(days)
        for s, q in zip(sets, (0.6, 0.2, 0.2)):
            worst = max(worst, abs(len(s) - q * n_days))
    ok = straddles == 0 and worst <= 1.0
    record(11, "split protocol", ok,
           f"100 calendars, days in two splits: {straddles}, max quantile miss {worst:.2f} days")
    assert ok


# --- 12 --------------------------------------------------------------------------------


def test_12_determinism(tmp_path):
    digests = []
    for name in ("first", "second"):
        cfg = preset("tiny")
        cfg.output_dir = str(tmp_path / name)
        p = Pipeline(cfg, use_cache=False)
        p.run()
        digests.append(hashlib.sha256((p.out / "report" / "report.csv").read_bytes()).hexdigest())
    ok = digests[0] == digests[1]
    record(12, "determinism", ok, f"report.csv sha256 {digests[0][:16]} vs {digests[1][:16]}")
    assert ok
