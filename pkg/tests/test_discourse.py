import datetime as dt
import math
from decimal import Decimal, getcontext

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kicl.discourse import (CandidateKol, DiscourseEvent, align_to_trading_day,
                            baseline_raw, baseline_signals, generate_discourse, rank_kols,
                            read_candidates, read_events_csv, write_candidates,
                            write_events_csv, write_ranking_csv)
from kicl.errors import CalendarRangeError, InputError
from kicl.marketdata import TradingCalendar

CAL = TradingCalendar.business_days("2024-01-01", 30)  # Monday start


def ev(ts, ticker="AAA", s=1.0, c=0.5, kol="k"):
    return DiscourseEvent(kol, ts, ticker, s, c)


def test_friday_evening_goes_to_monday():
    fri = dt.datetime(2024, 1, 5, 20, 0)
    assert CAL.dates[align_to_trading_day(ev(fri), CAL)] == dt.date(2024, 1, 8)


def test_intraday_same_day():
    tue = dt.datetime(2024, 1, 2, 10, 30)
    assert CAL.dates[align_to_trading_day(ev(tue), CAL)] == dt.date(2024, 1, 2)


def test_close_boundary_inclusive():
    t = dt.datetime(2024, 1, 2, 16, 0)
    assert CAL.dates[align_to_trading_day(ev(t), CAL)] == dt.date(2024, 1, 2)
    t2 = dt.datetime(2024, 1, 2, 16, 0, 1)
    assert CAL.dates[align_to_trading_day(ev(t2), CAL)] == dt.date(2024, 1, 3)


def test_pre_open_same_day():
    t = dt.datetime(2024, 1, 3, 6, 0)
    assert align_to_trading_day(ev(t), CAL) == 2


def test_aware_timestamp_converted():
    utc = dt.datetime(2024, 1, 2, 15, 30, tzinfo=dt.timezone.utc)  # 10:30 New York
    assert align_to_trading_day(ev(utc), CAL) == 1


def test_out_of_range():
    with pytest.raises(CalendarRangeError):
        align_to_trading_day(ev(dt.datetime(2030, 1, 1)), CAL)
    last = dt.datetime.combine(CAL.dates[-1], dt.time(18, 0))
    with pytest.raises(CalendarRangeError):
        align_to_trading_day(ev(last), CAL)


def test_event_validation():
    with pytest.raises(InputError):
        ev(dt.datetime(2024, 1, 2), s=1.5)
    with pytest.raises(InputError):
        ev(dt.datetime(2024, 1, 2), c=-0.1)
    with pytest.raises(InputError):
        ev(dt.datetime(2024, 1, 2), ticker="")


def tanh_oracle(x):
    getcontext().prec = 50
    e = Decimal(2 * x).exp()
    return float((e - 1) / (e + 1))


def test_baseline_raw_examples():
    assert baseline_raw(0.0, 0.9) == 0.0
    assert abs(baseline_raw(1.0, 1.0) - 0.964028) < 1e-6
    assert abs(baseline_raw(-1.0, 0.5) - (-0.761594)) < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 1))
def test_baseline_raw_odd_and_bounded(s, c):
    assert baseline_raw(-s, c) == -baseline_raw(s, c)
    assert abs(baseline_raw(s, c)) < 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 1))
def test_baseline_raw_monotone(s1, s2, c):
    lo, hi = sorted((s1, s2))
    assert baseline_raw(lo, c) <= baseline_raw(hi, c)


def test_multi_event_day_confidence_weighted():
    t = dt.datetime(2024, 1, 2, 11, 0)
    sig = baseline_signals([ev(t, s=1.0, c=0.8), ev(t, s=-1.0, c=0.2)], CAL)
    assert len(sig) == 1
    s = (0.8 - 0.2) / 1.0
    assert sig[0].sentiment == pytest.approx(s)
    assert sig[0].confidence == pytest.approx(0.5)
    assert sig[0].a_raw == pytest.approx(math.tanh(2 * s * 0.5))
    assert sig[0].fresh_event and sig[0].n_events == 2


def test_generate_deterministic_and_sorted():
    a = generate_discourse(3, ["A", "B"], CAL, 5.0)
    b = generate_discourse(3, ["A", "B"], CAL, 5.0)
    assert a == b
    assert all(x.timestamp <= y.timestamp for x, y in zip(a, a[1:]))


def test_generate_low_intensity():
    cal = TradingCalendar.business_days("2021-01-04", 252)
    from kicl.discourse import DiscourseParams
    counts = [len(generate_discourse(s, ["A"], cal, 1e-4, DiscourseParams(n_kols=1)))
              for s in range(50)]
    assert max(counts) <= 1


def test_generate_errors():
    with pytest.raises(InputError):
        generate_discourse(0, [], CAL, 1.0)
    with pytest.raises(InputError):
        generate_discourse(0, ["A"], CAL, 0.0)


def test_events_csv_round_trip(tmp_path):
    evs = generate_discourse(1, ["A", "B"], CAL, 8.0)
    write_events_csv(tmp_path / "e.csv", evs)
    assert read_events_csv(tmp_path / "e.csv") == evs


# --- ranking -------------------------------------------------------------------


def post(likes=300, replies=30, retweets=10, quotes=5, views=5000, rel=0.5):
    return {"likes": likes, "replies": replies, "retweets": retweets, "quotes": quotes,
            "views": views, "text_relevance_raw": rel}


def cand(handle, followers=1000, posts=None, active=5, mutual=6):
    return CandidateKol(handle, followers, posts if posts is not None else [post()] * 3,
                        active, mutual)


def test_score_weights():
    a = cand("a", posts=[post(rel=1.0, likes=200)] * 3)
    b = cand("b", posts=[post(rel=0.0, likes=900)] * 3)
    out = {k.handle: k for k in rank_kols([a, b])}
    assert out["a"].sim_norm == 1.0 and out["a"].eng_norm == 0.0
    assert out["a"].score == pytest.approx(0.4)
    assert out["b"].score == pytest.approx(0.6)


def test_zero_engagement_raw():
    from kicl.discourse import RankConfig
    c = cand("z", posts=[post(likes=0, replies=0, retweets=0, quotes=0)] * 3)
    cfg = RankConfig(min_likes=0, min_replies=0)
    assert rank_kols([c], cfg)[0].eng_raw == 0.0


def test_filters_and_reasons():
    cands = [
        cand("ok"),
        cand("few_posts", posts=[post()] * 2),
        cand("low_replies", posts=[post(replies=19)] * 3),
        cand("low_likes", posts=[post(likes=199)] * 3),
        cand("inactive", active=2),
        cand("low_views", posts=[post(views=2999)] * 3),
        cand("isolated", mutual=4),
    ]
    out = {k.handle: k for k in rank_kols(cands)}
    assert out["ok"].eligible and out["ok"].rank == 1
    for h, reason in [("few_posts", "posts"), ("low_replies", "posts"), ("low_likes", "posts"),
                      ("inactive", "active_days"), ("low_views", "median_views"),
                      ("isolated", "mutual_overlap")]:
        assert not out[h].eligible and out[h].rank is None and out[h].reason == reason


def test_priority_tier_first():
    lo = cand("lo", followers=200_000, posts=[post(rel=1.0, likes=5000)] * 3)
    hi = cand("hi", followers=200_001, posts=[post(rel=0.0, likes=200)] * 3)
    ranked = rank_kols([lo, hi])
    assert [k.handle for k in ranked] == ["hi", "lo"]


def test_degenerate_dimension_zero():
    out = rank_kols([cand("a"), cand("b")])
    assert all(k.sim_norm == 0.0 and k.eng_norm == 0.0 and k.score == 0.0 for k in out)
    assert [k.handle for k in out] == ["a", "b"]


def test_all_filtered():
    out = rank_kols([cand("x", mutual=0)])
    assert len(out) == 1 and not out[0].eligible


def test_negative_counts():
    with pytest.raises(InputError):
        cand("x", followers=-1)


def test_permutation_and_view_scale_invariance(rng):
    cands = [cand(f"c{i}", followers=int(rng.integers(0, 400_000)),
                  posts=[post(likes=int(rng.integers(200, 2000)), rel=float(rng.random()))
                         for _ in range(4)]) for i in range(8)]
    base = [k.handle for k in rank_kols(cands)]
    perm = [cands[i] for i in rng.permutation(len(cands))]
    assert [k.handle for k in rank_kols(perm)] == base
    scaled = [CandidateKol(c.handle, c.followers,
                           [{**p, "views": p["views"] * 10} for p in c.posts],
                           c.active_days, c.mutual_overlap) for c in cands]
    assert [k.handle for k in rank_kols(scaled)] == base


def test_candidate_and_ranking_io(tmp_path):
    cands = [cand("a", posts=[post(rel=0.9)] * 3), cand("b"), cand("c", mutual=0)]
    write_candidates(tmp_path / "c.json", cands)
    back = read_candidates(tmp_path / "c.json")
    assert [c.handle for c in back] == ["a", "b", "c"]
    write_ranking_csv(tmp_path / "r.csv", rank_kols(back))
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "handle,eligible,sim_norm,eng_norm,score,rank"
    assert lines[-1] == "c,0,,,,"
