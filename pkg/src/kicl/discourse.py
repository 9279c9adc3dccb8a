"""Structured KOL signals: alignment to trading days, raw baseline scores,
synthetic discourse, and the KOL selection ranking."""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalendarRangeError, InputError
from .marketdata import TradingCalendar
from .seeding import substream

TRADING_DAYS_PER_QUARTER = 63


@dataclass(frozen=True)
class DiscourseEvent:
    kol_id: str
    timestamp: dt.datetime
    ticker: str
    sentiment: float
    confidence: float

    def __post_init__(self):
        if not self.ticker:
            raise InputError("event ticker must be non-empty")
        if not -1.0 <= self.sentiment <= 1.0:
            raise InputError(f"sentiment {self.sentiment} outside [-1, 1]")
        if not 0.0 <= self.confidence <= 1.0:
            raise InputError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class BaselineSignal:
    kol_id: str
    ticker: str
    trading_day: int
    sentiment: float
    confidence: float
    a_raw: float
    fresh_event: bool = True
    n_events: int = 1


def align_to_trading_day(event: DiscourseEvent, calendar: TradingCalendar) -> int:
    """Pre-open and intraday posts (close inclusive) map to the same session;
    after-hours and non-trading-day posts map to the next session."""
    if not calendar.covers(event.timestamp):
        raise CalendarRangeError(f"{event.timestamp} outside calendar range")
    ts = calendar.to_local(event.timestamp)
    date = ts.date()
    try:
        day = calendar.day_of(date)
    except CalendarRangeError:
        day = None
    if day is not None and ts.time() <= calendar.close_time:
        return day
    return calendar.next_after(date)


def baseline_raw(sentiment: float, confidence: float) -> float:
    return math.tanh(2.0 * sentiment * confidence)


def baseline_signals(events, calendar: TradingCalendar) -> list[BaselineSignal]:
    """Aggregate aligned events into one signal per (kol, ticker, day).

    Several events on one day combine into a confidence-weighted mean
    sentiment and a mean confidence before the tanh score.
    """
    groups: dict[tuple, list[DiscourseEvent]] = {}
    for ev in events:
        key = (ev.kol_id, ev.ticker, align_to_trading_day(ev, calendar))
        groups.setdefault(key, []).append(ev)
    out = []
    for (kol, ticker, day) in sorted(groups):
        evs = groups[(kol, ticker, day)]
        conf = np.array([e.confidence for e in evs])
        sent = np.array([e.sentiment for e in evs])
        total = conf.sum()
        s = float((conf * sent).sum() / total) if total > 0 else 0.0
        c = float(conf.mean())
        out.append(BaselineSignal(kol, ticker, day, s, c, baseline_raw(s, c), True, len(evs)))
    return out


@dataclass
class DiscourseParams:
    n_kols: int = 4
    polarity_probs: tuple = (0.56, 0.31, 0.13)  # positive, negative, neutral
    confidence_beta: tuple = (5.0, 2.0)
    continuous_sentiment: bool = False


def generate_discourse(
    seed: int,
    tickers,
    calendar: TradingCalendar,
    intensity: float,
    params: DiscourseParams | None = None,
) -> list[DiscourseEvent]:
    """Poisson event stream per (kol, ticker); ``intensity`` is events per
    ticker per quarter (63 sessions) for each KOL."""
    tickers = list(tickers)
    if not tickers:
        raise InputError("empty ticker set")
    if intensity <= 0:
        raise InputError("intensity must be > 0")
    p = params or DiscourseParams()
    probs = np.asarray(p.polarity_probs, dtype=np.float64)
    if len(probs) != 3 or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0):
        raise InputError("polarity_probs must be three non-negative weights summing to 1")
    rng = substream(seed, "discourse")
    start = dt.datetime.combine(calendar.dates[0], dt.time(0, 0))
    end = dt.datetime.combine(calendar.dates[-1], calendar.close_time)
    span_s = int((end - start).total_seconds())
    rate = intensity * len(calendar) / TRADING_DAYS_PER_QUARTER
    polarity = np.array([1.0, -1.0, 0.0])
    a, b = p.confidence_beta

    events = []
    for k in range(p.n_kols):
        kol = f"kol_{k:02d}"
        for ticker in tickers:
            n = int(rng.poisson(rate))
            offsets = np.sort(rng.integers(0, span_s + 1, size=n))
            cls = rng.choice(3, size=n, p=probs)
            conf = rng.beta(a, b, size=n)
            mag = rng.random(n)
            for off, c, cf, m in zip(offsets, cls, conf, mag):
                sent = polarity[c] * (m if p.continuous_sentiment else 1.0)
                ts = start + dt.timedelta(seconds=int(off))
                events.append(DiscourseEvent(kol, ts, ticker, float(sent), float(cf)))
    events.sort(key=lambda e: (e.timestamp, e.kol_id, e.ticker))
    return events


def read_events_csv(path) -> list[DiscourseEvent]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"event CSV not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return [
            DiscourseEvent(
                r["kol_id"].strip(),
                dt.datetime.fromisoformat(r["timestamp"].strip()),
                r["ticker"].strip(),
                float(r["sentiment"]),
                float(r["confidence"]),
            )
            for r in csv.DictReader(fh)
        ]


def write_events_csv(path, events) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kol_id", "timestamp", "ticker", "sentiment", "confidence"])
        for e in events:
            w.writerow([e.kol_id, e.timestamp.isoformat(), e.ticker, repr(e.sentiment),
                        repr(e.confidence)])


# --- KOL selection -----------------------------------------------------------


@dataclass
class CandidateKol:
    handle: str
    followers: int
    posts: list = field(default_factory=list)
    active_days: int = 0
    mutual_overlap: int = 0

    def __post_init__(self):
        numeric = [self.followers, self.active_days, self.mutual_overlap]
        for post in self.posts:
            numeric += [post[k] for k in ("likes", "replies", "retweets", "quotes", "views")]
        if any(v < 0 for v in numeric):
            raise InputError(f"{self.handle}: counts must be >= 0")


@dataclass
class RankConfig:
    min_replies: int = 20
    min_likes: int = 200
    min_posts: int = 3
    min_active_days: int = 3
    min_median_views: float = 3000.0
    min_mutual_overlap: int = 5
    priority_followers: int = 200_000
    sim_weight: float = 0.4
    eng_weight: float = 0.6
    engagement_scale: float = 1000.0


@dataclass
class KolScore:
    handle: str
    eligible: bool
    priority: bool
    sim_raw: float
    eng_raw: float
    sim_norm: float
    eng_norm: float
    score: float
    rank: int | None
    reason: str = ""


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def rank_kols(candidates, config: RankConfig | None = None) -> list[KolScore]:
    """Three-stage selection: topic/activity filter, network filter, score.

    Eligible accounts come first, ordered by follower priority tier, then
    score descending, then handle. Filtered accounts follow with rank None.
    """
    cfg = config or RankConfig()
    kept, dropped = [], []
    for c in candidates:
        posts = [p for p in c.posts
                 if p["replies"] >= cfg.min_replies and p["likes"] >= cfg.min_likes]
        reason = ""
        if len(posts) < cfg.min_posts:
            reason = "posts"
        elif c.active_days < cfg.min_active_days:
            reason = "active_days"
        elif float(np.median([p["views"] for p in posts])) < cfg.min_median_views:
            reason = "median_views"
        elif c.mutual_overlap < cfg.min_mutual_overlap:
            reason = "mutual_overlap"
        if reason:
            dropped.append((c, reason))
            continue
        sim = float(np.mean([p["text_relevance_raw"] for p in posts]))
        er = float(np.mean([p["likes"] + p["replies"] + p["retweets"] + p["quotes"]
                            for p in posts]))
        kept.append((c, sim, math.log(1.0 + er * cfg.engagement_scale)))

    out = []
    if kept:
        sim_n = _minmax(np.array([k[1] for k in kept]))
        eng_n = _minmax(np.array([k[2] for k in kept]))
        for (c, sim, eng), sn, en in zip(kept, sim_n, eng_n):
            score = cfg.sim_weight * float(sn) + cfg.eng_weight * float(en)
            out.append(KolScore(c.handle, True, c.followers > cfg.priority_followers,
                                sim, eng, float(sn), float(en), score, None))
        out.sort(key=lambda k: (not k.priority, -k.score, k.handle))
        for i, k in enumerate(out, start=1):
            k.rank = i
    for c, reason in sorted(dropped, key=lambda x: x[0].handle):
        out.append(KolScore(c.handle, False, c.followers > cfg.priority_followers,
                            math.nan, math.nan, math.nan, math.nan, math.nan, None, reason))
    return out


def read_candidates(path) -> list[CandidateKol]:
    """Candidate records: a JSON list of objects with keys ``handle``,
    ``followers``, ``active_days``, ``mutual_overlap`` and ``posts`` (each
    post: ``likes``, ``replies``, ``retweets``, ``quotes``, ``views``,
    ``text_relevance_raw``)."""
    with Path(path).open(encoding="utf-8") as fh:
        raw = json.load(fh)
    return [CandidateKol(**r) for r in raw]


def write_candidates(path, candidates) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump([asdict(c) for c in candidates], fh, indent=1, sort_keys=True)


def write_ranking_csv(path, scores) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["handle", "eligible", "sim_norm", "eng_norm", "score", "rank"])
        for s in scores:
            if s.eligible:
                w.writerow([s.handle, 1, f"{s.sim_norm:.10g}", f"{s.eng_norm:.10g}",
                            f"{s.score:.10g}", s.rank])
            else:
                w.writerow([s.handle, 0, "", "", "", ""])
